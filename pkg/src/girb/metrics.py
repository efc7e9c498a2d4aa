"""Calibration and selective-prediction metrics.

All binned metrics use equal-frequency bins over pairs sorted by proxy
(ties broken by truth, so results do not depend on input order). When ``n``
is not a multiple of the bin count the earliest bins take one extra pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

AUAC_TAIL_RULE = "carry_last"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    n_bins: int = 10
    binning: str = "quantile"

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.binning != "quantile":
            raise ValueError("only quantile (equal-frequency) binning is supported")


def _pairs(proxy, truth):
    proxy = np.asarray(proxy, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if proxy.size == 0:
        raise MetricError("empty input")
    if proxy.shape != truth.shape:
        raise MetricError("proxy and truth lengths differ")
    return proxy, truth


def quantile_bins(proxy, truth, n_bins: int) -> list[tuple[np.ndarray, np.ndarray]]:
    proxy, truth = _pairs(proxy, truth)
    order = np.lexsort((truth, proxy))
    p, t = proxy[order], truth[order]
    base, extra = divmod(len(p), n_bins)
    out, start = [], 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        if size:
            out.append((p[start : start + size], t[start : start + size]))
        start += size
    return out


def ece(proxy, truth, cfg: MetricConfig = MetricConfig()) -> float:
    n = np.size(proxy)
    return float(sum(len(p) / n * abs(t.mean() - p.mean())
                     for p, t in quantile_bins(proxy, truth, cfg.n_bins)))


def gece(proxy, truth, groups, cfg: MetricConfig = MetricConfig()) -> float:
    """Group-size-weighted ECE, using ``min(n_bins, group size)`` bins per group."""
    proxy, truth = _pairs(proxy, truth)
    if groups is None:
        raise MetricError("missing group ids")
    groups = np.asarray(groups)
    if groups.shape != proxy.shape:
        raise MetricError("missing group ids")
    total = 0.0
    for g in np.unique(groups):
        mask = groups == g
        ng = int(mask.sum())
        total += ng / proxy.size * ece(proxy[mask], truth[mask], MetricConfig(min(cfg.n_bins, ng)))
    return float(total)


def brier(proxy, truth) -> float:
    proxy, truth = _pairs(proxy, truth)
    return float(np.mean((proxy - truth) ** 2))


def calibration_slope(proxy, truth, cfg: MetricConfig = MetricConfig()) -> float:
    """OLS slope of per-bin mean truth on per-bin mean proxy."""
    bins = quantile_bins(proxy, truth, cfg.n_bins)
    xs = np.array([p.mean() for p, _ in bins])
    ys = np.array([t.mean() for _, t in bins])
    xc = xs - xs.mean()
    sxx = float(xc @ xc)
    if len(bins) < 2 or sxx == 0.0 or np.ptp(xs) == 0:
        raise MetricError("calibration slope undefined: all bin proxy means are identical")
    return float(xc @ (ys - ys.mean()) / sxx)


def above_average_accuracy(ind_pred, avg_pred, ind_truth, avg_truth) -> np.ndarray:
    """Per-dimension accuracy of the "individual > average" indicator.

    Inputs are ``n x K`` arrays (or length-n vectors for one dimension);
    exact ties count as not above.
    """
    arrs = [np.asarray(a, dtype=float) for a in (ind_pred, avg_pred, ind_truth, avg_truth)]
    if any(a.shape != arrs[0].shape for a in arrs) or arrs[0].size == 0:
        raise MetricError("length mismatch between predictions and truths")
    pred = arrs[0] > arrs[1]
    true = arrs[2] > arrs[3]
    return np.mean(pred == true, axis=0)


def auac(confidence, correct) -> float:
    """Area under accuracy-vs-threshold on [0, 1], integrated exactly.

    ``acc(tau)`` is the accuracy over items with confidence >= tau; past the
    largest confidence it keeps its last value.
    """
    c, y = _pairs(confidence, correct)
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("correctness must be binary (0 or 1)")
    if np.any(c < 0) or np.any(c > 1):
        raise MetricError("confidences must lie in [0, 1]")
    levels = np.unique(c)
    # accuracy of the selection {conf >= level} for each distinct level
    order = np.argsort(c)
    cs, ys = c[order], y[order]
    tail_hits = np.cumsum(ys[::-1])[::-1]
    starts = np.searchsorted(cs, levels, side="left")
    acc = tail_hits[starts] / (len(cs) - starts)
    widths = np.diff(np.concatenate([[0.0], levels]))
    area = float(widths @ acc) + (1.0 - levels[-1]) * acc[-1]
    return area


# ---------------------------------------------------------------------------
# Reports

BASE_METRICS = ("ece", "gece", "brier", "slope")


def primed(metric: str, value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    if metric == "slope":
        return 1.0 - abs(1.0 - value)
    if metric in ("ece", "gece", "brier"):
        return 1.0 - value
    raise KeyError(metric)


@dataclass
class MetricReport:
    """``values[dimension][score_type][metric]``; score_type is "Ind" or "Avg".

    Accuracy lives under "Ind" only; AUAC only when truths are binary.
    """

    values: dict[str, dict[str, dict[str, float | None]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, float | None]]:
        out = []
        for dim in self.values:
            for st in self.values[dim]:
                for metric, v in self.values[dim][st].items():
                    out.append((dim, st, metric, v))
        return out

    def to_dict(self) -> dict:
        return {"values": self.values, "meta": self.meta}

    @classmethod
    def from_dict(cls, d) -> "MetricReport":
        return cls(d["values"], d.get("meta", {}))


def primed_transforms(report: MetricReport) -> MetricReport:
    """Add ``ece'``, ``gece'``, ``brier'``, ``slope'`` next to each base metric."""
    values = {}
    for dim, by_type in report.values.items():
        values[dim] = {}
        for st, ms in by_type.items():
            new = dict(ms)
            for m in BASE_METRICS:
                if m in ms:
                    new[m + "'"] = primed(m, ms[m])
            values[dim][st] = new
    return MetricReport(values, dict(report.meta))


def _safe_slope(proxy, truth, cfg):
    try:
        return calibration_slope(proxy, truth, cfg)
    except MetricError:
        return None


def evaluate_scores(proxy, truth, groups=None, cfg: MetricConfig = MetricConfig(),
                    dim_names: Sequence[str] | None = None) -> MetricReport:
    """Full metric report for ``n x 2K`` proxy/truth arrays (individual then average)."""
    proxy = np.asarray(proxy, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if proxy.ndim != 2 or proxy.shape != truth.shape or proxy.shape[1] % 2:
        raise MetricError("proxy and truth must be matching n x 2K arrays")
    k = proxy.shape[1] // 2
    names = list(dim_names) if dim_names is not None else [f"dim{j}" for j in range(k)]
    acc = above_average_accuracy(proxy[:, :k], proxy[:, k:], truth[:, :k], truth[:, k:])
    values = {}
    for j, name in enumerate(names):
        values[name] = {}
        for st, col in (("Ind", j), ("Avg", k + j)):
            p, t = proxy[:, col], truth[:, col]
            ms = {
                "ece": ece(p, t, cfg),
                "gece": gece(p, t, groups, cfg) if groups is not None else None,
                "brier": brier(p, t),
                "slope": _safe_slope(p, t, cfg),
            }
            if st == "Ind":
                ms["accuracy"] = float(acc[j])
            if np.all((t == 0) | (t == 1)):
                ms["auac"] = auac(np.clip(p, 0.0, 1.0), t)
            values[name][st] = ms
    meta = {"n": int(proxy.shape[0]), "n_bins": cfg.n_bins, "auac_tail_rule": AUAC_TAIL_RULE}
    return primed_transforms(MetricReport(values, meta))
