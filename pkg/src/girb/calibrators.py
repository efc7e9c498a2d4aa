"""Post hoc calibration maps and their group-wise wrappers.

Base maps (all vectorized over a 1-D array of raw scores):

* ``IsotonicModel``: weighted PAVA fit, linearly interpolated between block
  representatives, constant outside the fitted range.
* ``BinningModel``: sorted equal-count bins replaced by their mean target.
* ``PlattModel``: ``sigmoid(a * raw + b)`` fitted by damped Newton on the
  soft-label cross-entropy.

``GroupCalibrator`` chains these per the method table in ``STAGES``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .grouping import GroupAssignment


class CalibrationError(ValueError):
    pass


class PlattConvergenceWarning(RuntimeWarning):
    pass


def _check_pairs(raw, target, weight=None):
    raw = np.asarray(raw, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    if raw.size == 0:
        raise CalibrationError("empty input")
    if raw.shape != target.shape:
        raise CalibrationError("raw and target lengths differ")
    if not (np.all(np.isfinite(raw)) and np.all(np.isfinite(target))):
        raise CalibrationError("non-finite value in calibration pairs")
    if weight is None:
        weight = np.ones_like(raw)
    else:
        weight = np.asarray(weight, dtype=float).ravel()
        if weight.shape != raw.shape:
            raise CalibrationError("weight length differs from raw")
        if not np.all(np.isfinite(weight)) or np.any(weight <= 0):
            raise CalibrationError("weights must be finite and positive")
    return raw, target, weight


def _check_query(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise CalibrationError("non-finite raw score")
    return raw


# ---------------------------------------------------------------------------
# Isotonic regression


def pava(y, w=None) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Weighted pool-adjacent-violators on an already ordered sequence.

    Returns the fitted values and the half-open ``(start, end)`` index range
    of every block, left to right.
    """
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    sums: list[float] = []
    wsum: list[float] = []
    starts: list[int] = []
    for i in range(len(y)):
        sums.append(y[i] * w[i])
        wsum.append(w[i])
        starts.append(i)
        while len(sums) > 1 and sums[-2] / wsum[-2] > sums[-1] / wsum[-1]:
            s, ws = sums.pop(), wsum.pop()
            starts.pop()
            sums[-1] += s
            wsum[-1] += ws
    ends = starts[1:] + [len(y)]
    fitted = np.empty(len(y))
    for s, ws, a, b in zip(sums, wsum, starts, ends):
        fitted[a:b] = s / ws
    return fitted, list(zip(starts, ends))


@dataclass
class IsotonicModel:
    """Knots ``(x[i], y[i])``: one per PAVA block; ``weights`` are block weights."""

    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray

    kind = "isotonic"

    @property
    def breakpoints(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))

    def predict(self, raw) -> np.ndarray:
        return np.interp(_check_query(raw), self.x, self.y)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "x": self.x.tolist(), "y": self.y.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d) -> "IsotonicModel":
        return cls(np.asarray(d["x"], float), np.asarray(d["y"], float),
                   np.asarray(d["weights"], float))


def _pool_ties(raw, target, weight):
    order = np.argsort(raw, kind="stable")
    raw, target, weight = raw[order], target[order], weight[order]
    ux, first = np.unique(raw, return_index=True)
    wsum = np.add.reduceat(weight, first)
    tsum = np.add.reduceat(weight * target, first)
    return ux, tsum / wsum, wsum


def fit_isotonic(raw, target, weight=None) -> IsotonicModel:
    """Non-decreasing weighted least-squares fit of ``target`` on ``raw``.

    Tied raw scores are pooled first, so the result does not depend on input
    order. Each block's knot sits at the weighted mean of its raw scores.
    """
    raw, target, weight = _check_pairs(raw, target, weight)
    ux, uy, uw = _pool_ties(raw, target, weight)
    _, blocks = pava(uy, uw)
    xs, ys, ws = [], [], []
    for a, b in blocks:
        bw = uw[a:b].sum()
        xs.append(float(np.dot(uw[a:b], ux[a:b]) / bw))
        ys.append(float(np.dot(uw[a:b], uy[a:b]) / bw))
        ws.append(float(bw))
    ys = np.maximum.accumulate(np.asarray(ys))  # guard against last-ulp dips
    return IsotonicModel(np.asarray(xs), ys, np.asarray(ws))


def isotonic_fitted_values(raw, target, weight=None) -> np.ndarray:
    """In-sample PAVA values (block means), in the caller's input order."""
    raw, target, weight = _check_pairs(raw, target, weight)
    ux, uy, uw = _pool_ties(raw, target, weight)
    fitted, _ = pava(uy, uw)
    return fitted[np.searchsorted(ux, raw)]


def apply_isotonic(model: IsotonicModel, raw):
    out = model.predict(raw)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Binning


@dataclass
class BinningModel:
    """Piecewise-constant map. A raw score equal to an edge falls in the right bin."""

    edges: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    points_per_bin: int | None = None
    n_bins: int | None = None

    kind = "binning"

    def bin_index(self, raw) -> np.ndarray:
        return np.searchsorted(self.edges, _check_query(raw), side="right")

    def predict(self, raw) -> np.ndarray:
        return self.means[self.bin_index(raw)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "edges": self.edges.tolist(), "means": self.means.tolist(),
                "counts": self.counts.tolist(), "points_per_bin": self.points_per_bin,
                "n_bins": self.n_bins}

    @classmethod
    def from_dict(cls, d) -> "BinningModel":
        return cls(np.asarray(d["edges"], float), np.asarray(d["means"], float),
                   np.asarray(d["counts"], int), d.get("points_per_bin"), d.get("n_bins"))


def equal_frequency_sizes(n: int, n_bins: int) -> list[int]:
    """Bin sizes for ``n`` sorted points; the first ``n % n_bins`` bins get one extra."""
    base, extra = divmod(n, n_bins)
    return [base + (1 if b < extra else 0) for b in range(n_bins) if base + (b < extra) > 0]


def fit_binning(raw, target, points_per_bin: int | None = None,
                n_bins: int | None = None) -> BinningModel:
    """Sort by raw score and average the targets in consecutive runs.

    With ``points_per_bin`` every bin holds that many points and a trailing
    partial run forms the last bin; with ``n_bins`` the points are split into
    that many equal-frequency bins. A run of tied raw scores is never split
    across two bins, so each boundary moves right to the end of its tie run.
    """
    raw, target, _ = _check_pairs(raw, target)
    if (points_per_bin is None) == (n_bins is None):
        raise CalibrationError("give exactly one of points_per_bin or n_bins")
    n = raw.size
    if points_per_bin is not None:
        if points_per_bin < 1:
            raise CalibrationError("points_per_bin must be >= 1")
        sizes = [points_per_bin] * (n // points_per_bin)
        if n % points_per_bin:
            sizes.append(n % points_per_bin)
    else:
        if n_bins < 1:
            raise CalibrationError("n_bins must be >= 1")
        sizes = equal_frequency_sizes(n, n_bins)
    order = np.lexsort((target, raw))
    xs, ts = raw[order], target[order]
    bounds = []
    pos = 0
    for size in sizes[:-1]:
        pos += size
        b = pos
        while b < n and xs[b] == xs[b - 1]:
            b += 1
        if b < n and (not bounds or b > bounds[-1]):
            bounds.append(b)
    cuts = [0] + bounds + [n]
    means = np.array([math.fsum(ts[a:b]) / (b - a) for a, b in zip(cuts[:-1], cuts[1:])])
    counts = np.diff(cuts)
    edges = []
    for b in bounds:
        mid = 0.5 * (xs[b - 1] + xs[b])
        edges.append(mid if xs[b - 1] < mid <= xs[b] else xs[b])
    return BinningModel(np.asarray(edges, float), means, counts, points_per_bin, n_bins)


def apply_binning(model: BinningModel, raw):
    out = model.predict(raw)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Platt scaling


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def platt_loss(a: float, b: float, raw, target) -> float:
    """Mean soft-label cross-entropy of ``sigmoid(a * raw + b)``."""
    z = a * np.asarray(raw, float) + b
    return float(np.mean(np.logaddexp(0.0, z) - np.asarray(target, float) * z))


def _platt_grad_hess(a, b, raw, target):
    z = a * raw + b
    p = _sigmoid(z)
    r = p - target
    g = np.array([np.mean(r * raw), np.mean(r)])
    s = p * (1 - p)
    h = np.array([[np.mean(s * raw * raw), np.mean(s * raw)],
                  [np.mean(s * raw), np.mean(s)]])
    return g, h


@dataclass
class PlattModel:
    a: float
    b: float
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0

    kind = "platt"

    def predict(self, raw) -> np.ndarray:
        return _sigmoid(self.a * _check_query(raw) + self.b)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "converged": self.converged,
                "n_iter": self.n_iter, "grad_norm": self.grad_norm}

    @classmethod
    def from_dict(cls, d) -> "PlattModel":
        return cls(float(d["a"]), float(d["b"]), bool(d.get("converged", True)),
                   int(d.get("n_iter", 0)), float(d.get("grad_norm", 0.0)))


def fit_platt(raw, target, max_iter: int = 100, gtol: float = 1e-6) -> PlattModel:
    """Damped Newton from ``(a, b) = (1, 0)``.

    Separable data has no finite optimum; the fit then stops at the
    iteration cap, warns, and returns the (still monotone) last iterate.
    """
    raw, target, _ = _check_pairs(raw, target)
    if np.any(target < 0) or np.any(target > 1):
        raise CalibrationError("Platt targets must lie in [0, 1]")
    theta = np.array([1.0, 0.0])
    loss = platt_loss(*theta, raw, target)
    g, h = _platt_grad_hess(*theta, raw, target)
    it = 0
    while np.linalg.norm(g) >= gtol and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(h + 1e-12 * np.eye(2), -g)
        except np.linalg.LinAlgError:
            step = -g
        t = 1.0
        while True:
            cand = theta + t * step
            new_loss = platt_loss(*cand, raw, target)
            if new_loss <= loss + 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            t *= 0.5
        if new_loss > loss:
            break
        theta, loss = cand, new_loss
        g, h = _platt_grad_hess(*theta, raw, target)
    gnorm = float(np.linalg.norm(g))
    converged = gnorm < gtol
    if not converged:
        warnings.warn(f"Platt scaling stopped after {it} iterations with gradient norm "
                      f"{gnorm:.3g}", PlattConvergenceWarning, stacklevel=2)
    return PlattModel(float(theta[0]), float(theta[1]), converged, it, gnorm)


def apply_platt(model: PlattModel, raw):
    out = model.predict(raw)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class IdentityModel:
    kind = "identity"

    def predict(self, raw) -> np.ndarray:
        return np.asarray(raw, dtype=float).copy()

    def to_dict(self) -> dict:
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d) -> "IdentityModel":
        return cls()


_MODEL_TYPES = {m.kind: m for m in (IsotonicModel, BinningModel, PlattModel, IdentityModel)}


def model_from_dict(d: dict):
    return _MODEL_TYPES[d["kind"]].from_dict(d)


# ---------------------------------------------------------------------------
# Method table and group-wise wrapper

# (scope, base map) per stage, applied left to right. Scope "global" fits one
# map per output dimension on the whole calibration set; "group" fits one per
# (group, dimension); "hier" walks the KD-tree path from leaf to root.
STAGES: dict[str, tuple[tuple[str, str], ...]] = {
    "none": (),
    "B": (("global", "binning"),),
    "S": (("global", "platt"),),
    "S-B": (("global", "platt"), ("global", "binning")),
    "IRB": (("global", "isotonic"),),
    "QAB": (("group", "binning"),),
    "GIRB": (("group", "isotonic"),),
    "S-QAB": (("global", "platt"), ("group", "binning")),
    "S-GIRB": (("global", "platt"), ("group", "isotonic")),
    "HS-QAB": (("global", "platt"), ("hier", "binning")),
    "HS-GIRB": (("global", "platt"), ("hier", "isotonic")),
}

HS_RULE = "ancestor_backoff"


@dataclass(frozen=True)
class CalibratorSpec:
    name: str = "GIRB"
    points_per_bin: int | None = None  # None: slice size // 10, at least 1
    min_group_size: int = 25

    def __post_init__(self):
        if self.name not in STAGES:
            raise ValueError(f"unknown calibrator {self.name!r}; choose from {sorted(STAGES)}")
        if self.points_per_bin is not None and self.points_per_bin < 1:
            raise ValueError("points_per_bin must be >= 1")
        if self.min_group_size < 1:
            raise ValueError("min_group_size must be >= 1")

    @property
    def stages(self) -> tuple[tuple[str, str], ...]:
        return STAGES[self.name]

    @property
    def hierarchical(self) -> bool:
        return any(scope == "hier" for scope, _ in self.stages)

    @property
    def grouped(self) -> bool:
        return any(scope != "global" for scope, _ in self.stages)


def _fit_base(kind: str, raw, target, spec: CalibratorSpec):
    if kind == "isotonic":
        return fit_isotonic(raw, target)
    if kind == "binning":
        ppb = spec.points_per_bin or max(1, len(raw) // 10)
        return fit_binning(raw, target, points_per_bin=ppb)
    if kind == "platt":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PlattConvergenceWarning)
            return fit_platt(raw, target)
    raise ValueError(kind)


@dataclass
class Stage:
    scope: str
    kind: str
    fallback: list  # one global map per dimension
    per_group: dict[int, list] = field(default_factory=dict)  # group or node id -> maps

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "kind": self.kind,
            "fallback": [m.to_dict() for m in self.fallback],
            "per_group": {str(g): [m.to_dict() for m in ms] for g, ms in sorted(self.per_group.items())},
        }

    @classmethod
    def from_dict(cls, d) -> "Stage":
        return cls(d["scope"], d["kind"], [model_from_dict(m) for m in d["fallback"]],
                   {int(g): [model_from_dict(m) for m in ms] for g, ms in d["per_group"].items()})


def _as_assignments(groups) -> list[GroupAssignment]:
    out = []
    for g in groups:
        out.append(g if isinstance(g, GroupAssignment) else GroupAssignment(int(g)))
    return out


@dataclass
class GroupCalibrator:
    spec: CalibratorSpec
    stages: list[Stage]
    n_dims: int
    known_groups: frozenset = frozenset()
    unknown_group_hits: int = 0

    def _route(self, stage: Stage, a: GroupAssignment):
        """Maps used for one record at one stage."""
        if stage.scope == "global":
            return stage.fallback
        if stage.scope == "group":
            maps = stage.per_group.get(a.group)
            if maps is not None:
                return maps
            return stage.fallback
        for node in reversed(a.ancestor_path):
            maps = stage.per_group.get(node)
            if maps is not None:
                return maps
        return stage.fallback

    def _known(self, a: GroupAssignment) -> bool:
        if not self.spec.grouped:
            return True
        if self.spec.hierarchical:
            return bool(a.ancestor_path) and a.ancestor_path[0] in self.known_groups
        return a.group in self.known_groups

    def calibrate(self, assignment, raw) -> np.ndarray:
        """Calibrate one 2K-vector of raw scores."""
        a = _as_assignments([assignment])[0]
        return self.calibrate_many([a], np.asarray(raw, float).reshape(1, -1))[0]

    def calibrate_many(self, assignments: Sequence, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        if raw.ndim != 2 or raw.shape[1] != self.n_dims:
            raise CalibrationError(f"raw scores must be an n x {self.n_dims} array")
        assignments = _as_assignments(assignments)
        if len(assignments) != raw.shape[0]:
            raise CalibrationError("one group assignment per row is required")
        unknown = sum(1 for a in assignments if not self._known(a))
        if unknown:
            self.unknown_group_hits += unknown
            warnings.warn(f"{unknown} record(s) in groups unseen at fit time use the global "
                          "calibrator", RuntimeWarning, stacklevel=2)
        out = raw.copy()
        for stage in self.stages:
            keyed: dict[int, list[int]] = {}
            routes = {}
            for i, a in enumerate(assignments):
                maps = self._route(stage, a)
                keyed.setdefault(id(maps), []).append(i)
                routes[id(maps)] = maps
            for key, rows in keyed.items():
                maps = routes[key]
                for k in range(self.n_dims):
                    out[rows, k] = maps[k].predict(out[rows, k])
        return out

    def to_dict(self) -> dict:
        d = {
            "spec": asdict(self.spec),
            "n_dims": self.n_dims,
            "stages": [s.to_dict() for s in self.stages],
            "known_groups": sorted(self.known_groups),
        }
        if self.spec.hierarchical:
            d["hs_rule"] = HS_RULE
        return d

    @classmethod
    def from_dict(cls, d) -> "GroupCalibrator":
        return cls(CalibratorSpec(**d["spec"]), [Stage.from_dict(s) for s in d["stages"]],
                   int(d["n_dims"]), frozenset(d.get("known_groups", ())))


def fit_group_calibrator(raw, targets, groups, spec: CalibratorSpec) -> GroupCalibrator:
    """Fit the stage chain of ``spec`` on calibration pairs.

    ``raw`` and ``targets`` are ``n x D`` arrays; ``groups`` holds one group
    id or ``GroupAssignment`` per row (hierarchical methods need the KD-tree
    ancestor paths). Groups, or tree nodes, with fewer than
    ``spec.min_group_size`` rows use the globally fitted map instead.
    """
    raw = np.asarray(raw, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise CalibrationError("calibration set is empty")
    if targets.shape != raw.shape:
        raise CalibrationError("raw scores and targets must have the same shape")
    if not np.all(np.isfinite(raw)):
        raise CalibrationError("raw_scores missing or non-finite")
    assignments = _as_assignments(groups)
    if len(assignments) != raw.shape[0]:
        raise CalibrationError("one group assignment per row is required")
    if spec.hierarchical and not all(a.ancestor_path for a in assignments):
        raise CalibrationError(f"{spec.name} needs KD-tree ancestor paths for every record")
    n, dims = raw.shape
    members: dict[int, list[int]] = {}
    if spec.grouped:
        for i, a in enumerate(assignments):
            keys = a.ancestor_path if spec.hierarchical else (a.group,)
            for key in keys:
                members.setdefault(key, []).append(i)

    current = raw.copy()
    stages = []
    for scope, kind in spec.stages:
        fallback = [_fit_base(kind, current[:, k], targets[:, k], spec) for k in range(dims)]
        per_group = {}
        if scope != "global":
            for key in sorted(members):
                rows = members[key]
                if len(rows) < spec.min_group_size:
                    continue
                per_group[key] = [_fit_base(kind, current[rows, k], targets[rows, k], spec)
                                  for k in range(dims)]
        stage = Stage(scope, kind, fallback, per_group)
        stages.append(stage)
        tmp = GroupCalibrator(spec, [stage], dims, frozenset(members))
        current = tmp.calibrate_many(assignments, current)
    return GroupCalibrator(spec, stages, dims, frozenset(members))
