"""End-to-end experiment: split, group, regress, calibrate, evaluate.

Per seed the dataset is split into cluster / regression / calibration / test
partitions. The grouping model sees only cluster embeddings, the score model
only regression records, the calibrators only calibration records. Test
targets are read once, by ``_evaluate``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibrators import HS_RULE, CalibratorSpec, GroupCalibrator, fit_group_calibrator
from .dataset import Dataset, SplitSpec, load_jsonl, split
from .grouping import KMeansModel, KdTreeModel, fit_kdtree, fit_kmeans
from .io import dumps, write_json, atomic_write_text
from .metrics import AUAC_TAIL_RULE, MetricConfig, MetricReport, evaluate_scores
from .score_model import LinearScoreModel, TrainConfig, fit_linear
from .synthetic import SyntheticSpec, generate_synthetic

BASELINE = "none"
# Higher-is-better metrics entering the wins/gain summary, with the score types they exist for.
SUMMARY_METRICS = (
    ("ece'", ("Ind", "Avg")),
    ("gece'", ("Ind", "Avg")),
    ("brier'", ("Ind", "Avg")),
    ("slope'", ("Ind", "Avg")),
    ("accuracy", ("Ind",)),
    ("auac", ("Ind", "Avg")),
)
TIE_TOL = 1e-12


class PipelineError(RuntimeError):
    """A stage failed; the message names the stage and seed."""


@dataclass(frozen=True)
class GroupingSpec:
    method: str = "kmeans"
    k: int = 256
    max_depth: int = 8
    min_leaf: int = 25
    max_iters: int = 300
    tol: float = 1e-8
    n_init: int = 1
    l2_normalize: bool = False

    def __post_init__(self):
        if self.method not in ("kmeans", "kdtree"):
            raise ValueError(f"grouping method must be 'kmeans' or 'kdtree', got {self.method!r}")


def fit_grouping(embeddings, spec: GroupingSpec, seed: int):
    if spec.method == "kmeans":
        return fit_kmeans(embeddings, spec.k, seed=seed, max_iters=spec.max_iters, tol=spec.tol,
                          n_init=spec.n_init, l2_normalize=spec.l2_normalize)
    return fit_kdtree(embeddings, max_depth=spec.max_depth, min_leaf=spec.min_leaf)


@dataclass(frozen=True)
class ExperimentConfig:
    data: str | None = None
    synthetic: SyntheticSpec | None = None
    split_ratios: tuple[float, float, float, float] = (0.3, 0.3, 0.3, 0.1)
    split_unit: str = "record"
    grouping: GroupingSpec = GroupingSpec()
    train: TrainConfig = TrainConfig()
    calibrators: tuple[CalibratorSpec, ...] = (CalibratorSpec("GIRB"),)
    metrics: MetricConfig = MetricConfig()
    seeds: tuple[int, ...] = (0,)
    use_provided_raw_scores: bool = False
    dim_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if (self.data is None) == (self.synthetic is None):
            raise ValueError("config needs exactly one of 'data' or 'synthetic'")
        if not self.calibrators:
            raise ValueError("config needs at least one calibrator spec")
        if not self.seeds:
            raise ValueError("config needs at least one seed")
        specs = list(self.calibrators)
        if all(s.name != BASELINE for s in specs):
            specs.insert(0, CalibratorSpec(BASELINE))
        object.__setattr__(self, "calibrators", tuple(specs))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        if self.grouping.method != "kdtree":
            hier = [s.name for s in specs if s.hierarchical]
            if hier:
                raise ValueError(f"{', '.join(hier)} need KD-tree grouping (grouping.method = 'kdtree')")
        SplitSpec(self.split_ratios, 0, self.split_unit)

    def to_dict(self) -> dict:
        d = {
            "data": self.data,
            "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
            "split_ratios": list(self.split_ratios),
            "split_unit": self.split_unit,
            "grouping": asdict(self.grouping),
            "train": asdict(self.train),
            "calibrators": [asdict(s) for s in self.calibrators],
            "metrics": asdict(self.metrics),
            "seeds": list(self.seeds),
            "use_provided_raw_scores": self.use_provided_raw_scores,
            "dim_names": None if self.dim_names is None else list(self.dim_names),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if d.get("synthetic") is not None:
            d["synthetic"] = SyntheticSpec.from_dict(d["synthetic"])
        if d.get("data") is not None and base_dir is not None:
            p = Path(d["data"])
            d["data"] = str(p if p.is_absolute() else Path(base_dir) / p)
        for name, typ in (("grouping", GroupingSpec), ("train", TrainConfig), ("metrics", MetricConfig)):
            if name in d:
                d[name] = typ(**d[name])
        if "calibrators" in d:
            d["calibrators"] = tuple(CalibratorSpec(c) if isinstance(c, str) else CalibratorSpec(**c)
                                     for c in d["calibrators"])
        for name in ("split_ratios", "seeds", "dim_names"):
            if d.get(name) is not None:
                d[name] = tuple(d[name])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh), base_dir=path.parent)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    return load_jsonl(cfg.data)


# ---------------------------------------------------------------------------
# Stages


def raw_scores_for(ds: Dataset, model: LinearScoreModel, use_provided: bool) -> np.ndarray:
    if use_provided:
        if ds.raw_scores is None:
            raise PipelineError("use_provided_raw_scores is set but records carry no raw_scores")
        return np.asarray(ds.raw_scores)
    return model.predict(ds.embeddings)


def fit_calibrators(cal: Dataset, grouping, score_model, specs, use_provided=False) -> dict[str, GroupCalibrator]:
    raw = raw_scores_for(cal, score_model, use_provided)
    assignments = grouping.assign_many(cal.embeddings)
    return {s.name: fit_group_calibrator(raw, cal.targets, assignments, s) for s in specs}


def _evaluate(test: Dataset, grouping, score_model, calibrators, metric_cfg, use_provided=False,
              dim_names=None) -> dict[str, MetricReport]:
    raw = raw_scores_for(test, score_model, use_provided)
    assignments = grouping.assign_many(test.embeddings)
    groups = np.array([a.group for a in assignments])
    reports = {}
    for name, gc in calibrators.items():
        proxy = gc.calibrate_many(assignments, raw)
        reports[name] = evaluate_scores(proxy, test.targets, groups, metric_cfg, dim_names)
    return reports


@dataclass
class SeedRun:
    seed: int
    grouping: KMeansModel | KdTreeModel
    score_model: LinearScoreModel
    calibrators: dict[str, GroupCalibrator]
    reports: dict[str, MetricReport]


def run_seed(ds: Dataset, cfg: ExperimentConfig, seed: int) -> SeedRun:
    stage = "split"
    try:
        cluster, regression, calibration, test = split(ds, SplitSpec(cfg.split_ratios, seed, cfg.split_unit))
        stage = "grouping"
        grouping = fit_grouping(cluster.embeddings, cfg.grouping, seed)
        stage = "score model"
        score_model = fit_linear(regression, replace(cfg.train, seed=seed))
        stage = "calibration"
        cals = fit_calibrators(calibration, grouping, score_model, cfg.calibrators,
                               cfg.use_provided_raw_scores)
        stage = "evaluation"
        reports = _evaluate(test, grouping, score_model, cals, cfg.metrics,
                            cfg.use_provided_raw_scores, cfg.dim_names)
    except (ValueError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        exc.args = (f"[{stage}, seed {seed}] {exc}",) + exc.args[1:]
        raise
    return SeedRun(seed, grouping, score_model, cals, reports)


# ---------------------------------------------------------------------------
# Aggregation


def _mean_std(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    return {"mean": statistics.fmean(vals), "std": statistics.stdev(vals) if len(vals) > 1 else None}


def aggregate(reports_by_seed: list[MetricReport]) -> dict:
    """``{dim: {score_type: {metric: {"mean", "std"}}}}``; std is the sample std."""
    first = reports_by_seed[0].values
    out = {}
    for dim, by_type in first.items():
        out[dim] = {}
        for st, ms in by_type.items():
            out[dim][st] = {m: _mean_std([r.values[dim][st][m] for r in reports_by_seed]) for m in ms}
    return out


def summarize_wins_gains(means: dict[str, dict], baseline: str = BASELINE) -> dict:
    """Wins and gains per summary metric from per-method metric values.

    ``means[method][dim][score_type][metric]`` holds one number per cell.
    Wins count the dimensions where a method has the (tied-)highest value.
    ``gain_abs`` averages ``value - baseline`` over dimensions and
    ``gain_rel`` averages ``(value - baseline) / baseline``.
    """
    methods = list(means)
    if baseline not in means:
        raise ValueError(f"baseline {baseline!r} missing from results")
    dims = list(means[baseline])
    for m in methods:
        if list(means[m]) != dims:
            raise ValueError(f"method {m!r} reports a different dimension set")
    rows = {}
    for metric, score_types in SUMMARY_METRICS:
        for st in score_types:
            label = f"{metric} ({st})"
            cells = {m: [means[m][d].get(st, {}).get(metric) for d in dims] for m in methods}
            if all(v is None for vs in cells.values() for v in vs):
                continue
            wins = {m: 0 for m in methods}
            for j in range(len(dims)):
                col = {m: cells[m][j] for m in methods if cells[m][j] is not None}
                if not col:
                    continue
                best = max(col.values())
                for m, v in col.items():
                    if v >= best - TIE_TOL:
                        wins[m] += 1
            row = {}
            base = cells[baseline]
            for m in methods:
                entry = {"wins": wins[m], "gain_abs": None, "gain_rel": None}
                if m != baseline:
                    pairs = [(v, b) for v, b in zip(cells[m], base) if v is not None and b is not None]
                    if pairs:
                        entry["gain_abs"] = statistics.fmean(v - b for v, b in pairs)
                        rel = [(v - b) / b for v, b in pairs if b != 0]
                        entry["gain_rel"] = statistics.fmean(rel) if rel else None
                row[m] = entry
            rows[label] = row
    mean_row = {}
    for m in methods:
        wins = [rows[r][m]["wins"] for r in rows]
        ga = [rows[r][m]["gain_abs"] for r in rows if rows[r][m]["gain_abs"] is not None]
        gr = [rows[r][m]["gain_rel"] for r in rows if rows[r][m]["gain_rel"] is not None]
        mean_row[m] = {
            "wins": statistics.fmean(wins) if wins else None,
            "gain_abs": statistics.fmean(ga) if ga else None,
            "gain_rel": statistics.fmean(gr) if gr else None,
        }
    rows["Mean"] = mean_row
    return rows


@dataclass
class RunResult:
    config: ExperimentConfig
    seed_runs: list[SeedRun]
    provenance: dict = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return [s.name for s in self.config.calibrators]

    def reports(self, method: str) -> list[MetricReport]:
        return [sr.reports[method] for sr in self.seed_runs]

    def aggregated(self) -> dict:
        return {m: aggregate(self.reports(m)) for m in self.methods}

    def means(self) -> dict:
        agg = self.aggregated()
        return {m: {d: {st: {k: v["mean"] for k, v in ms.items()} for st, ms in by.items()}
                    for d, by in agg[m].items()} for m in agg}

    def summary(self) -> dict:
        return summarize_wins_gains(self.means())

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "config": self.config.to_dict(),
            "per_seed": {m: {str(sr.seed): sr.reports[m].values for sr in self.seed_runs}
                         for m in self.methods},
            "aggregate": self.aggregated(),
            "summary": self.summary(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", "dimension", "score_type", "metric", "value"])
        for m in self.methods:
            for sr in self.seed_runs:
                for dim, st, metric, v in sr.reports[m].rows():
                    w.writerow([m, sr.seed, dim, st, metric, "" if v is None else repr(v)])
            for dim, by in self.aggregated()[m].items():
                for st, ms in by.items():
                    for metric, stat in ms.items():
                        for key in ("mean", "std"):
                            v = stat[key]
                            w.writerow([m, key, dim, st, metric, "" if v is None else repr(v)])
        return buf.getvalue()


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for a in (ds.embeddings, ds.targets):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update("\n".join(ds.record_ids).encode())
    h.update("\n".join(ds.doc_ids).encode())
    return h.hexdigest()[:16]


def run_experiment(cfg: ExperimentConfig, ds: Dataset | None = None) -> RunResult:
    if ds is None:
        ds = load_dataset(cfg)
    runs = [run_seed(ds, cfg, s) for s in cfg.seeds]
    provenance = {
        "config_hash": cfg.config_hash(),
        "dataset_digest": dataset_digest(ds),
        "seeds": list(cfg.seeds),
        "version": __version__,
        "hs_rule": HS_RULE,
        "auac_tail_rule": AUAC_TAIL_RULE,
        "std": "sample standard deviation over seeds",
    }
    return RunResult(cfg, runs, provenance)


def run_dir_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.config_hash()}_s{'-'.join(str(s) for s in cfg.seeds)}"


def seed_report_dict(reports: dict[str, MetricReport]) -> dict:
    return {name: rep.to_dict() for name, rep in reports.items()}


def write_seed_artifacts(sr: SeedRun, out_dir: str | Path) -> None:
    out = Path(out_dir)
    write_json(out / "grouping.json", sr.grouping.to_dict())
    write_json(out / "score_model.json", sr.score_model.to_dict())
    for name, gc in sr.calibrators.items():
        write_json(out / "calibrators" / f"{name}.json", gc.to_dict())
    write_json(out / "metrics.json", seed_report_dict(sr.reports))


def write_run(result: RunResult, out_root: str | Path) -> Path:
    """Write ``report.json``, ``report.csv``, the config, and per-seed models."""
    run_dir = Path(out_root) / run_dir_name(result.config)
    write_json(run_dir / "config.json", result.config.to_dict())
    for sr in result.seed_runs:
        write_seed_artifacts(sr, run_dir / f"seed_{sr.seed}")
    atomic_write_text(run_dir / "report.json", dumps(result.to_dict()))
    atomic_write_text(run_dir / "report.csv", result.to_csv())
    return run_dir
