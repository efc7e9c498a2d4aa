"""Command-line entry point: ``girb <command> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure
(training divergence, singular system).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .calibrators import CalibrationError, CalibratorSpec, GroupCalibrator, STAGES
from .dataset import PARTITION_NAMES, DatasetError, SplitSpec, dump_jsonl, load_jsonl, split
from .grouping import model_from_dict
from .io import atomic_write_text, dumps, read_json, write_json
from .metrics import MetricConfig, MetricError, brier, calibration_slope, ece, gece, auac, primed
from .pipeline import (
    ExperimentConfig, GroupingSpec, PipelineError, _evaluate, fit_calibrators, fit_grouping,
    load_config, run_experiment, seed_report_dict, write_run,
)
from .score_model import DivergenceError, LinearScoreModel, SingularSystemError, TrainConfig, fit_linear
from .synthetic import SyntheticSpec, generate_synthetic


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    spec = SyntheticSpec.from_dict(read_json(args.spec)) if args.spec else SyntheticSpec()
    ds = generate_synthetic(spec)
    dump_jsonl(ds, args.out)
    print(f"wrote {ds.n} records (k={ds.k}, dim={ds.dim}) to {args.out}")


def cmd_split(args):
    ds = load_jsonl(args.data)
    parts = split(ds, SplitSpec(tuple(args.ratios), args.seed, args.unit))
    out = Path(args.out)
    for name, part in zip(PARTITION_NAMES, parts):
        dump_jsonl(part, out / f"{name}.jsonl")
    print(" ".join(f"{n}={len(p)}" for n, p in zip(PARTITION_NAMES, parts)))


def cmd_fit_groups(args):
    ds = load_jsonl(args.data)
    spec = GroupingSpec(method=args.method, k=args.kmeans_k, max_depth=args.kdtree_depth,
                        min_leaf=args.min_leaf, l2_normalize=args.l2_normalize)
    model = fit_grouping(ds.embeddings, spec, args.seed)
    write_json(args.out, model.to_dict())
    print(f"wrote {spec.method} grouping to {args.out}")


def cmd_fit_score_model(args):
    ds = load_jsonl(args.data)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, epochs=args.epochs,
                      seed=args.seed)
    model = fit_linear(ds, cfg)
    write_json(args.out, model.to_dict())
    print(f"final training loss {model.final_train_loss:.6g}; wrote {args.out}")


def _specs(names, args):
    names = names or ["GIRB"]
    if "none" not in names:
        names = ["none"] + list(names)
    return [CalibratorSpec(n, args.points_per_bin, args.min_group_size) for n in names]


def cmd_fit_calibrators(args):
    ds = load_jsonl(args.data)
    grouping = model_from_dict(read_json(args.groups))
    score_model = LinearScoreModel.from_dict(read_json(args.score_model))
    cals = fit_calibrators(ds, grouping, score_model, _specs(args.method, args),
                           args.use_provided_raw_scores)
    for name, gc in cals.items():
        write_json(Path(args.out) / f"{name}.json", gc.to_dict())
    print(f"wrote {len(cals)} calibrators to {args.out}")


def _read_pairs(path):
    proxy, truth, groups = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                proxy.append(float(obj["proxy"]))
                truth.append(float(obj["truth"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"expected an object with numeric 'proxy' and 'truth' ({exc})", lineno) from None
            if not 0.0 <= truth[-1] <= 1.0:
                raise DatasetError("truth out of range [0, 1]", lineno)
            groups.append(obj.get("group"))
    if not proxy:
        raise DatasetError("empty pairs file")
    if any(g is None for g in groups):
        groups = None
    return np.array(proxy), np.array(truth), groups


def evaluate_pairs(path, n_bins: int) -> dict:
    proxy, truth, groups = _read_pairs(path)
    cfg = MetricConfig(n_bins)
    out = {"n": len(proxy), "ece": ece(proxy, truth, cfg), "brier": brier(proxy, truth)}
    out["gece"] = gece(proxy, truth, groups, cfg) if groups is not None else None
    try:
        out["slope"] = calibration_slope(proxy, truth, cfg)
    except MetricError:
        out["slope"] = None
    for m in ("ece", "gece", "brier", "slope"):
        out[m + "'"] = primed(m, out[m])
    if np.all((truth == 0) | (truth == 1)):
        out["auac"] = auac(np.clip(proxy, 0, 1), truth)
    return out


def cmd_evaluate(args):
    if args.pairs:
        table = evaluate_pairs(args.pairs, args.bins)
        for k in ("n", "ece", "ece'", "gece", "gece'", "brier", "brier'", "slope", "slope'", "auac"):
            if k in table:
                v = table[k]
                print(f"{k:8s} {v if k == 'n' else _fmt(v)}")
        if args.out:
            write_json(args.out, table)
        return
    if not (args.data and args.groups and args.score_model and args.calibrators):
        raise UsageError("evaluate needs --pairs, or all of --data, --groups, --score-model, --calibrators")
    ds = load_jsonl(args.data)
    grouping = model_from_dict(read_json(args.groups))
    score_model = LinearScoreModel.from_dict(read_json(args.score_model))
    cal_dir = Path(args.calibrators)
    cals = {}
    for name in STAGES:
        p = cal_dir / f"{name}.json"
        if p.exists():
            cals[name] = GroupCalibrator.from_dict(read_json(p))
    if not cals:
        raise UsageError(f"no calibrator JSON files found in {cal_dir}")
    order = [n for n in STAGES if n in cals]
    cals = {n: cals[n] for n in order}
    reports = _evaluate(ds, grouping, score_model, cals, MetricConfig(args.bins),
                        args.use_provided_raw_scores)
    if args.out:
        write_json(args.out, seed_report_dict(reports))
    for name, rep in reports.items():
        for dim, st, metric, v in rep.rows():
            if metric in ("ece", "gece", "brier", "slope", "accuracy"):
                print(f"{name:8s} {dim:10s} {st} {metric:9s} {_fmt(v)}")


def _config_with_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    d = cfg.to_dict()
    d["calibrators"] = [c for c in d["calibrators"]]
    if args.seed:
        d["seeds"] = list(args.seed)
    if args.bins is not None:
        d["metrics"]["n_bins"] = args.bins
    if args.kmeans_k is not None:
        d["grouping"]["k"] = args.kmeans_k
    if args.kdtree_depth is not None:
        d["grouping"]["max_depth"] = args.kdtree_depth
    if args.min_group_size is not None:
        for c in d["calibrators"]:
            c["min_group_size"] = args.min_group_size
    if args.use_provided_raw_scores:
        d["use_provided_raw_scores"] = True
    return ExperimentConfig.from_dict(d)


def cmd_run(args):
    cfg = _config_with_overrides(args)
    result = run_experiment(cfg)
    run_dir = write_run(result, args.out)
    print(f"wrote {run_dir}")
    print_summary(result.summary())


def print_summary(summary: dict) -> None:
    methods = list(next(iter(summary.values())))
    print(f"{'metric':16s}" + "".join(f"{m:>20s}" for m in methods))
    for label, row in summary.items():
        cells = []
        for m in methods:
            e = row[m]
            gain = "-" if e["gain_abs"] is None else f"{e['gain_abs']:+.3f}"
            wins = e["wins"] if isinstance(e["wins"], int) else f"{e['wins']:.2f}"
            cells.append(f"{gain:>12s} {wins!s:>7s}")
        print(f"{label:16s}" + "".join(cells))


def cmd_report(args):
    path = Path(args.run)
    if path.is_dir():
        path = path / "report.json"
    rep = read_json(path)
    if args.format == "json":
        sys.stdout.write(dumps(rep["summary"]))
        return
    print_summary(rep["summary"])
    print()
    for method, agg in rep["aggregate"].items():
        for dim, by in agg.items():
            for st, ms in by.items():
                cells = []
                for metric in ("ece", "gece", "brier", "slope"):
                    s = ms.get(metric, {})
                    mean, std = s.get("mean"), s.get("std")
                    cells.append(f"{metric} {_fmt(mean)}" + ("" if std is None else f" ± {std:.4f}"))
                print(f"{method:8s} {dim:10s} {st}  " + "  ".join(cells))


# ---------------------------------------------------------------------------
# parser


def _add_calib_flags(p):
    p.add_argument("--method", action="append", choices=sorted(STAGES),
                   help="calibrator to fit; repeatable (default: GIRB; 'none' is always added)")
    p.add_argument("--min-group-size", type=int, default=25,
                   help="groups with fewer calibration pairs use the global map (default: 25)")
    p.add_argument("--points-per-bin", type=int, default=None,
                   help="bin size for binning stages (default: slice size // 10, i.e. 10 bins)")
    p.add_argument("--use-provided-raw-scores", action="store_true",
                   help="calibrate the records' own raw_scores instead of score-model outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="girb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="synthetic spec JSON (default: built-in two-group spec)")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="split a dataset into cluster/regression/calibration/test")
    p.add_argument("--data", required=True, help="input JSONL dataset")
    p.add_argument("--out", required=True, help="output directory for the four partitions")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default: 0)")
    p.add_argument("--ratios", type=float, nargs=4, default=[0.3, 0.3, 0.3, 0.1],
                   metavar="R", help="partition ratios (default: 0.3 0.3 0.3 0.1, the reference protocol)")
    p.add_argument("--unit", choices=["record", "document"], default="record",
                   help="shuffle records or whole documents (default: record)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fit-groups", help="fit the embedding-space grouping model")
    p.add_argument("--data", required=True, help="cluster partition JSONL")
    p.add_argument("--out", required=True, help="output grouping JSON")
    p.add_argument("--method", choices=["kmeans", "kdtree"], default="kmeans",
                   help="grouping algorithm (default: kmeans)")
    p.add_argument("--kmeans-k", type=int, default=256,
                   help="number of KMeans clusters (default: 256, the reference setting)")
    p.add_argument("--kdtree-depth", type=int, default=8,
                   help="maximum KD-tree depth (default: 8, the reference setting; 0 = one global group)")
    p.add_argument("--min-leaf", type=int, default=25, help="minimum KD-tree leaf size (default: 25)")
    p.add_argument("--l2-normalize", action="store_true", help="cluster L2-normalized embeddings")
    p.add_argument("--seed", type=int, default=0, help="KMeans seed (default: 0)")
    p.set_defaults(func=cmd_fit_groups)

    p = sub.add_parser("fit-score-model", help="train the linear score model")
    p.add_argument("--data", required=True, help="regression partition JSONL")
    p.add_argument("--out", required=True, help="output model JSON")
    p.add_argument("--batch-size", type=int, default=500, help="mini-batch size (default: 500, reference setting)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default: 1e-3, reference setting)")
    p.add_argument("--epochs", type=int, default=50, help="training epochs (default: 50, reference setting)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default: 0)")
    p.set_defaults(func=cmd_fit_score_model)

    p = sub.add_parser("fit-calibrators", help="fit calibrators on the calibration partition")
    p.add_argument("--data", required=True, help="calibration partition JSONL")
    p.add_argument("--groups", required=True, help="grouping model JSON")
    p.add_argument("--score-model", required=True, help="score model JSON")
    p.add_argument("--out", required=True, help="output directory, one JSON per calibrator")
    _add_calib_flags(p)
    p.set_defaults(func=cmd_fit_calibrators)

    p = sub.add_parser("evaluate", help="compute calibration metrics")
    p.add_argument("--pairs", help="JSONL of {proxy, truth, group?} triples to score directly")
    p.add_argument("--data", help="test partition JSONL (with --groups/--score-model/--calibrators)")
    p.add_argument("--groups", help="grouping model JSON")
    p.add_argument("--score-model", help="score model JSON")
    p.add_argument("--calibrators", help="directory of calibrator JSON files")
    p.add_argument("--bins", type=int, default=10,
                   help="equal-frequency bins for ECE/GECE/slope (default: 10, the reference setting)")
    p.add_argument("--use-provided-raw-scores", action="store_true",
                   help="evaluate the records' own raw_scores instead of score-model outputs")
    p.add_argument("--out", help="also write the metrics as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run a full experiment from a config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="root directory for run outputs")
    p.add_argument("--seed", type=int, action="append", help="seed; repeatable (overrides config)")
    p.add_argument("--bins", type=int, help="metric bins (default: config value, normally 10)")
    p.add_argument("--kmeans-k", type=int, help="KMeans clusters (default: config value, normally 256)")
    p.add_argument("--kdtree-depth", type=int, help="KD-tree depth (default: config value, normally 8)")
    p.add_argument("--min-group-size", type=int, help="minimum group size (default: config value, normally 25)")
    p.add_argument("--use-provided-raw-scores", action="store_true",
                   help="calibrate dataset raw_scores instead of score-model outputs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="print the summary of a finished run")
    p.add_argument("--run", required=True, help="run directory or report.json")
    p.add_argument("--format", choices=["table", "json"], default="table", help="output format (default: table)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except (DivergenceError, SingularSystemError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DatasetError, CalibrationError, MetricError, PipelineError,
            FileNotFoundError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
