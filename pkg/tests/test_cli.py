import json

import pytest

from girb.cli import build_parser, main

SPEC = {"n_docs": 150, "summaries_per_doc": 4, "k": 2, "dim": 8}
METHODS = ["IRB", "QAB", "GIRB", "S-GIRB"]


@pytest.fixture
def data(tmp_path):
    (tmp_path / "synth.json").write_text(json.dumps(SPEC))
    assert main(["synth", "--spec", str(tmp_path / "synth.json"), "--out", str(tmp_path / "data.jsonl")]) == 0
    return tmp_path / "data.jsonl"


def _config(tmp_path, data, **extra):
    cfg = {"data": str(data), "grouping": {"k": 3}, "calibrators": METHODS, "seeds": [4]}
    cfg.update(extra)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_happy_path(tmp_path, data, capsys):
    assert main(["run", "--config", str(_config(tmp_path, data)), "--out", str(tmp_path / "runs")]) == 0
    (run_dir,) = (tmp_path / "runs").iterdir()
    assert (run_dir / "report.json").is_file() and (run_dir / "report.csv").is_file()
    assert (run_dir / "seed_4" / "calibrators" / "GIRB.json").is_file()
    capsys.readouterr()
    assert main(["report", "--run", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "GIRB" in out and "Mean" in out
    assert main(["report", "--run", str(run_dir), "--format", "json"]) == 0
    assert "Mean" in json.loads(capsys.readouterr().out)


def test_run_overrides_change_run_dir(tmp_path, data):
    cfg = _config(tmp_path, data)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seed", "1", "--seed", "2",
                 "--bins", "5", "--kmeans-k", "2", "--min-group-size", "10"]) == 0
    (run_dir,) = (tmp_path / "r").iterdir()
    assert run_dir.name.endswith("_s1-2")
    saved = json.loads((run_dir / "config.json").read_text())
    assert saved["metrics"]["n_bins"] == 5 and saved["grouping"]["k"] == 2
    assert all(c["min_group_size"] == 10 for c in saved["calibrators"])


def test_stage_commands_reproduce_run(tmp_path, data):
    seed = 4
    assert main(["run", "--config", str(_config(tmp_path, data)), "--out", str(tmp_path / "runs")]) == 0
    (run_dir,) = (tmp_path / "runs").iterdir()
    ref = run_dir / f"seed_{seed}"
    parts = tmp_path / "parts"
    m = tmp_path / "manual"
    steps = [
        ["split", "--data", str(data), "--out", str(parts), "--seed", str(seed)],
        ["fit-groups", "--data", str(parts / "cluster.jsonl"), "--out", str(m / "grouping.json"),
         "--kmeans-k", "3", "--seed", str(seed)],
        ["fit-score-model", "--data", str(parts / "regression.jsonl"), "--out", str(m / "score_model.json"),
         "--seed", str(seed)],
        ["fit-calibrators", "--data", str(parts / "calibration.jsonl"), "--groups", str(m / "grouping.json"),
         "--score-model", str(m / "score_model.json"), "--out", str(m / "calibrators")]
        + [x for name in METHODS for x in ("--method", name)],
        ["evaluate", "--data", str(parts / "test.jsonl"), "--groups", str(m / "grouping.json"),
         "--score-model", str(m / "score_model.json"), "--calibrators", str(m / "calibrators"),
         "--out", str(m / "metrics.json")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    for name in ["grouping.json", "score_model.json", "metrics.json"] + \
            [f"calibrators/{c}.json" for c in ["none"] + METHODS]:
        assert (m / name).read_bytes() == (ref / name).read_bytes(), name


def test_run_twice_is_byte_identical(tmp_path, data):
    cfg = _config(tmp_path, data)
    for out in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    (a,), (b,) = (tmp_path / "a").iterdir(), (tmp_path / "b").iterdir()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_evaluate_pairs(tmp_path, capsys):
    pairs = tmp_path / "pairs.jsonl"
    rows = [{"proxy": 0.1, "truth": 0, "group": "a"}, {"proxy": 0.9, "truth": 1, "group": "b"}]
    pairs.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    assert main(["evaluate", "--pairs", str(pairs), "--bins", "2", "--out", str(tmp_path / "m.json")]) == 0
    out = capsys.readouterr().out
    assert "ece" in out and "auac" in out
    table = json.loads((tmp_path / "m.json").read_text())
    assert table["ece"] == pytest.approx(0.1)
    assert table["auac"] == pytest.approx(0.95)


def test_evaluate_pairs_bad_line(tmp_path, capsys):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text('{"proxy": 0.1, "truth": 0}\n{"proxy": 0.2}\n')
    assert main(["evaluate", "--pairs", str(pairs)]) == 1
    assert "line 2" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["run", "--bogus"],
    ["frobnicate"],
    [],
    ["split", "--data", "/nonexistent/data.jsonl", "--out", "x"],
    ["evaluate"],
])
def test_validation_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_field_exits_1(tmp_path, data, capsys):
    cfg = _config(tmp_path, data, mystery=True)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert "mystery" in capsys.readouterr().err


def test_divergence_exits_2(tmp_path, data, capsys):
    parts = tmp_path / "parts"
    assert main(["split", "--data", str(data), "--out", str(parts)]) == 0
    code = main(["fit-score-model", "--data", str(parts / "regression.jsonl"), "--out",
                 str(tmp_path / "m.json"), "--lr", "1e6", "--epochs", "50", "--batch-size", "1"])
    assert code == 2
    assert "numeric failure" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_every_subcommand_has_help(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            if action.dest != "help":
                assert action.help, (name, action.dest)
    with pytest.raises(SystemExit) as exc:
        main(["run", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "--kmeans-k" in out and "--bins" in out
    assert "default: 10" in sub.choices["evaluate"].format_help()
