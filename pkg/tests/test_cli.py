import json

import numpy as np
import pytest

from moelab.cli import EXIT_DIVERGED, EXIT_INPUT, EXIT_USAGE, main
from moelab.gating import save_tokens_bin, save_tokens_csv

EXAMPLE_TOKENS = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7]])


def run(tmp_path, *argv, name="report.json"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, (json.loads(out.read_text()) if code == 0 else None)


@pytest.fixture
def example_csv(tmp_path):
    path = tmp_path / "tokens.csv"
    save_tokens_csv(EXAMPLE_TOKENS, path)
    return path


def test_simulate_ecr_exact(tmp_path):
    code, rep = run(tmp_path, "simulate", "ecr", "--exact", "--s", "2", "--n", "2", "--c", "1", "--q", "0.3")
    assert code == 0
    assert rep["payload"]["exact"] == pytest.approx(0.7, abs=1e-15)
    assert rep["config"]["router"] == "ecr" and rep["seed"] == 0


def test_simulate_usage_errors(tmp_path, capsys):
    assert main(["simulate", "tcr", "--mc", "--trials", "0"]) == EXIT_USAGE
    assert "trials" in capsys.readouterr().err
    assert main(["simulate", "tcr", "--exact", "--p", "0.1", "--n", "2"]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["simulate", "tcr", "--exact", "--mc"])


def test_route_example_plan(tmp_path, example_csv):
    code, rep = run(tmp_path, "route", "--input", str(example_csv), "--experts", "2", "--c", "1")
    assert code == 0
    plan = rep["payload"]["plan"]
    assert plan["experts"] == [[0], [2]]
    assert plan["dropped"] == [[1, 0]]


def test_route_input_errors(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["route", "--input", str(empty)]) == EXIT_INPUT
    assert "no tokens" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3,x\n")
    assert main(["route", "--input", str(bad)]) == EXIT_INPUT
    assert "line 2" in capsys.readouterr().err
    assert main(["route", "--input", str(tmp_path / "missing.csv")]) == EXIT_INPUT
    zero = tmp_path / "zero.csv"
    zero.write_text("1,1\n0,0\n")
    assert main(["route", "--input", str(zero)]) == EXIT_INPUT
    assert "index 1" in capsys.readouterr().err
    assert main(["route", "--input", str(empty), "--experts", "3"]) == EXIT_INPUT
    assert main(["route"]) == EXIT_USAGE


def test_route_hybrid_full_threshold_equals_tcr(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "t.csv"
    save_tokens_csv(rng.standard_normal((40, 8)), path)
    _, hyb = run(tmp_path, "route", "--input", str(path), "--experts", "4", "--mode", "hybrid",
                 "--theta", "1.0", "--cmax", "1e9", name="h.json")
    _, tcr = run(tmp_path, "route", "--input", str(path), "--experts", "4", "--mode", "tcr",
                 "--ell", "1", "--c", "1e9", name="t.json")
    h, t = hyb["payload"]["plan"], tcr["payload"]["plan"]
    assert h["experts"] == t["experts"] and h["dropped"] == t["dropped"]


def test_route_binary_input_matches_csv(tmp_path, example_csv):
    path = tmp_path / "tokens.bin"
    save_tokens_bin(EXAMPLE_TOKENS, path)
    _, a = run(tmp_path, "route", "--input", str(path), "--c", "1", name="a.json")
    _, b = run(tmp_path, "route", "--input", str(example_csv), "--c", "1", name="b.json")
    assert a["payload"]["plan"] == b["payload"]["plan"]


def test_train_zero_lr_reports_unchanged(tmp_path):
    code, rep = run(tmp_path, "train", "--s", "16", "--steps", "3", "--batch-size", "2", "--learning-rate", "0")
    assert code == 0
    p = rep["payload"]
    assert p["params_unchanged"] and p["initial_param_hash"] == p["final_param_hash"]
    assert (tmp_path / "report.csv").read_text().startswith("step,task_loss,")


def test_train_divergence_exit(tmp_path, capsys):
    code = main(["train", "--s", "16", "--steps", "20", "--batch-size", "4", "--learning-rate", "1e9",
                 "--init-scale", "1", "--metrics", str(tmp_path / "m.csv")])
    assert code == EXIT_DIVERGED
    assert "task_loss" in capsys.readouterr().err


def test_train_bad_schedule(tmp_path):
    assert main(["train", "--schedule", "5:TCR:8", "--metrics", str(tmp_path / "m.csv")]) == EXIT_USAGE
    assert main(["train", "--schedule", "0:XYZ:8", "--metrics", str(tmp_path / "m.csv")]) == EXIT_USAGE


def test_features_csv(tmp_path):
    csv = tmp_path / "corr.csv"
    code = main(["features", "--kind", "clustered", "--s", "32", "--d", "64", "--csv", str(csv),
                 "--out", str(tmp_path / "f.json")])
    assert code == 0
    rep = json.loads((tmp_path / "f.json").read_text())
    assert rep["payload"]["mean_within_cluster"] > 0.8
    assert np.loadtxt(csv, delimiter=",").shape == (32, 32)


def test_bench_empty_grid_and_k(tmp_path):
    code, rep = run(tmp_path, "bench", "--s-grid", "", "--n-grid", "4", "--c-grid", "8")
    assert code == 0 and rep["payload"] == {"cells": []}
    code, rep = run(tmp_path, "bench", "--s-grid", "64", "--n-grid", "4", "--c-grid", "8", "--k", "1")
    assert rep["payload"]["cells"][0]["k"] == 1
    assert rep["measurements"]["cells"][0]["tcr"]["median_s"] > 0
    assert main(["bench", "--k", "0"]) == EXIT_USAGE


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"s": 4, "bogus": 1}))
    assert main(["simulate", "--config", str(cfg)]) == EXIT_USAGE
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"router": "ecr", "s": 2, "n": 2, "c": 1, "q": [0.3]}))
    _, rep = run(tmp_path, "simulate", "--config", str(cfg), "--q", "0.5")
    assert rep["payload"]["exact"] == pytest.approx(0.5)
    assert rep["config"]["method"] == "exact"


REPLAYS = [
    ["simulate", "tcr", "--mc", "--s", "30", "--n", "3", "--c", "4", "--trials", "20000", "--seed", "3"],
    ["simulate", "ecr", "--bounds", "--s", "101", "--c", "20", "--q", "0.1"],
    ["route", "--mode", "hybrid", "--theta", "0.6", "--noise-std", "0.1", "--seed", "2"],
    ["train", "--s", "16", "--steps", "4", "--batch-size", "2", "--capacity-policy", "adaptive",
     "--schedule", "0:HYBRID:16:0.7,2:ECR:4"],
    ["features", "--kind", "clustered", "--s", "24", "--d", "16"],
    ["bench", "--s-grid", "64", "--n-grid", "2,4", "--c-grid", "8", "--k", "2"],
]


@pytest.mark.parametrize("argv", REPLAYS, ids=lambda a: a[0])
def test_replay_reproduces_payload(tmp_path, example_csv, argv):
    if argv[0] == "route":
        argv = [*argv, "--input", str(example_csv)]
    first = tmp_path / "first.json"
    second = tmp_path / "second.json"
    assert main([*argv, "--out", str(first)]) == 0
    assert main([argv[0], "--config", str(first), "--out", str(second)]) == 0
    a, b = json.loads(first.read_text()), json.loads(second.read_text())
    assert json.dumps(a["payload"], sort_keys=True) == json.dumps(b["payload"], sort_keys=True)
    assert a["config"] == b["config"]


def test_bench_hybrid_not_faster_than_tcr(tmp_path):
    # hybrid pays an extra sort and prefix pass over TCR
    _, rep = run(tmp_path, "bench", "--s-grid", "8192", "--n-grid", "8", "--c-grid", "256", "--k", "5")
    cell = rep["measurements"]["cells"][0]
    assert cell["hybrid"]["tokens_per_s"] <= cell["tcr"]["tokens_per_s"]
