"""
Tests for command discovery, the experiment manager, grids and the lqf entry point.

End-to-end runs use a tiny synthetic task so every command finishes quickly.
"""

import csv
import json

import pytest

from commands import discover_commands, get_command_class
from config import RunConfig
from engine.errors import ContractError, DivergenceError, LqfError, StorageError, exit_code_for
from engine.storage import load_params, read_metrics
from main import main
from manager import ExperimentManager, best_cell, grid_cells, run_grid

EXPECTED_COMMANDS = {
    "ablation", "elr-sweep", "fsi", "influence", "kshot", "lambda-path", "online", "solve", "spectrum",
    "summarize", "train", "verify",
}

TINY = [
    "data.per_class=8", "data.dim=3", "model.hidden=[4]", "model.pretrain_epochs=1",
    "nlft.batch_size=8", "problem.lambda=0.01", "trainer.max_epochs=5",
]

# Keeps the slower commands inside the tiny task
SETTINGS = {
    "ablation": ["ablation.epochs=3", "nlft.max_epochs=3"],
    "elr-sweep": ["elr.batch_sizes=[2, 4]", "elr.epochs=3"],
    "kshot": ["kshot.k=[1, 2]", "nlft.max_epochs=5"],
    "online": ["nlft.max_epochs=5"],
    "summarize": ["summarize.k=3"],
    "verify": ['verify.checks=["closed-form-lstsq", "newton-step"]'],
}


def _run(command, out_dir, *extra):
    argv = [command, "--out", str(out_dir), "--quiet"]
    for item in TINY + list(extra):
        argv += ["--set", item]
    return main(argv)


def _summary(out_dir):
    records = read_metrics(out_dir / "metrics.jsonl")
    assert records[-1]["event"] == "summary", "the summary is the last record"
    return records[-1]


def test_discovery_finds_every_command():
    commands = discover_commands()
    assert set(commands) == EXPECTED_COMMANDS
    assert get_command_class("lambda-path") is commands["lambda-path"]
    assert get_command_class("nope") is None
    assert all(cls.description for cls in commands.values()), "every command describes itself"


def test_grid_helpers(tmp_path):
    cells = grid_cells(eta=[0.1, 0.01], weight_decay=[1e-4, 1e-5])
    assert cells == [
        {"eta": 0.1, "weight_decay": 1e-4}, {"eta": 0.1, "weight_decay": 1e-5},
        {"eta": 0.01, "weight_decay": 1e-4}, {"eta": 0.01, "weight_decay": 1e-5},
    ]
    results = run_grid(_cell_task, cells, tmp_path)
    assert [r["score"] for r in results] == [0.1 + 1e-4, 0.1 + 1e-5, 0.01 + 1e-4, 0.01 + 1e-5]
    assert (tmp_path / "grid-3" / "cell.json").exists(), "each cell gets its own directory"
    assert best_cell(results, "score")["eta"] == 0.01
    assert best_cell([{"v": 1, "i": 0}, {"v": 1, "i": 1}], "v")["i"] == 0, "ties keep the earliest cell"
    assert best_cell([], "v") is None


def _cell_task(cell, cell_dir):
    (cell_dir / "cell.json").write_text(json.dumps(cell))
    return {**cell, "score": cell["eta"] + cell["weight_decay"]}


def test_manager_rejects_unknown_command(tmp_path):
    manager = ExperimentManager(RunConfig({"run.out": str(tmp_path)}))
    with pytest.raises(ContractError):
        manager.execute("missing")


def test_solve_writes_outputs(tmp_path):
    out = tmp_path / "solve"
    assert _run("solve", out) == 0
    for name in ("config.snapshot", "metrics.jsonl", "problem.lqfp", "delta.lqfw", "weights.lqfw"):
        assert (out / name).exists(), f"missing {name}"
    summary = _summary(out)
    assert summary["command"] == "solve"
    assert 0.0 <= summary["test_error"] <= 1.0
    assert load_params(out / "weights.lqfw").size == load_params(out / "delta.lqfw").size


def test_runs_are_deterministic(tmp_path):
    """Test that the same seed and config reproduce metrics byte for byte."""
    for name in ("a", "b"):
        assert _run("train", tmp_path / name, "run.record_time=false") == 0
    first = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert first == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert b"wall_ms" not in first


def test_train_trajectory_table(tmp_path):
    out = tmp_path / "train"
    assert _run("train", out, "trainer.preconditioner=exact-inverse", "trainer.eta=1.0") == 0
    with open(out / "trajectory.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["step"] == "0"
    assert float(rows[-1]["loss"]) <= float(rows[0]["loss"]), "training lowers the loss"
    assert _summary(out)["steps"] >= 1


def test_influence_command(tmp_path):
    out = tmp_path / "influence"
    assert _run("influence", out) == 0
    with open(out / "influence.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert rows and all(float(r["fsi"]) >= 0 for r in rows)
    assert _summary(out)["method"] == "exact-hessian"


def test_verify_command(tmp_path):
    out = tmp_path / "verify"
    assert _run("verify", out, 'verify.checks=["closed-form-lstsq", "newton-step"]') == 0
    checks = [r for r in read_metrics(out / "metrics.jsonl") if r["event"] == "check"]
    assert [c["check"] for c in checks] == ["closed-form-lstsq", "newton-step"]
    assert all(c["passed"] for c in checks)


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_fsi_command(tmp_path):
    out = tmp_path / "fsi"
    assert _run("fsi", out) == 0
    rows = _rows(out / "fsi.csv")
    scores = [float(r["fsi"]) for r in rows]
    assert scores == sorted(scores, reverse=True), "rows are ranked by decreasing F-SI"
    summary = _summary(out)
    assert summary["samples"] == len(rows)
    assert summary["top_sample"] == int(rows[0]["sample_id"])


def test_summarize_command(tmp_path):
    out = tmp_path / "summarize"
    assert _run("summarize", out, *SETTINGS["summarize"]) == 0
    rows = _rows(out / "summarize.csv")
    assert {(r["k"], r["mode"]) for r in rows} >= {("0", "drop-top"), ("3", "drop-top"), ("3", "drop-bottom")}
    summary = _summary(out)
    assert summary["k"] == 3
    assert all(0.0 <= summary[key] <= 1.0 for key in ("baseline_error", "drop-top_error", "drop-bottom_error"))


def test_lambda_path_command(tmp_path):
    out = tmp_path / "lambda"
    assert _run("lambda-path", out, "trainer.max_epochs=200", "trainer.stop_tolerance=1e-10") == 0
    rows = _rows(out / "lambda_path.csv")
    assert [float(r["lambda"]) for r in rows] == [1e-2, 1e-3, 1e-4]
    assert [r["method"] for r in rows] == ["from-scratch", "warm-start", "warm-start"], "each point starts from the last"
    summary = _summary(out)
    assert summary["points"] == len(rows)
    assert summary["warm_iterations"] >= 1


def test_kshot_command(tmp_path):
    out = tmp_path / "kshot"
    assert _run("kshot", out, *SETTINGS["kshot"]) == 0
    rows = _rows(out / "kshot.csv")
    assert [r["k"] for r in rows] == ["1", "2"]
    for column in ("lqf_test_error", "nlft_test_error", "lqf_fc_test_error", "fc_test_error"):
        assert all(0.0 <= float(r[column]) <= 1.0 for r in rows), f"{column} is an error rate"
    assert _summary(out)["ks"] == [1, 2]
    assert (out / "k1" / "grid-0" / "metrics.jsonl").exists(), "every grid cell keeps its metrics"


def test_online_command(tmp_path):
    out = tmp_path / "online"
    assert _run("online", out, *SETTINGS["online"]) == 0
    rows = _rows(out / "online.csv")
    assert [int(r["increment"]) for r in rows] == [1, 2, 3, 4, 5]
    samples = [int(r["samples"]) for r in rows]
    assert samples == sorted(samples), "the running union only grows"
    assert all("nlft_test_error" in r for r in rows), "the nonlinear arm runs by default"
    summary = _summary(out)
    assert summary["increments"] == 5
    assert "final_nlft_test_error" in summary
    assert _run("online", tmp_path / "linear-only", *SETTINGS["online"], "online.nlft=false") == 0
    assert "final_nlft_test_error" not in _summary(tmp_path / "linear-only")


def test_spectrum_command(tmp_path):
    out = tmp_path / "spectrum"
    assert _run("spectrum", out) == 0
    rows = _rows(out / "spectrum.csv")
    hessian = [float(r["hessian"]) for r in rows]
    assert hessian == sorted(hessian, reverse=True), "eigenvalues in decreasing order"
    assert min(hessian) > 0, "weight decay makes H positive definite"
    summary = _summary(out)
    assert summary["condition_number"] >= 1.0
    assert summary["max_stable_lr_sgd"] > 0


def test_ablation_command(tmp_path):
    out = tmp_path / "ablation"
    assert _run("ablation", out, *SETTINGS["ablation"]) == 0
    rows = _rows(out / "ablation.csv")
    assert [r["variant"] for r in rows] == [
        "lqf", "lqf-ce", "lqf-no-kfac", "lqf-relu", "lqf-fc", "fc", "nlft", "nlft-mse",
    ]
    summary = _summary(out)
    assert summary["variants"] == 8
    assert all(0.0 <= summary[f"{r['variant']}_test_error"] <= 1.0 for r in rows)
    assert _run("ablation", tmp_path / "bad", 'ablation.variants=["lqf", "dropout"]') == 1


def test_elr_sweep_command(tmp_path):
    out = tmp_path / "elr"
    assert _run("elr-sweep", out, *SETTINGS["elr-sweep"]) == 0
    rows = _rows(out / "elr_sweep.csv")
    assert len(rows) == 2 * 3 * 2, "ELR values x momenta x batch sizes"
    for row in rows:
        elr = float(row["eta"]) / ((1.0 - float(row["momentum"])) * int(row["batch_size"]))
        assert abs(elr - float(row["elr"])) < 1e-12, "every cell runs at its row's ELR"
    summary = _summary(out)
    assert summary["cells"] == 12
    assert len(summary["spread_by_elr"]) == 2


@pytest.mark.parametrize("command", sorted(EXPECTED_COMMANDS))
def test_snapshot_reproduces_the_run(tmp_path, command):
    """Test that re-running from the written config snapshot reproduces metrics byte for byte."""
    first = tmp_path / "first"
    assert _run(command, first, "run.record_time=false", *SETTINGS.get(command, [])) == 0
    again = tmp_path / "again"
    assert main([command, "--config", str(first / "config.snapshot"), "--out", str(again), "--quiet"]) == 0
    assert (first / "metrics.jsonl").read_bytes() == (again / "metrics.jsonl").read_bytes()
    assert (first / "config.snapshot").read_text().replace(str(first), str(again)) == \
        (again / "config.snapshot").read_text(), "only the output directory differs"


@pytest.mark.parametrize("extra, code", [
    (["trainer.bogus=1"], 1),
    (['verify.checks=["no-such-check"]'], 1),
    (["data.source=csv"], 1),
    (["data.source=csv", "data.train_csv=/nonexistent/train.csv", "data.test_csv=/nonexistent/test.csv"], 3),
])
def test_exit_codes(tmp_path, extra, code):
    """Test the mapping of contract and storage failures to exit codes."""
    command = "verify" if any(e.startswith("verify.") for e in extra) else "solve"
    assert _run(command, tmp_path / "out", *extra) == code


def test_divergence_exit_code(tmp_path):
    out = tmp_path / "diverge"
    code = _run("train", out, "trainer.preconditioner=none", "trainer.eta=1000000.0", "trainer.max_epochs=50")
    assert code == 2, "numeric failures exit with 2"
    assert read_metrics(out / "metrics.jsonl")[-1]["event"] == "error"


def test_error_classes_carry_exit_codes():
    assert exit_code_for(ContractError("x")) == 1
    assert exit_code_for(DivergenceError(3, 1e9)) == 2
    assert exit_code_for(StorageError("f", "bad")) == 3
    assert exit_code_for(OSError("disk")) == 3
    assert issubclass(DivergenceError, LqfError)
