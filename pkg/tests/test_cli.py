import csv
import json
import os
import subprocess
import sys

import pytest

from tdplan.cli import main

TINY = {
    "env": {"name": "maze", "n_traj": 12, "seed": 0},
    "ar": {"context": 8, "n_layers": 1, "n_heads": 2, "embed_dim": 16, "steps": 4, "batch_size": 4},
    "diff": {"horizon": 8, "channels": [4, 8], "kernel": 3, "embed_dim": 8, "mlp_hidden": 8, "groups": 2,
             "K": 10, "steps": 4, "batch_size": 4},
    "inv": {"hidden": 8, "steps": 10, "batch_size": 16},
    "plan": {"improve_steps": 3},
    "eval": {"n_seeds": 2, "ref_episodes": 4},
    "bench": {"n_actions": 3, "n_full_actions": 2},
}
TINY_FREQ = {
    "env": {"name": "freq1d", "n_traj": 6},
    "ar": {"context": 8, "n_layers": 1, "n_heads": 2, "embed_dim": 16, "steps": 4, "batch_size": 4},
    "diff": TINY["diff"],
    "freq": {"n_test": 2, "improve_steps": 2},
}
PIPELINE = [["dataset", "gen"], ["train-ar"], ["train-diffusion"], ["train-invdyn"], ["eval"], ["bench-sps"],
            ["ablate", "--axis", "improve_steps", "--values", "0,2"]]


def write_config(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def run_pipeline(out, config, steps):
    for args in steps:
        assert main([*args, "--config", config, "--out", str(out)]) == 0, args


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.json", TINY)
    runs = [root / "a", root / "b"]
    for out in runs:
        run_pipeline(out, cfg, PIPELINE)
    return cfg, runs


def test_pipeline_outputs(pipeline, capsys):
    cfg, (out, _) = pipeline
    for name in ("dataset.jsonl", "ar.ckpt", "diffusion.ckpt", "invdyn.ckpt", "ar_loss.csv", "metrics.jsonl",
                 "timings.jsonl", "bench.jsonl", "ablate_improve_steps.csv"):
        assert (out / name).exists(), name
    metrics = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [m["label"] for m in metrics] == ["references", "TD", "TD(-)"]
    assert metrics[1]["nfe_per_action"] == 6 and metrics[2]["nfe_per_action"] == 0
    assert all("seconds_per_action" not in m for m in metrics)
    bench = json.loads((out / "bench.jsonl").read_text())
    assert bench["nfe_per_action_decomposed"] == 6 and bench["nfe_per_action_full"] == 20
    rows = list(csv.DictReader(open(out / "ablate_improve_steps.csv")))
    assert [float(r["value"]) for r in rows] == [0.0, 2.0]
    with open(out / "ar_loss.csv") as fh:
        assert next(csv.reader(fh)) == ["step", "loss"]


def test_reruns_are_byte_identical(pipeline):
    _, (a, b) = pipeline
    for name in ("dataset.jsonl", "ar.ckpt", "diffusion.ckpt", "invdyn.ckpt", "ar_loss.csv",
                 "diffusion_loss.csv", "invdyn_loss.csv", "metrics.jsonl", "ablate_improve_steps.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_dataset_inspect(pipeline, capsys):
    cfg, (out, _) = pipeline
    assert main(["dataset", "inspect", str(out / "dataset.jsonl")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_trajectories"] == 12


def test_seed_flag_changes_dataset(tmp_path, pipeline):
    cfg, (out, _) = pipeline
    assert main(["dataset", "gen", "--config", cfg, "--out", str(tmp_path), "--set", "env.seed=5"]) == 0
    assert (tmp_path / "dataset.jsonl").read_bytes() != (out / "dataset.jsonl").read_bytes()


def test_freq_demo(tmp_path):
    cfg = write_config(tmp_path / "freq.json", TINY_FREQ)
    run_pipeline(tmp_path, cfg, [["dataset", "gen"], ["train-ar"], ["train-diffusion"], ["freq-demo"]])
    summary = json.loads((tmp_path / "freq_summary.json").read_text())
    assert summary["n_test"] == 2 and len(summary["optimized_dominant_bins"]) == 2
    with open(tmp_path / "spectra.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin", "train_mean", "ar_plan", "optimized_plan"] and len(rows) == 1 + 8 // 2 + 1


def test_structured_errors(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "UsageError" and err["command"] == "eval" and "ar.ckpt" in err["message"]
    assert main(["train-ar", "--out", str(tmp_path), "--set", "plan.nope=1"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    assert main(["freq-demo", "--out", str(tmp_path)]) == 2  # maze config
    with pytest.raises(SystemExit):
        main(["ablate", "--axis", "colour", "--values", "1"])


def test_module_entry_point(tmp_path):
    env = {**os.environ, "TDPLAN_NUMBA": "0"}
    proc = subprocess.run([sys.executable, "-m", "tdplan", "train-ar", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2 and json.loads(proc.stderr)["command"] == "train-ar"
    proc = subprocess.run([sys.executable, "-m", "tdplan", "--help"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "bench-sps" in proc.stdout


def test_thread_count_does_not_change_metrics(pipeline, tmp_path, monkeypatch):
    cfg, (out, _) = pipeline
    for name in ("ar.ckpt", "diffusion.ckpt", "invdyn.ckpt"):
        (tmp_path / name).write_bytes((out / name).read_bytes())
    monkeypatch.setenv("TRAJ_PLANNER_THREADS", "3")
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.jsonl").read_bytes() == (out / "metrics.jsonl").read_bytes()
    monkeypatch.setenv("TRAJ_PLANNER_THREADS", "many")
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) == 2
