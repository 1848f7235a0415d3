import json
import subprocess
import sys

import numpy as np
import pytest

from rvslab.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from rvslab.evaluation import read_eval_summary
from rvslab import nn_core
from rvslab.trajectory_data import load_dataset

TRAIN_FLAGS = ["--width", "16", "--batch-size", "16", "--steps", "20", "--eval-every", "10"]


@pytest.fixture(scope="module")
def fr_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["--workdir", str(base), "collect", "--env", "four_rooms", "--collector", "random",
                 "--steps", "1000", "--out", "data"]) == EXIT_OK
    assert main(["--workdir", str(base), "train", "--dataset", "data/dataset.rvsd", "--out", "run",
                 *TRAIN_FLAGS]) == EXIT_OK
    return base


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_collect_writes_dataset_and_manifest(fr_dir):
    ds = load_dataset(fr_dir / "data" / "dataset.rvsd")
    assert ds.num_transitions >= 1000
    m = _manifest(fr_dir / "data")
    assert m["command"] == "collect" and m["seeds"] == {"seed": 0}
    assert "dataset.rvsd" in m["outputs"]


def test_collect_jsonl_and_scripted_mix(tmp_path, capsys):
    code = main(["--workdir", str(tmp_path), "collect", "--env", "two_mode_line", "--collector", "medium,expert",
                 "--episodes", "5", "--noise", "0.1", "--format", "jsonl", "--out", "d"])
    assert code == EXIT_OK
    assert len(load_dataset(tmp_path / "d" / "dataset.jsonl")) == 10
    assert "10 trajectories" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["collect", "--env", "nope", "--collector", "random", "--steps", "10", "--out", "x"],
    ["collect", "--env", "four_rooms", "--collector", "expert", "--episodes", "1", "--out", "x"],
    ["collect", "--env", "four_rooms", "--collector", "random", "--out", "x"],
    ["train", "--dataset", "missing.rvsd", "--out", "x"],
    ["eval", "--checkpoint", "missing.rvsc", "--out", "x"],
    ["train", "--dataset", "data/dataset.rvsd", "--out", "x", "--dropout", "1.5"],
    ["eval", "--checkpoint", "run/checkpoint.rvsc", "--out", "x", "--workers", "0"],
    ["interpolate", "--checkpoint", "run/checkpoint.rvsc", "--targets", "0:1:1", "--out", "x"],
    ["report", "--inputs", "data", "--out", "x"],
    ["bogus"],
])
def test_usage_errors_exit_2(fr_dir, argv):
    assert main(["--workdir", str(fr_dir), *argv]) == EXIT_USAGE


def test_corrupt_input_is_io_error(fr_dir, tmp_path):
    bad = tmp_path / "bad.rvsc"
    bad.write_bytes(b"RVSC garbage")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_train_outputs_and_override_recorded(fr_dir, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[model]\nhidden_width = 64\ndropout_p = 0.0\n")
    out = tmp_path / "t"
    assert main(["--workdir", str(fr_dir), "train", "--dataset", "data/dataset.rvsd", "--config", str(cfg),
                 "--width", "16", "--steps", "10", "--batch-size", "8", "--seed", "3", "--out", str(out)]) == EXIT_OK
    m = _manifest(out)
    assert m["config"]["hidden_width"] == 16 and m["config"]["dropout_p"] == 0.0 and m["config"]["seed"] == 3
    assert set(m["inputs"]) == {"dataset", "config"}
    assert all(len(v["sha256"]) == 64 for v in m["inputs"].values())
    assert {"checkpoint.rvsc", "metrics.csv", "metrics.png"} <= set(m["outputs"])
    for key in ("argv", "workdir", "wall_clock_seconds", "tool_version", "python", "numpy"):
        assert key in m


def test_train_rerun_is_byte_identical(fr_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["--workdir", str(fr_dir), "train", "--dataset", "data/dataset.rvsd", "--out", str(out),
                 *TRAIN_FLAGS]) == EXIT_OK
    for name in ("checkpoint.rvsc", "metrics.csv"):
        assert (out / name).read_bytes() == (fr_dir / "run" / name).read_bytes()


def test_train_resume_matches_uninterrupted(fr_dir, tmp_path):
    w = ["--workdir", str(fr_dir), "train", "--dataset", "data/dataset.rvsd"]
    short = [f if f != "20" else "10" for f in TRAIN_FLAGS]
    assert main([*w, "--out", str(tmp_path / "a"), *short]) == EXIT_OK
    assert main([*w, "--out", str(tmp_path / "b"), "--resume", str(tmp_path / "a" / "checkpoint.rvsc"),
                 *TRAIN_FLAGS]) == EXIT_OK
    assert (tmp_path / "b" / "checkpoint.rvsc").read_bytes() == (fr_dir / "run" / "checkpoint.rvsc").read_bytes()
    assert (tmp_path / "b" / "metrics.csv").read_bytes() == (fr_dir / "run" / "metrics.csv").read_bytes()


def test_train_non_finite_exits_4(fr_dir, tmp_path, monkeypatch):
    real = nn_core.loss_and_grad

    def nan_loss(*args, **kwargs):
        loss, grads = real(*args, **kwargs)
        return float("nan"), grads

    monkeypatch.setattr(nn_core, "loss_and_grad", nan_loss)
    out = tmp_path / "nan"
    assert main(["--workdir", str(fr_dir), "train", "--dataset", "data/dataset.rvsd", "--out", str(out),
                 *TRAIN_FLAGS]) == EXIT_NUMERIC
    assert (out / "checkpoint.rvsc").exists()


def test_eval_csv_naming_and_determinism(fr_dir, tmp_path):
    w = ["--workdir", str(fr_dir), "eval", "--checkpoint", "run/checkpoint.rvsc", "--n", "20"]
    assert main([*w, "--out", str(tmp_path)]) == EXIT_OK
    assert main([*w, "--out", str(tmp_path)]) == EXIT_OK
    files = sorted(tmp_path.glob("four_rooms_eval_*.csv"))
    assert len(files) == 2 and files[0].name != files[1].name
    assert files[0].read_bytes() == files[1].read_bytes()
    assert read_eval_summary(files[0].read_text())["n_rollouts"] == 20


def test_report_aggregates_across_runs(fr_dir, tmp_path):
    evals = tmp_path / "evals"
    for seed in ("0", "1", "2"):
        assert main(["--workdir", str(fr_dir), "eval", "--checkpoint", "run/checkpoint.rvsc", "--n", "20",
                     "--seed", seed, "--out", str(evals)]) == EXIT_OK
    summaries = [read_eval_summary(f.read_text()) for f in sorted(evals.glob("*_eval_*.csv"))]
    out = tmp_path / "report"
    assert main(["report", "--inputs", str(evals), str(fr_dir / "run"), "--out", str(out)]) == EXIT_OK
    report = next(out.glob("suite_report_*.csv"))
    assert report.with_suffix(".png").exists()
    header, row = report.read_text().splitlines()[:2]
    values = dict(zip(header.split(","), row.split(",")))
    assert values["env_id"] == "four_rooms" and values["n_runs"] == "3"
    for m in ("success_rate", "mean_return", "normalized_score"):
        vals = np.array([s[m] for s in summaries])
        assert float(values[f"{m}_mean"]) == float(vals.mean())
        assert float(values[f"{m}_std"]) == float(vals.std())
    assert any(p.name.endswith("metrics.png") for p in out.glob("*.png"))


def test_interpolate_eleven_targets(tmp_path):
    w = ["--workdir", str(tmp_path)]
    assert main([*w, "collect", "--env", "two_mode_line", "--collector", "medium,expert", "--episodes", "10",
                 "--noise", "0.1", "--out", "d"]) == EXIT_OK
    assert main([*w, "train", "--dataset", "d/dataset.rvsd", "--outcome", "avg_return", "--head", "gaussian",
                 "--out", "r", *TRAIN_FLAGS]) == EXIT_OK
    assert main([*w, "interpolate", "--checkpoint", "r/checkpoint.rvsc", "--targets", "0:50:5",
                 "--n-per-target", "2", "--out", "i"]) == EXIT_OK
    csv_path = next((tmp_path / "i").glob("two_mode_line_interpolate_*.csv"))
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "target,condition,mean_return,std_return,normalized_score,n"
    assert len(lines) == 12
    assert csv_path.with_suffix(".png").exists()


def test_sweep_command(fr_dir, tmp_path):
    assert main(["--workdir", str(fr_dir), "sweep", "--dataset", "data/dataset.rvsd", "--widths", "8,16",
                 "--dropouts", "0,0.1", "--steps", "5", "--batch-size", "8", "--n-eval", "3",
                 "--out", str(tmp_path)]) == EXIT_OK
    csv_path = next(tmp_path.glob("four_rooms_sweep_*.csv"))
    assert len(csv_path.read_text().splitlines()) == 5
    assert csv_path.with_suffix(".png").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rvslab.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
    proc = subprocess.run([sys.executable, "-m", "rvslab.cli", "eval", "--checkpoint", str(tmp_path / "no"),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "not found" in proc.stderr
