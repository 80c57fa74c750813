import glob
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from churnnet.cli import main
from churnnet.features import LabeledDataset, read_split_datasets, write_dataset_csv


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw, data = root / "raw", root / "data"
    assert run("synth", "--seed", 3, "--users", 300, "--days", 120, "--out", raw) == 0
    assert run("build", "--raw-dump", raw, "--out", data, "--seed", 0, "--workers", 2) == 0
    return root


def test_synth_outputs(built):
    raw = built / "raw"
    assert len(glob.glob(str(raw / "raw-dump-*.jsonl"))) == 120
    assert (raw / "ground_truth.csv").exists()
    manifest = json.loads((raw / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "synth"


def test_build_outputs(built):
    data = built / "data"
    # 120 days = 4 splits, so one dataset with a 2-split window and 1-split horizon
    assert sorted(os.listdir(data)) == ["manifest.json", "split_00_h1"]
    sd = read_split_datasets(data / "split_00_h1")
    assert sd.train.class_counts()[0] == sd.train.class_counts()[1]
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["inputs"]) == 120
    assert all(len(h) == 64 for h in manifest["inputs"].values())


def test_train_and_eval(built, capsys):
    split = built / "data" / "split_00_h1"
    out = built / "runs"
    assert run("train", "--data", split, "--out", out, "--variant", "simple", "--layers", 4,
               "--epochs", 5, "--seed", 1) == 0
    (run_dir,) = glob.glob(str(out / "train-*-seed1"))
    assert sorted(os.listdir(run_dir)) == ["manifest.json", "model.json", "train_log.csv"]
    capsys.readouterr()
    assert run("eval", "--model", os.path.join(run_dir, "model.json"), "--test", split / "test.csv") == 0
    assert "test error" in capsys.readouterr().out


def test_sweep(built):
    out = built / "sweeps"
    assert run("sweep", "--data", built / "data", "--out", out, "--lrs", "0.01", "--layers", "4",
               "--seeds", "0,1", "--epochs", 3) == 0
    (run_dir,) = glob.glob(str(out / "sweep-*"))
    lines = open(os.path.join(run_dir, "sweep.csv")).read().splitlines()
    assert len(lines) == 1 + 2 * 2  # variants x seeds
    assert os.path.exists(os.path.join(run_dir, "summary.csv"))


def test_config_file_and_flag_precedence(built, tmp_path):
    cfg = tmp_path / "sweep.conf"
    cfg.write_text("# test grid\nlrs = 0.01\nlayers = 4\nseeds = 0\nepochs = 2\nvariants = simple\n")
    out = tmp_path / "o"
    assert run("sweep", "--config", cfg, "--data", built / "data", "--out", out, "--variants", "proposed") == 0
    (run_dir,) = glob.glob(str(out / "sweep-*"))
    rows = open(os.path.join(run_dir, "sweep.csv")).read().splitlines()[1:]
    assert [r.split(",")[2] for r in rows] == ["proposed"]
    bad = tmp_path / "bad.conf"
    bad.write_text("colour = blue\n")
    assert run("sweep", "--config", bad, "--data", built / "data", "--out", out) == 1


@pytest.mark.parametrize("argv", [
    ["synth", "--out", "x"],  # --seed is required for synth
    ["build", "--out", "x"],
    ["sweep", "--data", "x", "--out", "y", "--lrs", "0"],
    ["train", "--out", "x", "--data", "y", "--keep-p", "0"],
    ["frobnicate"],
    ["sweep", "--layers", "four"],
])
def test_usage_errors(argv, tmp_path, capsys):
    assert run(*argv) == 1


def test_data_errors(tmp_path):
    assert run("build", "--raw-dump", tmp_path / "missing", "--out", tmp_path / "o") == 2
    assert run("eval", "--model", tmp_path / "none.json", "--test", tmp_path / "none.csv") == 2


def test_degenerate_split_exit_code(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    # everyone active every day: no churners, every split is degenerate
    with open(raw / "raw-dump.jsonl", "w") as fh:
        for day in range(120):
            for uid in range(1, 6):
                fh.write(json.dumps({"event": "login", "properties": {
                    "distinct_id": str(uid), "time": 1_500_000_000 + day * 86400}}) + "\n")
    assert run("build", "--raw-dump", raw, "--out", tmp_path / "o") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(np.arange(20), rng.random((20, 10)) * 1e300, np.arange(20) % 2)
    write_dataset_csv(tmp_path / "train.csv", ds)
    write_dataset_csv(tmp_path / "valid.csv", ds)
    assert run("train", "--data", tmp_path, "--out", tmp_path / "o", "--epochs", 2, "--lr", 1) == 3


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "churnnet.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "churnnet" in proc.stdout
