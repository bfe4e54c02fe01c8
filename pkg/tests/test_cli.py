import csv
import json

import numpy as np
import pytest

from gsdtta import nn
from gsdtta.cli import main, read_run_config

SMALL = ["--set", "m_band=20", "--set", "eigenmap_dim=8", "--batch-size", "4"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert run("make-dataset", "--out", ds, "--classes", "sphere,plane", "--train-per-class", "10",
               "--test-per-class", "4", "--points", "96", "--seed", "1") == 0
    assert run("train-source", "--manifest", ds / "manifest.json", "--out", root / "src", "--epochs", "2",
               "--lr", "3e-3", "--batch-size", "1", "--gate", "0") == 0
    kinds = "uniform,gaussian,background,rotation,cutout"
    assert run("corrupt", "--manifest", ds / "manifest.json", "--out", root / "c", "--kinds", kinds) == 0
    return root


def test_make_dataset_outputs(data):
    doc = json.loads((data / "ds" / "manifest.json").read_text())
    splits = [e["split"] for e in doc["entries"]]
    assert splits.count("train") == 20 and splits.count("test") == 8
    assert doc["meta"]["classes"] == ["sphere", "plane"]
    assert {e["label"] for e in doc["entries"]} == {0, 5}
    run_doc = json.loads((data / "ds" / "run.json").read_text())
    assert run_doc["version"].startswith("v0.1.0") and run_doc["command"] == "make-dataset"


def test_make_dataset_deterministic_and_force(data, tmp_path):
    args = ["make-dataset", "--classes", "sphere,plane", "--train-per-class", "10", "--test-per-class", "4",
            "--points", "96", "--seed", "1"]
    assert run(*args, "--out", tmp_path / "again") == 0
    for name in ("manifest.json", "train/train_00003.xyz", "test/test_00007.xyz"):
        assert (tmp_path / "again" / name).read_bytes() == (data / "ds" / name).read_bytes()
    assert run(*args, "--out", tmp_path / "again") == 4
    assert run(*args, "--out", tmp_path / "again", "--force") == 0


def test_make_dataset_default_counts(tmp_path):
    assert run("make-dataset", "--out", tmp_path / "d", "--points", "64") == 0
    doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
    splits = [e["split"] for e in doc["entries"]]
    assert (splits.count("train"), splits.count("test")) == (1600, 400)


def test_train_outputs(data):
    assert (data / "src" / "model.ckpt").exists()
    rows = list(csv.DictReader(open(data / "src" / "train_log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"] and "test_acc" in rows[0]


def test_train_zero_epochs(data, tmp_path, capsys):
    code = run("train-source", "--manifest", data / "ds" / "manifest.json", "--out", tmp_path / "x", "--epochs", "0")
    assert code == 2 and "no training performed" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_train_gate_failure(data, tmp_path, capsys):
    code = run("train-source", "--manifest", data / "ds" / "manifest.json", "--out", tmp_path / "g",
               "--epochs", "1", "--gate", "1.01")
    err = capsys.readouterr().err
    assert code == 3 and "clean test accuracy" in err and "below the gate 1.01" in err


def test_missing_manifest(tmp_path):
    assert run("train-source", "--manifest", tmp_path / "nope.json", "--out", tmp_path / "o") == 4


def test_corrupt_manifest(data):
    doc = json.loads((data / "c" / "manifest.json").read_text())
    kinds = [e["corruption"] for e in doc["entries"]]
    assert len(kinds) == 40 and kinds[:8] == ["uniform"] * 8
    assert all(e["severity"] > 0 for e in doc["entries"])


def test_adapt_noop_end_to_end(data, tmp_path):
    code = run("adapt", "--checkpoint", data / "src" / "model.ckpt", "--manifest", data / "c" / "manifest.json",
               "--out", tmp_path / "a", "--no-gsdps", "--no-gsgma", *SMALL)
    assert code == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    for row in rep["accuracy"].values():
        assert row["adapted"] == row["source"]
    assert rep["config"]["enable_gsdps"] is False and rep["seed"] == 0


def test_adapt_reports(data, tmp_path):
    args = ["adapt", "--checkpoint", data / "src" / "model.ckpt", "--manifest", data / "c" / "manifest.json", *SMALL]
    assert run("--threads", "1", *args, "--out", tmp_path / "a") == 0
    assert run("--threads", "3", *args, "--out", tmp_path / "b") == 0
    for name in ("report.json", "diagnostics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "diagnostics.csv")))
    assert rows[0].keys() >= {"step", "L_pl", "L_ent", "L_div", "L_cd", "agreement"}
    assert len(rows) == 10 * 10  # 10 batches of 4, 10 steps each


def test_eval_table(data, tmp_path, capsys):
    code = run("eval", "--checkpoint", data / "src" / "model.ckpt", "--manifest", data / "c" / "manifest.json",
               "--out", tmp_path / "e", "--ablation", *SMALL)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "e" / "accuracy.csv")))
    assert rows[0] == ["corruption", "n", "source_only", "adapted"]
    assert [r[0] for r in rows[1:]] == ["uniform", "gaussian", "background", "rotation", "cutout", "mean"]
    md = (tmp_path / "e" / "accuracy.md").read_text().splitlines()
    assert len(md) == 2 + 6
    abl = list(csv.reader(open(tmp_path / "e" / "ablation.csv")))
    assert [r[0] for r in abl[1:]] == ["source-only", "GSGMA-only", "GSDPS-only", "deep-feature-guided", "full"]
    assert "| mean |" in capsys.readouterr().out


def test_unknown_config_key(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("alpha = 0.5\nbeta4 = 1\n")
    code = run("adapt", "--checkpoint", data / "src" / "model.ckpt", "--manifest", data / "c" / "manifest.json",
               "--out", tmp_path / "a", "--config", cfg)
    assert code == 2 and not (tmp_path / "a").exists()


def test_config_formats(tmp_path):
    a = tmp_path / "a.cfg"
    a.write_text("# comment\nalpha = 0.4\nm_band=50\n")
    b = tmp_path / "b.json"
    b.write_text('{"alpha": 0.4, "m_band": 50}')
    assert read_run_config(a) == {"alpha": "0.4", "m_band": "50"}
    assert read_run_config(b) == {"alpha": 0.4, "m_band": 50}


def test_numeric_failure_cleans_up(data, tmp_path):
    state = nn.load_checkpoint(data / "src" / "model.ckpt")
    state.params["w1"][:] = np.inf
    nn.save_checkpoint(state, tmp_path / "bad.ckpt")
    code = run("adapt", "--checkpoint", tmp_path / "bad.ckpt", "--manifest", data / "c" / "manifest.json",
               "--out", tmp_path / "a", *SMALL)
    assert code == 5 and not (tmp_path / "a").exists()


def test_bad_xyz_is_io_error(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 0 0\n0 1 x\n0 0 1\n")
    assert run("spectrum", p, "--out", tmp_path / "s") == 4
    assert not (tmp_path / "s").exists()


def test_usage_error():
    assert run("adapt") == 2
    assert run("frobnicate") == 2


def test_spectrum_chair(tmp_path, capsys):
    assert run("spectrum", "--shape", "chair", "--out", tmp_path / "s") == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    frac = float(line.rsplit("=", 1)[1])
    assert "lowest 100 components" in line and frac >= 0.90
    rows = list(csv.reader(open(tmp_path / "s" / "chair_spectrum.csv")))
    assert rows[0] == ["index", "eigenvalue", "energy_x", "energy_y", "energy_z", "cumulative"]
    assert len(rows) == 1001 and float(rows[-1][-1]) == 1.0


def test_threads_env(monkeypatch):
    from gsdtta.cli import default_threads

    monkeypatch.setenv("GSDTTA_THREADS", "3")
    assert default_threads() == 3


def test_corrupt_checkpoint_is_io_error(data, tmp_path):
    bad = tmp_path / "junk.ckpt"
    bad.write_text("junk\n")
    code = run("adapt", "--checkpoint", bad, "--manifest", data / "c" / "manifest.json", "--out", tmp_path / "a")
    assert code == 4 and not (tmp_path / "a").exists()
    broken = tmp_path / "m.json"
    broken.write_text("{not json")
    assert run("adapt", "--checkpoint", data / "src" / "model.ckpt", "--manifest", broken, "--out", tmp_path / "b") == 4
