from __future__ import annotations

import hashlib
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fluencelab.cli import main
from fluencelab.data import Dataset, read_kv, read_pgm
from fluencelab.metrics import METRIC_COLUMNS, SUMMARY_COLUMNS, read_csv

SMALL = """\
phantom.shape = 4, 32, 32
phantom.body_axes = 10.0, 14.0
phantom.ptv_axes = 3.0, 5.0
phantom.ptv_offset = 2.0
phantom.oar_axes = 2.0, 4.0
phantom.n_beams = 3
backbone.kind = conv_unet_s
backbone.features = 4
backbone.levels = 1
"""
FAST = SMALL + "train.epochs = 2\ntrain.lr = 0.001\ntrain.batch_size = 4\n"


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.txt").write_text(SMALL)
    (root / "fast.txt").write_text(FAST)
    assert main(["gen", "--config", str(root / "small.txt"), "--out", str(root / "data"), "--cases", "6"]) == 0
    assert main(["train", "--stage", "1", "--config", str(root / "fast.txt"), "--data", str(root / "data"),
                 "--out", str(root / "s1")]) == 0
    assert main(["train", "--stage", "2", "--config", str(root / "fast.txt"), "--data", str(root / "data"),
                 "--out", str(root / "s2"), "--stage1-ckpt", str(root / "s1")]) == 0
    return root


def test_gen_is_deterministic(tmp_path):
    cfg = tmp_path / "small.txt"
    cfg.write_text(SMALL)
    for name in ("a", "b"):
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / name), "--cases", "4", "--seed", "1"]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert read_kv(tmp_path / "a" / "config.txt")["phantom.seed"] == "1"


def test_gen_rejects_zero_cases(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "d"), "--cases", "0"]) == 1
    assert not (tmp_path / "d").exists()
    assert "--cases" in capsys.readouterr().err


def test_gen_default_split_sizes(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "d"), "--cases", "16", "--seed", "7"]) == 0
    ds = Dataset(tmp_path / "d")
    assert len(ds.manifest.splits) == 16
    assert [len(ds.manifest.ids(s)) for s in ("train", "val", "test")] == [12, 1, 3]
    assert len([p for p in (tmp_path / "d").iterdir() if p.is_dir()]) == 16


def test_refuses_non_empty_output(tmp_path):
    out = tmp_path / "d"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["gen", "--out", str(out), "--cases", "1"]) == 1
    assert (out / "keep.txt").exists()
    assert main(["gen", "--out", str(out), "--cases", "1", "--force"]) == 0
    assert not (out / "keep.txt").exists()


def test_stage2_needs_checkpoint(workspace, capsys):
    code = main(["train", "--stage", "2", "--data", str(workspace / "data"), "--out", str(workspace / "x")])
    assert code == 1
    assert "--stage1-ckpt" in capsys.readouterr().err


def test_default_training_echo(workspace, tmp_path):
    # only geometry and backbone are overridden; the optimiser settings stay at their defaults
    assert main(["train", "--stage", "1", "--config", str(workspace / "small.txt"),
                 "--data", str(workspace / "data"), "--out", str(tmp_path / "run")]) == 0
    manifest = read_kv(tmp_path / "run" / "manifest.txt")
    assert (manifest["lr"], manifest["batch_size"], manifest["epochs"]) == ("0.0001", "16", "50")
    assert len((tmp_path / "run" / "log.csv").read_text().splitlines()) == 1 + 50


def test_train_deterministic_run_hash(workspace, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--stage", "2", "--config", str(workspace / "fast.txt"), "--deterministic",
                     "--data", str(workspace / "data"), "--out", str(tmp_path / name),
                     "--stage1-ckpt", str(workspace / "s1")]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert tree_hash(tmp_path / "a" / "checkpoint") == tree_hash(workspace / "s2" / "checkpoint")


def test_eval_ground_truth(workspace, tmp_path):
    out = tmp_path / "gt.csv"
    assert main(["eval", "--ground-truth", "--data", str(workspace / "data"), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows and tuple(rows[0]) == METRIC_COLUMNS
    for r in rows:
        assert float(r["mae"]) == 0.0 and float(r["energy_err_pct"]) == 0.0
        assert r["psnr_db"] == "inf" and float(r["ssim"]) == 1.0
    summary = read_csv(tmp_path / "gt_summary.csv")
    assert tuple(summary[0]) == SUMMARY_COLUMNS


def test_eval_model_and_images(workspace, tmp_path):
    out = tmp_path / "m.csv"
    images = tmp_path / "img"
    assert main(["eval", "--stage1-ckpt", str(workspace / "s1"), "--stage2-ckpt", str(workspace / "s2"),
                 "--data", str(workspace / "data"), "--out", str(out), "--dump-images", str(images)]) == 0
    rows = read_csv(out)
    ds = Dataset(workspace / "data")
    test_ids = ds.manifest.ids("test")
    assert [r["case_id"] for r in rows] == list(test_ids)
    assert all(math.isfinite(float(r["mae"])) for r in rows)
    case = ds.case(test_ids[0])
    value_range = ds.manifest.value_range
    for b in range(case.n_beams):
        back = read_pgm(images / f"{case.case_id}_beam{b}_target.pgm", value_range)
        expected = np.clip(case.fluence[b], 0, value_range)
        assert np.max(np.abs(back - expected)) <= 0.5 * value_range / 65535 + 1e-9
        assert (images / f"{case.case_id}_beam{b}_pred.pgm").is_file()
    assert main(["eval", "--stage1-ckpt", str(workspace / "s1"), "--stage2-ckpt", str(workspace / "s2"),
                 "--data", str(workspace / "data"), "--out", str(out)]) == 1


def test_eval_needs_checkpoints(workspace, tmp_path):
    assert main(["eval", "--data", str(workspace / "data"), "--out", str(tmp_path / "m.csv")]) == 1


def test_ablate(workspace, tmp_path, capsys):
    assert main(["ablate", "--data", str(workspace / "data"), "--variants", "far", "--seeds", "1",
                 "--config", str(workspace / "fast.txt"), "--out", str(tmp_path / "one")]) == 0
    table = read_csv(tmp_path / "one" / "table.csv")
    assert len(table) == 1 and table[0]["variant"] == "far"
    assert main(["ablate", "--data", str(workspace / "data"), "--variants", "mse,far:G/B", "--seeds", "1",
                 "--config", str(workspace / "fast.txt"), "--out", str(tmp_path / "two")]) == 0
    echo = read_kv(tmp_path / "two" / "seed1" / "far_GB" / "config.txt")
    assert (echo["scope.corr"], echo["scope.energy"]) == ("global", "beamwise")
    sig = read_csv(tmp_path / "two" / "significance.csv")
    assert {(r["run_a"], r["run_b"]) for r in sig} == {("mse", "far:G/B")}
    capsys.readouterr()
    assert main(["ablate", "--data", str(workspace / "data"), "--variants", "far:X/Y", "--seeds", "1",
                 "--out", str(tmp_path / "bad")]) == 1
    err = capsys.readouterr().err
    assert "far:X/Y" in err and "mse+energy" in err and "G/B" in err


@pytest.mark.parametrize("component", ["mse", "grad", "corr", "energy", "far"])
def test_gradcheck_passes(component, capsys):
    assert main(["gradcheck", "--component", component, "--seed", "3"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_detects_fault(capsys):
    assert main(["gradcheck", "--component", "far", "--inject-fault"]) == 2
    out = capsys.readouterr().out
    assert "FAIL" in out and "at index (" in out


def test_exit_codes(tmp_path):
    assert main(["train", "--stage", "1", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("train.nonsense = 1\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "d"), "--cases", "2"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--stage", "3", "--data", "x", "--out", "y"])
    assert exc.value.code == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fluencelab.cli", "gradcheck", "--component", "mse"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "PASS" in proc.stdout
