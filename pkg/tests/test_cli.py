import json
import subprocess
import sys
import time

import numpy as np
import pytest

from seamgs.calib import DualFisheyeCalib, save_calib
from seamgs.cli import RunConfig, ConfigError, main, resolve_workers
from seamgs.imageio import read_pfm, write_pfm
from seamgs.optim import read_history
from seamgs.synth import load_dataset

SMALL = ["--width", "64", "--height", "32", "--n-splats", "150", "--n-views", "6", "--workers", "1"]


@pytest.fixture(scope="module")
def ds_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["generate", "--out", str(d), "--seed", "5", *SMALL]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(ds_dir):
    r = ds_dir.parent / "run"
    assert main(["train", "--dataset", str(ds_dir), "--out", str(r), "--iterations", "30",
                 "--snapshot-every", "10", "--workers", "1"]) == 0
    return r


# config

def test_config_rejects_unknown_keys_and_validates():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"iterations": 0})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mode": "fisheye"})
    cfg = RunConfig.from_dict({"iterations": 5, "lambda_tv": 0.5, "seed": 9})
    assert cfg.train.iterations == 5 and cfg.train.seed == 9
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_flags_override_config_file(tmp_path, ds_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iterations": 2, "snapshot_every": 1, "lambda_tv": 3.0}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--dataset", str(ds_dir), "--out", str(out),
                 "--iterations", "3", "--workers", "1"]) == 0
    rec = json.loads((out / "config.json").read_text())
    assert rec["iterations"] == 3 and rec["lambda_tv"] == 3.0
    assert len(read_history(out / "history.csv")) == 3


def test_workers_resolution(monkeypatch):
    monkeypatch.delenv("SEAMGS_WORKERS", raising=False)
    assert resolve_workers(3) == 3
    assert resolve_workers(None) >= 1
    monkeypatch.setenv("SEAMGS_WORKERS", "2")
    assert resolve_workers(5) == 2
    monkeypatch.setenv("SEAMGS_WORKERS", "many")
    with pytest.raises(ConfigError):
        resolve_workers(1)


# exit codes

def test_exit_codes(tmp_path, ds_dir, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text('{"colour": 1}')
    assert main(["train", "--config", str(bad), "--dataset", str(ds_dir), "--out", str(tmp_path / "r")]) == 2
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert main(["train", "--dataset", str(ds_dir), "--out", str(tmp_path / "r"), "--iterations", "0"]) == 2
    assert main(["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 3
    monkeypatch.setenv("SEAMGS_WORKERS", "0")
    assert main(["inspect", "--calib", str(tmp_path / "x.json")]) == 2


def test_corrupt_dataset_is_a_data_error(tmp_path, ds_dir):
    import shutil
    d = tmp_path / "ds"
    shutil.copytree(ds_dir, d)
    (d / "views" / "002.pfm").write_bytes(b"PF\n64 32\n-1.0\n" + b"\0" * 10)
    assert main(["train", "--dataset", str(d), "--out", str(tmp_path / "r"), "--iterations", "2"]) == 3


def test_non_finite_loss_exits_4_with_snapshot(tmp_path, ds_dir):
    import shutil
    d = tmp_path / "ds"
    shutil.copytree(ds_dir, d)
    img = read_pfm(d / "views" / "000.pfm")
    img[0, 0, 0] = np.nan
    write_pfm(d / "views" / "000.pfm", img)
    out = tmp_path / "r"
    assert main(["train", "--dataset", str(d), "--out", str(out), "--iterations", "5"]) == 4
    info = json.loads((out / "abort" / "info.json").read_text())
    assert info["view"] == 0 and (out / "abort" / "calib.json").exists()


# generate

def test_generate_default_has_50_views(tmp_path):
    d = tmp_path / "ds"
    assert main(["generate", "--out", str(d), "--width", "32", "--height", "16", "--n-splats", "60",
                 "--workers", "1"]) == 0
    ds = load_dataset(d)
    assert len(ds) == 50 and len(ds.split["train"]) == 25 and len(ds.split["test"]) == 25


def test_generate_seed_reproducible(tmp_path, ds_dir):
    d = tmp_path / "again"
    assert main(["generate", "--out", str(d), "--seed", "5", *SMALL]) == 0
    for name in ("views/000.pfm", "views/005.pfm", "gt_calib.json", "poses.json"):
        assert (d / name).read_bytes() == (ds_dir / name).read_bytes()
    other = tmp_path / "other"
    assert main(["generate", "--out", str(other), "--seed", "6", *SMALL]) == 0
    assert (other / "views/000.pfm").read_bytes() != (ds_dir / "views/000.pfm").read_bytes()


def test_generate_without_artifacts(tmp_path):
    d = tmp_path / "ds"
    assert main(["generate", "--out", str(d), "--gap", "0", *SMALL]) == 0
    ds = load_dataset(d)
    assert not np.any(ds.gt_calib.dt_front) and not np.any(ds.gt_calib.dt_back)
    d2 = tmp_path / "ds2"
    assert main(["generate", "--out", str(d2), "--gap", "0", "--lens", "0", *SMALL]) == 0
    ds = load_dataset(d2)
    for a, b in zip(ds.images, ds.clean):
        np.testing.assert_array_equal(a, b)


def test_generate_threads_do_not_change_output(tmp_path, ds_dir):
    d = tmp_path / "t2"
    args = [a if a != "1" else "2" for a in SMALL]  # --workers 2
    assert main(["generate", "--out", str(d), "--seed", "5", *args]) == 0
    assert (d / "views/003.pfm").read_bytes() == (ds_dir / "views/003.pfm").read_bytes()


# train

def test_train_outputs(run_dir):
    for name in ("scene.sgs", "calib.json", "history.csv", "config.json", "latest.json"):
        assert (run_dir / name).exists()
    hist = read_history(run_dir / "history.csv")
    assert [r["iteration"] for r in hist] == [10, 20, 30]


def test_train_smoke_speed(tmp_path):
    d = tmp_path / "ds"
    assert main(["generate", "--out", str(d), "--n-splats", "200", "--n-views", "8", "--workers", "1"]) == 0
    t = time.perf_counter()
    assert main(["train", "--dataset", str(d), "--out", str(tmp_path / "r"), "--iterations", "100",
                 "--workers", "1"]) == 0
    assert time.perf_counter() - t < 60


def test_ablation_flags_freeze_groups(tmp_path, ds_dir):
    a = tmp_path / "nogap"
    assert main(["train", "--dataset", str(ds_dir), "--out", str(a), "--iterations", "10", "--no-gap"]) == 0
    b = tmp_path / "nolens"
    assert main(["train", "--dataset", str(ds_dir), "--out", str(b), "--iterations", "10", "--no-lens"]) == 0
    from seamgs.calib import load_calib
    ca, cb = load_calib(a / "calib.json"), load_calib(b / "calib.json")
    assert not np.any(ca.dt_front) and ca.grid_rms() > 0
    assert cb.grid_rms() == 0 and np.any(cb.dt_back)


def test_resume_reproduces_uninterrupted_run(tmp_path, ds_dir, run_dir):
    r = tmp_path / "resumed"
    base = ["train", "--dataset", str(ds_dir), "--out", str(r), "--iterations", "30",
            "--snapshot-every", "10", "--workers", "1"]
    assert main(base + ["--stop-at", "15"]) == 0
    assert not (r / "history.csv").exists()
    assert json.loads((r / "latest.json").read_text())["step"] == 15
    assert main(base) == 0
    full = read_history(run_dir / "history.csv")
    again = read_history(r / "history.csv")
    assert [h["iteration"] for h in again] == [10, 20, 30]
    for a, b in zip(full, again):
        assert abs(a["loss"] - b["loss"]) <= 1e-6
    assert again == full
    assert (r / "calib.json").read_bytes() == (run_dir / "calib.json").read_bytes()


def test_resume_refuses_changed_config(tmp_path, ds_dir):
    r = tmp_path / "r"
    assert main(["train", "--dataset", str(ds_dir), "--out", str(r), "--iterations", "4", "--stop-at", "2"]) == 0
    assert main(["train", "--dataset", str(ds_dir), "--out", str(r), "--iterations", "4",
                 "--lambda-tv", "5"]) == 2
    assert main(["train", "--dataset", str(ds_dir), "--out", str(r), "--iterations", "4",
                 "--lambda-tv", "5", "--fresh"]) == 0


# render / eval / inspect

def test_render_modes(tmp_path, ds_dir, run_dir):
    a, b, c = (str(tmp_path / n) for n in ("ideal", "stitched", "again"))
    assert main(["render", "--run", str(run_dir), "--dataset", str(ds_dir), "--view", "1",
                 "--mode", "ideal", "--out", a]) == 0
    assert main(["render", "--run", str(run_dir), "--dataset", str(ds_dir), "--view", "1",
                 "--mode", "stitched", "--out", b]) == 0
    assert main(["render", "--run", str(run_dir), "--dataset", str(ds_dir), "--view", "1",
                 "--mode", "ideal", "--out", c]) == 0
    assert (tmp_path / "ideal.png").exists()
    ia, ib = read_pfm(a + ".pfm"), read_pfm(b + ".pfm")
    assert ia.shape == (32, 64, 3)
    assert (tmp_path / "ideal.pfm").read_bytes() == (tmp_path / "again.pfm").read_bytes()
    # the calibration is nonzero: stitched and ideal disagree near the seams
    seam = np.abs(ia - ib)[:, [14, 15, 16, 17, 46, 47, 48, 49]].mean()
    assert seam > 1e-4


def test_render_ground_truth_pair(tmp_path, ds_dir):
    # the headline comparison: capture simulated with the true calibration vs the ideal panorama
    assert main(["render", "--scene", str(ds_dir / "scene.sgs"), "--calib", str(ds_dir / "gt_calib.json"),
                 "--dataset", str(ds_dir), "--mode", "stitched", "--out", str(tmp_path / "gt")]) == 0
    assert main(["render", "--scene", str(ds_dir / "scene.sgs"), "--dataset", str(ds_dir),
                 "--mode", "ideal", "--out", str(tmp_path / "ideal")]) == 0
    assert main(["render", "--scene", str(ds_dir / "scene.sgs"), "--dataset", str(ds_dir),
                 "--mode", "stitched", "--out", str(tmp_path / "x")]) == 2


def test_eval_report(tmp_path, ds_dir, run_dir):
    out = tmp_path / "rep.json"
    assert main(["eval", "--run", str(run_dir), "--dataset", str(ds_dir), "--mode", "stitched",
                 "--out", str(out), "--workers", "2"]) == 0
    rep = json.loads(out.read_text())
    assert rep["views"] == [1, 3, 5] and rep["gap_mae_cm"] is not None
    assert rep["mean_psnr"] == pytest.approx(np.mean(rep["psnr"]))
    out1 = tmp_path / "rep1.json"
    assert main(["eval", "--run", str(run_dir), "--dataset", str(ds_dir), "--mode", "stitched",
                 "--out", str(out1), "--workers", "1"]) == 0
    assert out1.read_bytes() == out.read_bytes()


def test_eval_without_ground_truth_and_empty_split(tmp_path, ds_dir, run_dir):
    import shutil
    d = tmp_path / "ds"
    shutil.copytree(ds_dir, d)
    (d / "gt_calib.json").unlink()
    out = tmp_path / "rep.json"
    assert main(["eval", "--run", str(run_dir), "--dataset", str(d), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["gap_mae_cm"] is None
    (d / "split.json").write_text(json.dumps({"train": list(range(6)), "test": []}))
    assert main(["eval", "--run", str(run_dir), "--dataset", str(d)]) == 3


def test_inspect(tmp_path, run_dir, capsys):
    save_calib(DualFisheyeCalib.zeros(), tmp_path / "zero.json")
    heat = tmp_path / "heat.png"
    assert main(["inspect", "--calib", str(tmp_path / "zero.json"), "--out", str(heat)]) == 0
    from PIL import Image
    assert not np.any(np.asarray(Image.open(heat)))
    capsys.readouterr()
    assert main(["inspect", "--run", str(run_dir)]) == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    comps = lines[0].split(":")[1].split() + lines[1].split(":")[1].split()
    assert len(comps) == 6
    rms = float(lines[2].split(":")[1])
    last = read_history(run_dir / "history.csv")[-1]
    assert rms == pytest.approx(last["grid_rms"], rel=1e-5)


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "seamgs.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "train", "render", "eval", "inspect"):
        assert cmd in res.stdout
