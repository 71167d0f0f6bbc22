import os

import numpy as np
import pytest

from rrnreg import cli, trainer, voldata
from rrnreg.voldata import Volume


def make_pair(tmp_path, dims=(16, 16, 16), seed=0, units="normalized"):
    rng = np.random.default_rng(seed)
    mov = Volume(rng.random(dims, dtype=np.float32), units=units)
    fix = Volume(rng.random(dims, dtype=np.float32), units=units)
    mp = voldata.save_volume(mov, str(tmp_path / "mov.hdr"))
    fp = voldata.save_volume(fix, str(tmp_path / "fix.hdr"))
    return mp, fp


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "subcommand" in capsys.readouterr().out or True
    for sub in ("preprocess", "train", "register", "eval-tre", "synth-bench", "gradcheck", "bench-costvolume"):
        assert cli.main([sub, "--help"]) == 0


def test_unknown_flag_exits_one(capsys):
    assert cli.main(["train", "--frobnicate"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_unknown_subcommand_exits_one():
    assert cli.main(["transmogrify"]) == 1


def test_train_zero_iters_writes_checkpoint(tmp_path, capsys):
    mp, fp = make_pair(tmp_path)
    out = tmp_path / "run"
    rc = cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(out), "--max-iters", "0", "--seed", "3"])
    assert rc == 0
    bundle = trainer.load_checkpoint(str(out / "checkpoint.ckpt"))
    assert bundle.iteration == 0
    assert (out / "metrics.txt").exists()
    assert (out / "resolved_config.txt").exists()


def test_train_byte_identical_runs(tmp_path):
    mp, fp = make_pair(tmp_path, seed=1)
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(out), "--max-iters", "2", "--seed", "11"])
        assert rc == 0
        blobs.append(
            (
                (out / "checkpoint.ckpt").read_bytes(),
                (out / "metrics.txt").read_bytes(),
                (out / "resolved_config.txt").read_bytes(),
            )
        )
    assert blobs[0] == blobs[1]


def test_train_config_file_and_override(tmp_path):
    mp, fp = make_pair(tmp_path, seed=2)
    cfg_file = tmp_path / "cfg.txt"
    cfg_file.write_text("lr = 5e-4\nmax_iters = 5\nlambda = 0.02\n")
    out = tmp_path / "cfgrun"
    rc = cli.main(
        ["train", "--moving", mp, "--fixed", fp, "--out", str(out), "--config", str(cfg_file), "--max-iters", "0"]
    )
    assert rc == 0
    resolved = (out / "resolved_config.txt").read_text()
    assert "lr = 0.0005" in resolved
    assert "max_iters = 0" in resolved  # flag beats file
    assert "lam = 0.02" in resolved


def test_train_rejects_unknown_config_key(tmp_path, capsys):
    mp, fp = make_pair(tmp_path, seed=3)
    cfg_file = tmp_path / "cfg.txt"
    cfg_file.write_text("warp_speed = 9\n")
    rc = cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(tmp_path / "x"), "--config", str(cfg_file)])
    assert rc == 1
    assert "unknown config key" in capsys.readouterr().err


def test_train_resume_matches_full_run(tmp_path):
    mp, fp = make_pair(tmp_path, seed=4)
    full = tmp_path / "full"
    rc = cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(full), "--max-iters", "4", "--seed", "5"])
    assert rc == 0
    half = tmp_path / "half"
    assert cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(half), "--max-iters", "2", "--seed", "5"]) == 0
    resumed = tmp_path / "resumed"
    rc = cli.main(
        [
            "train", "--moving", mp, "--fixed", fp, "--out", str(resumed),
            "--max-iters", "4", "--seed", "5", "--resume", str(half / "checkpoint.ckpt"),
        ]
    )
    assert rc == 0
    assert (full / "checkpoint.ckpt").read_bytes() == (resumed / "checkpoint.ckpt").read_bytes()


def test_register_outputs(tmp_path):
    mp, fp = make_pair(tmp_path, seed=6)
    run = tmp_path / "train"
    assert cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(run), "--max-iters", "1", "--seed", "1"]) == 0
    reg = tmp_path / "reg"
    rc = cli.main(
        [
            "register", "--checkpoint", str(run / "checkpoint.ckpt"),
            "--moving", mp, "--fixed", fp, "--out", str(reg), "--save-levels",
        ]
    )
    assert rc == 0
    d = voldata.load_dvf(str(reg / "dvf_full.dvf"))
    assert d.dims == (16, 16, 16)
    warped = voldata.load_volume(str(reg / "warped.hdr"))
    assert warped.dims == (16, 16, 16)
    for level in (1, 2, 3, 4):
        assert (reg / f"dvf_level{level}.dvf").exists()


def test_register_checkpoint_mismatch_exit_one(tmp_path, capsys):
    mp, fp = make_pair(tmp_path, seed=7)
    run = tmp_path / "t"
    assert cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(run), "--max-iters", "0", "--radius", "1"]) == 0
    # corrupt the checkpoint magic
    ck = run / "checkpoint.ckpt"
    ck.write_bytes(b"XX" + ck.read_bytes()[2:])
    rc = cli.main(["register", "--checkpoint", str(ck), "--moving", mp, "--fixed", fp, "--out", str(tmp_path / "r")])
    assert rc == 1


def test_eval_tre_zero_field(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("10 20 5\n11 21 6\n")
    (tmp_path / "f.txt").write_text("13 24 5\n14 25 6\n")
    rc = cli.main(
        [
            "eval-tre", "--dvf", "zero",
            "--landmarks-moving", str(tmp_path / "m.txt"),
            "--landmarks-fixed", str(tmp_path / "f.txt"),
            "--spacing", "1,1,1", "--dims", "32,32,32",
            "--case-id", "t1", "--out", str(tmp_path / "rep"),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "t1: mean 5.00 mm" in out  # sqrt(3^2+4^2) per landmark
    errors = (tmp_path / "rep" / "t1_errors.txt").read_text().strip().splitlines()
    assert len(errors) == 2
    assert float(errors[0]) == pytest.approx(5.0)


def test_eval_tre_missing_dims_for_zero(capsys, tmp_path):
    (tmp_path / "m.txt").write_text("1 1 1\n")
    (tmp_path / "f.txt").write_text("1 1 1\n")
    rc = cli.main(
        [
            "eval-tre", "--dvf", "zero",
            "--landmarks-moving", str(tmp_path / "m.txt"),
            "--landmarks-fixed", str(tmp_path / "f.txt"),
            "--spacing", "1,1,1",
        ]
    )
    assert rc == 1


def test_preprocess_pipeline(tmp_path, capsys):
    rng = np.random.default_rng(8)
    data = rng.uniform(-1200, 100, size=(40, 40, 40)).astype(np.float32)
    mov = voldata.save_volume(Volume(data, spacing=(0.6, 0.6, 2.5)), str(tmp_path / "m.hdr"))
    fix = voldata.save_volume(Volume(data + 1.0, spacing=(0.6, 0.6, 2.5)), str(tmp_path / "f.hdr"))
    (tmp_path / "lm.txt").write_text("12 14 10\n")
    (tmp_path / "lf.txt").write_text("13 15 11\n")
    out = tmp_path / "prep"
    rc = cli.main(
        [
            "preprocess", "--moving", mov, "--fixed", fix, "--out", str(out),
            "--clip=-1000,-100", "--crop", "4,4,4:36,36,36", "--target-dims", "16",
            "--landmarks-moving", str(tmp_path / "lm.txt"),
            "--landmarks-fixed", str(tmp_path / "lf.txt"),
        ]
    )
    assert rc == 0
    prepped = voldata.load_volume(str(out / "moving.hdr"))
    assert prepped.dims == (16, 16, 16)
    assert prepped.data.min() >= -1000 and prepped.data.max() <= -100
    lms = voldata.load_landmarks(
        str(out / "landmarks_moving.txt"), str(out / "landmarks_fixed.txt"), "prep", prepped.spacing
    )
    # point (z=9, y=13, x=11) 0-based -> crop -5 -> scale 15/31
    assert lms.moving[0][0] == pytest.approx((9 - 4) * 15 / 31, abs=1e-5)


def test_synth_bench_smoke(tmp_path, capsys):
    out = tmp_path / "sb"
    rc = cli.main(
        [
            "synth-bench", "--dims", "32", "--amplitude", "4", "--seed", "7",
            "--max-iters", "2", "--out", str(out),
        ]
    )
    assert rc == 0
    printed = capsys.readouterr().out
    assert "initial mean|max displacement" in printed
    assert "final mean|max EPE" in printed
    assert (out / "dvf_pred.dvf").exists() and (out / "dvf_gt.dvf").exists()
    assert (out / "checkpoint.ckpt").exists()


def test_bench_costvolume(capsys):
    rc = cli.main(["bench-costvolume", "--dims", "16", "--channels", "4", "--radius", "1", "--repeats", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Mvoxel-offsets/s" in out


def test_gradcheck_quick(capsys):
    rc = cli.main(["gradcheck", "--quick"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "register+loss_16/params" not in out
    assert "pass" in out


def test_no_partial_outputs_on_failure(tmp_path):
    mp, fp = make_pair(tmp_path, seed=9, dims=(16, 16, 16))
    bad_out = tmp_path / "bad"
    # invalid radius -> neighborhood_offsets rejects, nothing written
    rc = cli.main(["train", "--moving", mp, "--fixed", fp, "--out", str(bad_out), "--radius", "0"])
    assert rc == 1
    assert not (bad_out / "checkpoint.ckpt").exists()
    leftovers = [p for p in bad_out.iterdir()] if bad_out.exists() else []
    assert all(not p.name.startswith(".tmp-") for p in leftovers)
