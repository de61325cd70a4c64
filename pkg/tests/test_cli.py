import subprocess
import sys

import numpy as np
import pytest

from uncreg import cli, volume_io
from uncreg.grid import Mask
from uncreg.volume_io import read_raw_field, read_uaf


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "gen", "--out", d, "--seed", 3, "--dims", 16, 16, 16, "--atlas", "stripes") == 0
    return d


@pytest.fixture(scope="module")
def identity(tmp_path_factory):
    d = tmp_path_factory.mktemp("ident")
    assert run("synth", "gen", "--out", d, "--seed", 1, "--dims", 12, 12, 12,
               "--noise", "constant", "--sigma-min", 1e-9, "--sigma-max", 1e-9) == 0
    return d


def test_synth_outputs(data):
    for name in ("truth.uaf", "field.uaf", "mask.uaf", "subject_seg.uaf", "atlas_seg.uaf", "manifest.txt"):
        assert (data / name).exists()
    assert "seed = 3" in (data / "manifest.txt").read_text()


def test_identity_pipeline_dice_one(identity, tmp_path, capsys):
    assert run("fit", "affine", "--field", identity / "field.uaf", "--out", tmp_path / "a.utp",
               "--field-out", tmp_path / "t.uaf") == 0
    assert run("warp-labels", "--transform", tmp_path / "t.uaf", "--atlas", identity / "atlas_seg.uaf",
               "--mask", identity / "mask.uaf", "--out", tmp_path / "w.uaf") == 0
    capsys.readouterr()
    assert run("metrics", "dice", "--a", tmp_path / "w.uaf", "--b", identity / "subject_seg.uaf") == 0
    out = capsys.readouterr().out
    assert "dice_mean\t1\n" in out


def test_sample_byte_identical(data, tmp_path):
    run("fit", "bspline", "--field", data / "field.uaf", "--out", tmp_path / "b.utp")
    for name in ("s1.uaf", "s2.uaf"):
        assert run("sample", "--field", data / "field.uaf", "--posterior", tmp_path / "b.utp",
                   "--n", 3, "--seed", 7, "--out", tmp_path / name) == 0
    assert (tmp_path / "s1.uaf").read_bytes() == (tmp_path / "s2.uaf").read_bytes()
    assert read_uaf(tmp_path / "s1.uaf").channels == 9


def test_weighted_beats_unweighted(tmp_path):
    d = tmp_path / "bench"
    run("synth", "gen", "--out", d, "--seed", 0, "--dims", 20, 20, 20,
        "--affine", 1.05, 0.02, 0, 3, 0.01, 0.97, 0.03, -2, 0, 0.02, 1.02, 1,
        "--bump", 5, 0, 0, 8, 2, 1, 0)
    truth = read_uaf(d / "truth.uaf").data
    mask = read_raw_field(d / "mask.uaf")
    rmse = {}
    for flag in ("--weighted", "--unweighted"):
        out = tmp_path / f"{flag}.uaf"
        assert run("fit", "bspline", "--spacing", 10, flag, "--field", d / "field.uaf",
                   "--out", tmp_path / "p.utp", "--field-out", out) == 0
        fit = read_uaf(out).data
        rmse[flag] = np.sqrt(((mask.gather(fit) - mask.gather(truth)) ** 2).sum(axis=0).mean())
    assert rmse["--weighted"] < rmse["--unweighted"]


def test_demons_pipeline(data, tmp_path, capsys):
    assert run("fit", "demons", "--field", data / "field.uaf", "--out", tmp_path / "np", "--mode", "plain") == 0
    assert (tmp_path / "np.mean.uaf").exists()
    assert run("sample", "--field", data / "field.uaf", "--demons", tmp_path / "np",
               "--n", 2, "--seed", 1, "--out", tmp_path / "ds.uaf") == 0
    capsys.readouterr()
    assert run("metrics", "corr", "--field", data / "field.uaf", "--truth", data / "truth.uaf",
               "--demons", tmp_path / "np") == 0
    rows = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert set(rows) == {"spearman", "pearson"}


def test_entropy_and_modes(data, tmp_path, capsys):
    run("fit", "affine", "--field", data / "field.uaf", "--out", tmp_path / "a.utp")
    run("sample", "--field", data / "field.uaf", "--posterior", tmp_path / "a.utp",
        "--n", 4, "--seed", 2, "--out", tmp_path / "s.uaf")
    assert run("entropy", "--samples", tmp_path / "s.uaf", "--atlas", data / "atlas_seg.uaf",
               "--mask", data / "mask.uaf", "--out", tmp_path / "h.uaf",
               "--dist-out", tmp_path / "d.uaf", "--vote-out", tmp_path / "v.uaf") == 0
    h = read_uaf(tmp_path / "h.uaf").data
    assert h.min() >= 0 and h.max() <= np.log(4) + 1e-6
    capsys.readouterr()
    assert run("modes", "--posterior", tmp_path / "a.utp", "--field", data / "field.uaf", "--k", 2,
               "--seed", 0, "--out", tmp_path / "m.uaf") == 0
    out = capsys.readouterr().out
    assert out.count("lambda_") == 6
    assert read_uaf(tmp_path / "m.uaf").channels == 9
    assert run("variance", "--posterior", tmp_path / "a.utp", "--out", tmp_path / "var.txt") == 0
    assert len((tmp_path / "var.txt").read_text().splitlines()) == 13


def test_sequential_and_joint(data, tmp_path):
    assert run("fit", "sequential", "--field", data / "field.uaf", "--out-affine", tmp_path / "a.utp",
               "--out-bspline", tmp_path / "b.utp", "--field-out", tmp_path / "c.uaf") == 0
    assert run("fit", "joint", "--field", data / "field.uaf", "--out", tmp_path / "j.utp") == 0
    assert run("variance", "--posterior", tmp_path / "b.utp", "--out", tmp_path / "bv.uaf") == 0
    assert read_uaf(tmp_path / "bv.uaf").channels == 3


def test_losses(data, tmp_path, capsys):
    capsys.readouterr()
    assert run("loss", "total", "--coord", 1, "--mask", 1, "--seg", 1, "--uncer", 1) == 0
    assert capsys.readouterr().out == "loss_total\t6.6\n"
    assert run("loss", "coord", "--field", data / "field.uaf", "--truth", data / "truth.uaf") == 0
    assert run("loss", "uncer", "--field", data / "field.uaf", "--truth", data / "truth.uaf",
               "--dist", "laplace") == 0
    assert run("loss", "seg", "--warped", data / "subject_seg.uaf", "--truth", data / "subject_seg.uaf") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("loss_coord_l2\t") and lines[-1] == "loss_seg\t0"
    m = read_raw_field(data / "mask.uaf")
    volume_io.write_uaf(tmp_path / "p.uaf", m.grid, m.values.astype(float), 1)
    assert run("loss", "mask", "--pred", tmp_path / "p.uaf", "--truth", data / "mask.uaf") == 0
    assert float(capsys.readouterr().out.split("\t")[1]) <= 1e-5


def test_convert_round_trip(data, tmp_path):
    assert run("convert", "--in", data / "truth.uaf", "--out", tmp_path / "t.nii") == 0
    assert run("convert", "--in", tmp_path / "t.nii", "--out", tmp_path / "t.uaf") == 0
    assert (tmp_path / "t.uaf").read_bytes() == (data / "truth.uaf").read_bytes()
    f = read_raw_field(data / "field.uaf")
    volume_io.write_nifti(tmp_path / "mean.nii", f.grid, f.mean, 3)
    volume_io.write_nifti(tmp_path / "std.nii", f.grid, f.std, 3)
    volume_io.write_nifti(tmp_path / "mask.nii", f.grid, f.mask.values.astype(np.uint8), 1, np.uint8)
    assert run("convert", "--mean", tmp_path / "mean.nii", "--std", tmp_path / "std.nii",
               "--mask", tmp_path / "mask.nii", "--out", tmp_path / "f.uaf") == 0
    assert (tmp_path / "f.uaf").read_bytes() == (data / "field.uaf").read_bytes()


def test_error_line(tmp_path, capsys):
    assert run("fit", "affine", "--field", tmp_path / "missing.uaf", "--out", tmp_path / "x.utp") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: CLIError: file not found:") and "missing.uaf" in err[-1]


def test_corrupt_input_error(tmp_path, capsys):
    (tmp_path / "bad.uaf").write_bytes(b"UAF1" + b"\x00" * 10)
    assert run("fit", "affine", "--field", tmp_path / "bad.uaf", "--out", tmp_path / "x.utp") == 1
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: ")


def test_seed_required(data, tmp_path):
    with pytest.raises(SystemExit) as e:
        run("sample", "--field", data / "field.uaf", "--posterior", tmp_path / "a.utp", "--out", tmp_path / "s.uaf")
    assert e.value.code != 0


def test_config_file(data, tmp_path, capsys):
    run("fit", "affine", "--field", data / "field.uaf", "--out", tmp_path / "a.utp")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# sampling run\nn = 2\nseed = 5\nfield = {data / 'field.uaf'}\n")
    capsys.readouterr()
    assert run("--config", cfg, "sample", "--posterior", tmp_path / "a.utp", "--out", tmp_path / "c.uaf") == 0
    err = capsys.readouterr().err
    assert "# n = 2" in err and "# seed = 5" in err
    assert read_uaf(tmp_path / "c.uaf").channels == 6
    # flags override the file
    assert run("--config", cfg, "sample", "--posterior", tmp_path / "a.utp", "--n", 3,
               "--out", tmp_path / "d.uaf") == 0
    assert read_uaf(tmp_path / "d.uaf").channels == 9
    cfg.write_text("bogus = 1\n")
    assert run("--config", cfg, "sample", "--posterior", tmp_path / "a.utp", "--out", tmp_path / "e.uaf") == 1
    assert "unknown config key" in capsys.readouterr().err


def test_threads_do_not_change_outputs(data, tmp_path, monkeypatch):
    run("fit", "bspline", "--field", data / "field.uaf", "--out", tmp_path / "b.utp")
    for n in (1, 4):
        run("--threads", n, "sample", "--field", data / "field.uaf", "--posterior", tmp_path / "b.utp",
            "--n", 4, "--seed", 9, "--out", tmp_path / f"s{n}.uaf")
    monkeypatch.setenv("UNCREG_THREADS", "3")
    run("sample", "--field", data / "field.uaf", "--posterior", tmp_path / "b.utp",
        "--n", 4, "--seed", 9, "--out", tmp_path / "env.uaf")
    ref = (tmp_path / "s1.uaf").read_bytes()
    assert (tmp_path / "s4.uaf").read_bytes() == ref == (tmp_path / "env.uaf").read_bytes()


@pytest.mark.parametrize(
    "argv, expect",
    [
        (["fit", "bspline", "--help"], ["--spacing", "10", "--weighted", "--unweighted", "--epsilon"]),
        (["fit", "demons", "--help"], ["--sigma", "3", "--mode", "precision", "--paper-variance"]),
        (["modes", "--help"], ["--scale-min", "-3", "--scale-max", "--seed"]),
        (["loss", "total", "--help"], ["--lambda-mask", "0.5", "--lambda-seg", "5", "--lambda-uncer", "0.1"]),
        (["sample", "--help"], ["--n", "50", "--literal-paper-noise", "--seed"]),
    ],
)
def test_help_lists_defaults(argv, expect, capsys):
    with pytest.raises(SystemExit) as e:
        run(*argv)
    assert e.value.code == 0
    text = capsys.readouterr().out
    for token in expect:
        assert token in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "uncreg", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "synth" in r.stdout
