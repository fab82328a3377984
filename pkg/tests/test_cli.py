import numpy as np
import pytest

from moodkit import cli
from moodkit.volcore import read_mask, read_volume


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-phantoms", "--out", str(d / "c"), "--count", "4", "--dims", "32", "--seed", "2"]) == 0
    man = str(d / "c" / "manifest.json")
    assert cli.main(["build-ref", "--manifest", man, "--out", str(d / "r.href"), "--dims", "32"]) == 0
    assert cli.main(["build-ref", "--manifest", man, "--out", str(d / "r1k.href"), "--dims", "32",
                     "--bins", "1024"]) == 0
    assert cli.main(["train", "--manifest", man, "--out", str(d / "m.ckpt"), "--epochs", "1",
                     "--dims", "32", "--batch", "8"]) == 0
    return d, man


def test_predict_writes_outputs(work):
    d, man = work
    vol = d / "c" / "phantom_000.rvol"
    if not vol.exists():
        vol = sorted((d / "c").glob("*.rvol"))[0]
    rc = cli.main(["predict", "--input", str(vol), "--ref", str(d / "r.href"), "--ckpt", str(d / "m.ckpt"),
                   "--out-pixel", str(d / "p.rvol"), "--out-sample", str(d / "s.txt"), "--t-start", "2"])
    assert rc == 0
    assert (d / "s.txt").read_text() in ("0\n", "1\n")
    assert read_mask(d / "p.rvol").dims == read_volume(vol).dims


def test_evaluate_writes_csv(work):
    d, man = work
    rc = cli.main(["evaluate", "--manifest", man, "--ref", str(d / "r.href"), "--ckpt", str(d / "m.ckpt"),
                   "--out-csv", str(d / "e.csv"), "--out-plot", str(d / "e_plot.csv"), "--t-start", "2"])
    assert rc == 0
    assert (d / "e.csv").read_text().startswith("group,n,sensitivity")
    assert len((d / "e_plot.csv").read_text().splitlines()) == 5


def test_recon_dump(work):
    d, man = work
    vol = sorted((d / "c").glob("*.rvol"))[0]
    assert cli.main(["recon", "--input", str(vol), "--ckpt", str(d / "m.ckpt"), "--t-start", "2",
                     "--out", str(d / "rec.rvol")]) == 0
    assert np.isfinite(read_volume(d / "rec.rvol").data).all()


def test_bad_arguments_exit_2(work):
    assert cli.main([]) == 2
    assert cli.main(["predict", "--input", "x"]) == 2
    d, man = work
    assert cli.main(["predict", "--input", "x", "--ref", "r", "--ckpt", "c", "--out-pixel", "a",
                     "--out-sample", "b", "--t-start", "5000"]) == 2


def test_missing_file_exit_3(work, tmp_path):
    d, man = work
    assert cli.main(["predict", "--input", str(tmp_path / "nope.rvol"), "--ref", str(d / "r.href"),
                     "--ckpt", str(d / "m.ckpt"), "--out-pixel", "a", "--out-sample", "b"]) == 3
    junk = tmp_path / "junk.rvol"
    junk.write_bytes(b"garbage")
    assert cli.main(["recon", "--input", str(junk), "--ckpt", str(d / "m.ckpt"), "--out", "x"]) == 3


def test_bin_mismatch_exit_4(work):
    d, man = work
    vol = sorted((d / "c").glob("*.rvol"))[0]
    rc = cli.main(["predict", "--input", str(vol), "--ref", str(d / "r1k.href"), "--ckpt", str(d / "m.ckpt"),
                   "--out-pixel", str(d / "p2.rvol"), "--out-sample", str(d / "s2.txt")])
    assert rc == 4


def test_help_exit_0(capsys):
    assert cli.main(["--help"]) == 0
    assert "gen-benchmark" in capsys.readouterr().out
