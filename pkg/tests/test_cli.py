import subprocess
import sys

import numpy as np
import pytest

from irevnet import analysis, checkpoint
from irevnet.cli import main
from irevnet.config import load_config
from irevnet.network import build
from irevnet.data import load_mnist, read_pnm, to_uint8, write_pnm

from test_data import write_fake_mnist

CONFIG = """
[net]
input_shape = 1,28,28
split_factor = 2
blocks = 2
downsample_at = 2
num_classes = 10

[optimizer]
lr = 0.05
milestones = 4

[data]
source = mnist_idx

[train]
epochs = 2
batch_size = 8
augment = crop
augment_pad = 2
"""


@pytest.fixture
def setup(tmp_path):
    data = tmp_path / "mnist"
    data.mkdir()
    write_fake_mnist(data, n=40)
    cfg = tmp_path / "exp.ini"
    cfg.write_text(CONFIG)
    return tmp_path, data, cfg


def train(out, data, cfg, *extra, seed=0):
    return main(["--seed", str(seed), "--deterministic", "--out", str(out), "train", str(cfg),
                 "--data", str(data), *extra])


def test_missing_data_dir(setup, capsys):
    tmp, _, cfg = setup
    assert train(tmp / "o", tmp / "no_such_dir", cfg) == 2
    assert "no_such_dir" in capsys.readouterr().err


def test_bad_config_and_usage(setup, capsys):
    tmp, data, _ = setup
    bad = tmp / "bad.ini"
    bad.write_text("[net]\npreset = huge\n")
    assert train(tmp / "o", data, bad) == 2
    assert main([]) == 2
    assert main(["spectrum", "tiny-b", "--method", "svd"]) == 2


def test_train_deterministic_and_resume(setup):
    tmp, data, cfg = setup
    assert train(tmp / "a", data, cfg) == 0
    assert train(tmp / "b", data, cfg) == 0
    log_a = (tmp / "a" / "train_log.csv").read_text()
    assert log_a == (tmp / "b" / "train_log.csv").read_text()
    lines = log_a.splitlines()
    assert lines[0] == "iteration,lr,loss,minibatch_accuracy" and len(lines) == 11

    # stop after 3 steps, then resume to the end
    assert train(tmp / "c", data, cfg, "--max-steps", "3") == 0
    ck = checkpoint.load(tmp / "c" / "checkpoint.irev")
    assert ck.step == 3
    assert train(tmp / "c", data, cfg, "--resume", str(tmp / "c" / "checkpoint.irev")) == 0
    assert checkpoint.load(tmp / "c" / "checkpoint.irev").step == 10
    assert (tmp / "c" / "train_log.csv").read_text() == log_a
    assert (tmp / "c" / "checkpoint.irev").read_bytes() == (tmp / "a" / "checkpoint.irev").read_bytes()


def test_periodic_checkpoints(setup):
    tmp, data, cfg = setup
    assert train(tmp / "a", data, cfg, "--checkpoint-every", "5") == 0
    assert sorted(p.name for p in (tmp / "a").glob("checkpoint_*.irev")) == [
        "checkpoint_0000005.irev", "checkpoint_0000010.irev"]


@pytest.fixture
def trained(setup):
    tmp, data, cfg = setup
    assert train(tmp / "run", data, cfg) == 0
    return tmp, data, tmp / "run" / "checkpoint.irev"


def test_invert(trained, capsys):
    tmp, data, ck = trained
    x, _ = load_mnist(data, "test")
    write_pnm(tmp / "img.pgm", x[0])
    out = tmp / "inv"
    assert main(["--seed", "2", "--out", str(out), "invert", str(ck), "--noise", "5",
                 "--image", str(tmp / "img.pgm")]) == 0
    rows = analysis.read_csv(out / "invert.csv")
    assert len(rows) == 6 and rows[0]["source"] == "img.pgm"
    arrays = np.load(out / "invert_arrays.npz")
    net = checkpoint.load(ck).net
    expect = analysis.relative_errors(net, arrays["x"])
    assert [float(r["relative_error"]) for r in rows] == expect.tolist()
    assert max(expect) <= 1e-5
    assert np.array_equal(to_uint8(read_pnm(out / "reconstruction_000.pgm")), to_uint8(x[0]))
    assert "mean_relative_error" in capsys.readouterr().out
    assert not (out / "invert.csv").read_text().startswith("#")


def test_corrupt_checkpoint_exit_3(tmp_path):
    bad = tmp_path / "bad.irev"
    bad.write_bytes(b"NOPE" + b"\0" * 40)
    assert main(["invert", str(bad), "--noise", "2"]) == 3


def test_interpolate(trained):
    tmp, data, ck = trained
    x, _ = load_mnist(data, "test")
    write_pnm(tmp / "a.pgm", x[0])
    write_pnm(tmp / "b.pgm", x[1])
    out = tmp / "interp"
    assert main(["--out", str(out), "interpolate", str(ck), str(tmp / "a.pgm"), str(tmp / "b.pgm"),
                 "--steps", "1"]) == 0
    rows = analysis.read_csv(out / "manifest.csv")
    assert [float(r["t"]) for r in rows] == [1.0, 0.0]
    for r in rows:
        assert f"t{float(r['t']):.6f}" in r["file"] and (out / r["file"]).exists()
    assert np.array_equal(to_uint8(read_pnm(out / rows[0]["file"])), to_uint8(x[0]))
    assert np.array_equal(to_uint8(read_pnm(out / rows[1]["file"])), to_uint8(x[1]))


def test_spectrum_thin_wrapper_and_untrained_warning(setup):
    tmp, _, cfg = setup
    out = tmp / "spec"
    assert main(["--seed", "4", "--out", str(out), "spectrum", str(cfg), "--k", "3",
                 "--iters", "40"]) == 0
    text = (out / "spectrum.csv").read_text()
    assert text.startswith("# WARNING: untrained")
    rows = analysis.read_csv(out / "spectrum.csv")
    assert len(rows) == 3

    net = build(load_config(cfg).net, 4)
    x = np.random.default_rng(4).uniform(0, 1, (1, 1, 28, 28)).astype(np.float32)
    rep = analysis.jacobian_spectrum(net, x, 3, 40, 1e-7, "power", None, 4)
    assert [float(r["singular_value"]) for r in rows] == rep.singular_values.tolist()


def test_probe_and_pca(trained):
    tmp, data, ck = trained
    out = tmp / "an"
    assert main(["--out", str(out), "probe", str(ck), "--data", str(data), "--taps", "0,2",
                 "--iters", "20"]) == 0
    rows = analysis.read_csv(out / "probe.csv")
    assert [int(r["depth"]) for r in rows] == [0, 2]
    assert not (out / "probe.csv").read_text().startswith("#")

    net = checkpoint.load(ck).net
    xtr, ytr = load_mnist(data, "train")
    xte, yte = load_mnist(data, "test")
    rep = analysis.depth_probe(net, (xtr, ytr), (xte, yte), [0, 2], 0, 20)
    assert [float(r["linear_accuracy"]) for r in rows] == [r.linear_accuracy for r in rep.rows]

    assert main(["--out", str(out), "pca", str(ck), "--data", str(data), "--d-list", "1,2,3",
                 "--iters", "20"]) == 0
    assert len(analysis.read_csv(out / "pca.csv")) == 3
    assert main(["--out", str(out), "pca", str(ck), "--data", str(data), "--d-list", "100000"]) == 2


def test_info(trained, capsys):
    _, _, ck = trained
    assert main(["info", str(ck)]) == 0
    assert '"trained": true' in capsys.readouterr().out
    assert main(["info"]) == 0
    assert "tiny-b" in capsys.readouterr().out


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "irevnet.cli", "info"], capture_output=True, text=True)
    assert res.returncode == 0 and "paper-b" in res.stdout
