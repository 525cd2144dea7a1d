import gzip
import struct

import numpy as np
import pytest

from irevnet.data import (
    CIFAR_RECORD,
    DatasetHandle,
    fit_to_shape,
    load_cifar10,
    load_dataset,
    load_mnist,
    load_tensor_dir,
    read_idx,
    read_pnm,
    save_tensor_dir,
    to_uint8,
    write_idx,
    write_pnm,
)
from irevnet.errors import FormatError


def write_fake_mnist(d, n=5, gz=False):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    lbls = rng.integers(0, 10, n, dtype=np.uint8)
    sfx = ".gz" if gz else ""
    for split, (i, l) in {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                          "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}.items():
        write_idx(d / f"{i}{sfx}", imgs)
        write_idx(d / f"{l}{sfx}", lbls)
    return imgs, lbls


def test_idx_header_constant(tmp_path):
    write_idx(tmp_path / "x", np.zeros((60000, 28, 28), np.uint8)[:3])
    raw = (tmp_path / "x").read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == 0x00000803
    assert struct.unpack(">3I", raw[4:16]) == (3, 28, 28)


@pytest.mark.parametrize("gz", [False, True])
def test_mnist_roundtrip(tmp_path, gz):
    imgs, lbls = write_fake_mnist(tmp_path, gz=gz)
    x, y = load_mnist(tmp_path, "train")
    assert x.shape == (5, 1, 28, 28) and x.dtype == np.float32
    assert x.min() >= 0 and x.max() <= 1
    assert np.array_equal(to_uint8(x[:, 0]), imgs)
    assert np.array_equal(y, lbls)


def test_idx_errors_report_offset(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x08\x01" + b"\0" * 8)
    with pytest.raises(FormatError, match="byte offset 0"):
        read_idx(tmp_path / "bad")
    (tmp_path / "short").write_bytes(struct.pack(">HBB", 0, 8, 1) + struct.pack(">I", 10) + b"\0" * 3)
    with pytest.raises(FormatError, match="byte offset 8"):
        read_idx(tmp_path / "short")
    with gzip.open(tmp_path / "trunc.gz", "wb") as fh:
        fh.write(b"\0\0")
    with pytest.raises(FormatError):
        read_idx(tmp_path / "trunc")


def test_cifar_records(tmp_path):
    rng = np.random.default_rng(0)
    recs = rng.integers(0, 256, (4, CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = [3, 0, 9, 1]
    (tmp_path / "test_batch.bin").write_bytes(recs.tobytes())
    x, y = load_cifar10(tmp_path, "test")
    assert np.array_equal(y, [3, 0, 9, 1])
    assert x.shape == (4, 3, 32, 32)
    assert np.array_equal(to_uint8(x).reshape(4, -1), recs[:, 1:])
    (tmp_path / "test_batch.bin").write_bytes(recs.tobytes() + b"\0" * 10)
    with pytest.raises(FormatError, match=f"byte offset {4 * CIFAR_RECORD}"):
        load_cifar10(tmp_path, "test")


def test_tensor_dir_bitwise(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 2, 4, 4)).astype(np.float32)
    y = np.array([1, 0, 2])
    save_tensor_dir(tmp_path / "t", x, y)
    x2, y2 = load_tensor_dir(tmp_path / "t")
    assert x2.dtype == x.dtype and x2.tobytes() == x.tobytes()
    assert np.array_equal(y2, y)


def test_handle_and_iteration(tmp_path):
    write_fake_mnist(tmp_path)
    h = DatasetHandle("mnist_idx", str(tmp_path), "test")
    a = [lbl for _, lbl in load_dataset(h, shuffle_seed=3)]
    b = [lbl for _, lbl in load_dataset(h, shuffle_seed=3)]
    assert a == b and sorted(a) == sorted(h.load()[1].tolist())
    with pytest.raises(FileNotFoundError, match="nope"):
        DatasetHandle("mnist_idx", str(tmp_path / "nope")).load()
    with pytest.raises(FormatError):
        DatasetHandle("mnist_idx", str(tmp_path), "test", num_classes=2).load()


def test_fit_to_shape():
    x = np.ones((2, 1, 28, 28), np.float32)
    y = fit_to_shape(x, (3, 32, 32))
    assert y.shape == (2, 3, 32, 32)
    assert y.sum() == 3 * 2 * 28 * 28
    assert np.all(y[:, :, :2] == 0) and np.all(y[:, :, 30:] == 0)
    with pytest.raises(ValueError):
        fit_to_shape(np.ones((1, 2, 8, 8)), (3, 8, 8))


@pytest.mark.parametrize("c", [1, 3])
def test_pnm_roundtrip(tmp_path, c):
    img = np.random.default_rng(c).uniform(size=(c, 5, 7))
    path = tmp_path / ("a.pgm" if c == 1 else "a.ppm")
    write_pnm(path, img)
    assert path.read_bytes()[:2] == (b"P5" if c == 1 else b"P6")
    back = read_pnm(path)
    assert back.shape == img.shape
    assert np.array_equal(to_uint8(back), to_uint8(img))
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_to_uint8_clamps():
    assert np.array_equal(to_uint8(np.array([-0.2, 0.5, 1.7])), [0, 128, 255])
