"""Dataset readers (MNIST IDX, CIFAR-10 binary, raw tensor dirs) and PGM/PPM I/O.

All readers return ``(images, labels)`` with images as float arrays in
[0, 1] of shape (N, C, H, W) and labels as int64.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import FormatError

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR_RECORD = 1 + 3 * 32 * 32


def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"neither {path} nor {gz} exists")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) of unsigned bytes."""
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise FormatError(f"{path}: bad IDX magic 0x{raw[:4].hex()} at byte offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimensions at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(
            f"{path}: payload of {len(raw) - header} bytes at byte offset {header}, "
            f"expected {count} for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_mnist(data_dir, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    img_name, lbl_name = MNIST_FILES[split]
    images = read_idx(Path(data_dir) / img_name)
    labels = read_idx(Path(data_dir) / lbl_name)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise FormatError(f"{data_dir}: MNIST {split} images {images.shape} / labels {labels.shape}")
    x = (images.astype(np.float32) / 255.0)[:, None]
    y = labels.astype(np.int64)
    if y.max(initial=0) > 9:
        raise FormatError(f"{data_dir}: MNIST label {y.max()} outside 0..9")
    return x, y


def load_cifar10(data_dir, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for name in CIFAR_FILES[split]:
        path = Path(data_dir) / name
        raw = path.read_bytes()
        if len(raw) % CIFAR_RECORD:
            bad = len(raw) - len(raw) % CIFAR_RECORD
            raise FormatError(f"{path}: partial {CIFAR_RECORD}-byte record at byte offset {bad}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max(initial=0) > 9:
            i = int(np.argmax(rec[:, 0] > 9))
            raise FormatError(f"{path}: label {rec[i, 0]} at byte offset {i * CIFAR_RECORD}")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return np.concatenate(xs), np.concatenate(ys)


def save_tensor_dir(path, images: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    """Write a raw tensor directory: ``images.npy`` (N, C, H, W) and optional ``labels.npy``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "images.npy", np.ascontiguousarray(images))
    if labels is not None:
        np.save(path / "labels.npy", np.asarray(labels, dtype=np.int64))


def load_tensor_dir(path, split: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if split is not None and (path / split).is_dir():
        path = path / split
    try:
        images = np.load(path / "images.npy", allow_pickle=False)
    except ValueError as e:
        raise FormatError(f"{path / 'images.npy'}: {e}") from e
    if images.ndim != 4:
        raise FormatError(f"{path / 'images.npy'}: expected 4-D array, got shape {images.shape}")
    lbl = path / "labels.npy"
    labels = np.load(lbl, allow_pickle=False) if lbl.exists() else np.zeros(len(images), np.int64)
    return images, labels


@dataclass(frozen=True)
class DatasetHandle:
    source: str  # mnist_idx | cifar10_binary | raw_tensor_dir
    path: str
    split: str = "train"
    num_classes: int = 10

    def load(self) -> Tuple[np.ndarray, np.ndarray]:
        if not Path(self.path).exists():
            raise FileNotFoundError(f"data directory {self.path} does not exist")
        if self.source == "mnist_idx":
            x, y = load_mnist(self.path, self.split)
        elif self.source == "cifar10_binary":
            x, y = load_cifar10(self.path, self.split)
        elif self.source == "raw_tensor_dir":
            x, y = load_tensor_dir(self.path, self.split)
        else:
            raise ValueError(f"unknown dataset source {self.source!r}")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise FormatError(f"{self.path}: labels outside [0, {self.num_classes})")
        return x, y


def load_dataset(handle: DatasetHandle, shuffle_seed: Optional[int] = None
                 ) -> Iterator[Tuple[np.ndarray, int]]:
    """Iterate ``(image, label)`` pairs, in file order or a seeded permutation."""
    x, y = handle.load()
    order = np.arange(len(x)) if shuffle_seed is None else \
        np.random.default_rng(shuffle_seed).permutation(len(x))
    for i in order:
        yield x[i], int(y[i])


def fit_to_shape(x: np.ndarray, shape) -> np.ndarray:
    """Zero-pad (centered) to the target H, W and replicate a single channel to C."""
    c, h, w = shape
    n, cx, hx, wx = x.shape
    if hx > h or wx > w:
        raise ValueError(f"cannot fit images of {hx}x{wx} into {h}x{w}")
    if cx != c and cx != 1:
        raise ValueError(f"cannot map {cx} channels onto {c}")
    top, left = (h - hx) // 2, (w - wx) // 2
    out = np.zeros((n, c, h, w), dtype=x.dtype)
    out[:, :, top:top + hx, left:left + wx] = x
    return out


# ---------------------------------------------------------------------------
# images


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """Write a (C, H, W) image in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PNM images need 1 or 3 channels, got {c}")
    data = to_uint8(img).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    atomic_write(path, magic + f"\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header at byte offset {pos}")
        fields.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported PNM header {magic!r} maxval {maxval} at byte offset 0")
    c = 1 if magic == b"P5" else 3
    if len(raw) - pos != w * h * c:
        raise FormatError(f"{path}: pixel payload at byte offset {pos} has {len(raw) - pos} bytes, "
                          f"expected {w * h * c}")
    pix = np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w, c)
    return pix.transpose(2, 0, 1).astype(np.float32) / 255.0


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
