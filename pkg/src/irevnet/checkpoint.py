"""Binary checkpoint format.

Layout::

    b"IREV"                      magic
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON, sorted keys, no whitespace
    payload                      concatenated little-endian IEEE-754 tensors

The header carries the network config, optimizer scalars, seed, step
counter and a manifest ``[{name, dtype, shape, offset}]`` locating each
tensor in the payload (offsets relative to the payload start). Saving a
loaded checkpoint reproduces the original bytes exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .data import atomic_write
from .errors import CheckpointError
from .network import IRevNet, NetConfig, build
from .training import OptimState

MAGIC = b"IREV"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    net: IRevNet
    optim: OptimState
    seed: int = 0
    step: int = 0
    extra: Dict = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return self.step > 0


def _tensor_groups(ck: Checkpoint):
    for name, arr in ck.net.parameters().items():
        yield f"param/{name}", arr
    for name, arr in ck.net.buffers().items():
        yield f"buffer/{name}", arr
    for name in ck.net.parameters():
        buf = ck.optim.buffers.get(name)
        if buf is not None:
            yield f"momentum/{name}", buf


def to_bytes(ck: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in _tensor_groups(ck):
        dt = np.dtype(arr.dtype).newbyteorder("=")
        if dt not in _DTYPE_NAMES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_NAMES[dt]]).tobytes()
        manifest.append({"name": name, "dtype": _DTYPE_NAMES[dt], "shape": list(arr.shape),
                         "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    o = ck.optim
    header = {
        "config": ck.net.config.to_dict(),
        "dtype": _DTYPE_NAMES[np.dtype(ck.net.dtype)],
        "seed": ck.seed,
        "step": ck.step,
        "rng": {"seed": ck.seed, "stream": "numpy.default_rng([seed, epoch]) / ([seed, step, 1])"},
        "optim": {"lr": o.lr, "momentum": o.momentum, "weight_decay": o.weight_decay,
                  "milestones": list(o.milestones), "lr_drop": o.lr_drop, "step": o.step},
        "extra": ck.extra,
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save(path, ck: Checkpoint) -> None:
    atomic_write(path, to_bytes(ck))


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint prefix ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version} unsupported (expected {VERSION})")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable header at byte offset {start}: {e}") from e
    payload = memoryview(raw)[start + hlen:]
    cfg = NetConfig.from_dict(header["config"])
    net = build(cfg, seed=0, dtype=header["dtype"])
    o = header["optim"]
    optim = OptimState(lr=o["lr"], momentum=o["momentum"], weight_decay=o["weight_decay"],
                       milestones=tuple(o["milestones"]), lr_drop=o["lr_drop"], step=o["step"])
    params, buffers = net.parameters(), net.buffers()
    seen = set()
    for t in header["tensors"]:
        dt = np.dtype(_DTYPES[t["dtype"]])
        count = int(np.prod(t["shape"]))
        end = t["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(
                f"{source}: tensor {t['name']} overruns payload at byte offset "
                f"{start + hlen + t['offset']}")
        arr = np.frombuffer(payload[t["offset"]:end], dtype=dt).reshape(t["shape"])
        arr = arr.astype(dt.newbyteorder("="))
        kind, name = t["name"].split("/", 1)
        ref = {"param": params, "buffer": buffers, "momentum": params}[kind].get(name)
        if ref is None or ref.shape != arr.shape:
            raise CheckpointError(f"{source}: tensor {t['name']} does not fit the stored config")
        if kind == "param":
            net.set_parameter(name, arr)
        elif kind == "buffer":
            net.set_buffer(name, arr)
        else:
            optim.buffers[name] = arr
        seen.add(t["name"])
    missing = [f"param/{n}" for n in params if f"param/{n}" not in seen]
    if missing:
        raise CheckpointError(f"{source}: missing tensors {missing[:3]}...")
    return Checkpoint(net, optim, header["seed"], header["step"], header.get("extra", {}))


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes(), str(path))


def is_checkpoint(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == MAGIC
    except OSError:
        return False
