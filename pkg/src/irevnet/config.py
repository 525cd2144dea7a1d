"""Experiment config files (INI, read with :mod:`configparser`).

Sections and keys::

    [net]
    preset = tiny-b            ; optional; any key below overrides it
    input_shape = 3,32,32
    split_factor = 2
    pad_to =                   ; empty for a bijective split
    blocks = 16
    downsample_at = 5,9,13     ; 1-based block indices
    downsample_factor = 2
    num_classes = 10
    bottleneck_ratio = 4

    [optimizer]
    lr = 0.1
    momentum = 0.9
    weight_decay = 1e-4
    milestones =               ; iterations at which lr is multiplied by lr_drop
    lr_drop = 0.1

    [data]
    source = mnist_idx         ; mnist_idx | cifar10_binary | raw_tensor_dir
    path =                     ; default data directory, --data overrides

    [train]
    epochs = 3
    batch_size = 64
    augment = none             ; none | crop | flip+crop
    augment_pad = 4
    backward = o1              ; o1 | stored
    checkpoint_every = 0

Ready-made files for the four presets live in ``configs/``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .network import PRESETS, NetConfig, make_config
from .training import OptimState, TrainSettings

_NET_KEYS = {"input_shape", "split_factor", "pad_to", "blocks", "downsample_at",
             "downsample_factor", "num_classes", "bottleneck_ratio", "preset"}
_OPT_KEYS = {"lr", "momentum", "weight_decay", "milestones", "lr_drop"}
_DATA_KEYS = {"source", "path"}
_TRAIN_KEYS = {"epochs", "batch_size", "augment", "augment_pad", "backward", "checkpoint_every"}
SOURCES = ("mnist_idx", "cifar10_binary", "raw_tensor_dir")


@dataclass
class Experiment:
    net: NetConfig
    optim: OptimState
    train: TrainSettings
    data_source: str = "mnist_idx"
    data_path: Optional[str] = None
    raw: dict = field(default_factory=dict)


def _ints(text: str):
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _get(section, key, conv, where):
    try:
        return conv(section[key])
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key!r}: {section[key]!r}") from e


def parse_config(text: str, where: str = "<config>") -> Experiment:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=where)
    except configparser.Error as e:
        raise ConfigError(f"{where}: {e}") from e
    known = {"net": _NET_KEYS, "optimizer": _OPT_KEYS, "data": _DATA_KEYS, "train": _TRAIN_KEYS}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"{where}: unknown section [{name}]")
        extra = set(cp[name]) - known[name]
        if extra:
            raise ConfigError(f"{where}: unknown keys in [{name}]: {sorted(extra)}")
    if "net" not in cp:
        raise ConfigError(f"{where}: missing [net] section")

    net = cp["net"]
    kw = {}
    if "preset" in net:
        if net["preset"] not in PRESETS:
            raise ConfigError(f"{where}: unknown preset {net['preset']!r}; choose from {sorted(PRESETS)}")
        kw.update(PRESETS[net["preset"]])
    conv = {"input_shape": _ints, "split_factor": int, "blocks": int, "downsample_at": _ints,
            "downsample_factor": int, "num_classes": int, "bottleneck_ratio": int,
            "pad_to": lambda s: int(s) if s.strip() else None}
    for key, fn in conv.items():
        if key in net:
            kw["n_blocks" if key == "blocks" else key] = _get(net, key, fn, where)
    missing = {"input_shape", "split_factor", "n_blocks"} - set(kw)
    if missing:
        raise ConfigError(f"{where}: [net] needs a preset or keys {sorted(missing)}")
    net_cfg = make_config(**kw)

    opt = cp["optimizer"] if "optimizer" in cp else {}
    optim = OptimState(
        lr=_get(opt, "lr", float, where) if "lr" in opt else 0.1,
        momentum=_get(opt, "momentum", float, where) if "momentum" in opt else 0.9,
        weight_decay=_get(opt, "weight_decay", float, where) if "weight_decay" in opt else 1e-4,
        milestones=_get(opt, "milestones", _ints, where) if "milestones" in opt else (),
        lr_drop=_get(opt, "lr_drop", float, where) if "lr_drop" in opt else 0.1,
    )

    tr = cp["train"] if "train" in cp else {}
    settings = TrainSettings()
    for key in ("epochs", "batch_size", "augment_pad", "checkpoint_every"):
        if key in tr:
            setattr(settings, key, _get(tr, key, int, where))
    if "augment" in tr:
        if tr["augment"] not in ("none", "crop", "flip+crop"):
            raise ConfigError(f"{where}: augment must be none, crop or flip+crop")
        settings.augment = tr["augment"]
    if "backward" in tr:
        if tr["backward"] not in ("o1", "stored"):
            raise ConfigError(f"{where}: backward must be o1 or stored")
        settings.backward = tr["backward"]
    if settings.epochs < 1 or settings.batch_size < 1:
        raise ConfigError(f"{where}: epochs and batch_size must be positive")

    data = cp["data"] if "data" in cp else {}
    source = data.get("source", "mnist_idx")
    if source not in SOURCES:
        raise ConfigError(f"{where}: data source must be one of {SOURCES}")
    path = data.get("path") or None
    raw = {s: dict(cp[s]) for s in cp.sections()}
    return Experiment(net_cfg, optim, settings, source, path, raw)


def load_config(path) -> Experiment:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))
