"""Stacking coupling blocks into a full i-RevNet and its classifier head."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .bottleneck import Bottleneck, he_normal
from .errors import ConfigError, ReplayError, ShapeError
from .invertible import (
    CouplingSpec,
    DownsampleSpec,
    SplitPair,
    channel_merge,
    channel_split,
    coupling_forward,
    coupling_inverse,
    injective_pad,
    pad_pseudo_inverse,
    psi_downsample,
    psi_inverse,
)
from .ops import as_dtype, check_tensor, global_avg_pool, linear, relu


@dataclass(frozen=True)
class BlockSpec:
    downsample: int = 1  # 1 = identity S, f > 1 = space-to-depth by f
    channels_out: int = 0  # total channels of the merged pair after this block


@dataclass(frozen=True)
class NetConfig:
    input_shape: Tuple[int, int, int]
    split_factor: int
    blocks: Tuple[BlockSpec, ...]
    num_classes: int
    pad_to: Optional[int] = None  # None = bijective split
    bottleneck_ratio: int = 4

    @property
    def bijective(self) -> bool:
        return self.pad_to is None

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def split_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.input_shape
        f = self.split_factor
        return (self.pad_to or c * f * f, h // f, w // f)

    def shapes(self) -> List[Tuple[int, int, int]]:
        """Merged (C, H, W) at every depth 0..J, after validating the config."""
        c, h, w = self.input_shape
        f = self.split_factor
        problems = []
        if f < 1 or h % f or w % f:
            raise ConfigError(f"split factor {f} does not divide input {h}x{w}")
        c0 = c * f * f
        if self.pad_to is not None and self.pad_to < c0:
            raise ConfigError(f"pad_to={self.pad_to} < {c0} channels after the split")
        cur = self.split_shape()
        if cur[0] % 2:
            raise ConfigError(f"channel count {cur[0]} after the split is odd")
        out = [cur]
        for j, b in enumerate(self.blocks, start=1):
            cc, hh, ww = cur
            if b.downsample > 1:
                fd = b.downsample
                if hh % fd or ww % fd:
                    problems.append(f"block {j}: spatial {hh}x{ww} not divisible by {fd}")
                    break
                cur = (cc * fd * fd, hh // fd, ww // fd)
            if b.channels_out != cur[0]:
                problems.append(
                    f"block {j}: channels_out={b.channels_out} but coefficient count "
                    f"requires {cur[0]}")
            out.append(cur)
        if problems:
            raise ConfigError("; ".join(problems))
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "split_factor": self.split_factor,
            "pad_to": self.pad_to,
            "num_classes": self.num_classes,
            "bottleneck_ratio": self.bottleneck_ratio,
            "blocks": [[b.downsample, b.channels_out] for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        try:
            return cls(
                input_shape=tuple(int(v) for v in d["input_shape"]),
                split_factor=int(d["split_factor"]),
                pad_to=None if d.get("pad_to") is None else int(d["pad_to"]),
                num_classes=int(d["num_classes"]),
                bottleneck_ratio=int(d.get("bottleneck_ratio", 4)),
                blocks=tuple(BlockSpec(int(a), int(b)) for a, b in d["blocks"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed network config: {e}") from e


def make_config(input_shape: Sequence[int], split_factor: int, n_blocks: int,
                downsample_at: Iterable[int] = (), num_classes: int = 10,
                pad_to: Optional[int] = None, downsample_factor: int = 2,
                bottleneck_ratio: int = 4) -> NetConfig:
    """Build a NetConfig from the usual knobs; ``downsample_at`` is 1-based block indices."""
    ds = set(downsample_at)
    if any(j < 1 or j > n_blocks for j in ds):
        raise ConfigError(f"downsample_at {sorted(ds)} outside blocks 1..{n_blocks}")
    c, h, w = input_shape
    channels = pad_to or c * split_factor ** 2
    blocks = []
    for j in range(1, n_blocks + 1):
        f = downsample_factor if j in ds else 1
        channels *= f * f
        blocks.append(BlockSpec(f, channels))
    cfg = NetConfig(tuple(input_shape), split_factor, tuple(blocks), num_classes,
                    pad_to, bottleneck_ratio)
    cfg.shapes()
    return cfg


PRESETS = {
    # desk-scale analogue of the bijective model: 12x16x16 -> ... -> 768x2x2
    "tiny-b": dict(input_shape=(3, 32, 32), split_factor=2, n_blocks=16,
                   downsample_at=(5, 9, 13)),
    # injective variant: 12 channels after the split zero-padded to 24
    "tiny-a": dict(input_shape=(3, 32, 32), split_factor=2, n_blocks=16,
                   downsample_at=(5, 9, 13), pad_to=24),
    # ImageNet-scale models; per-stream widths 24/96/384/1536 and 48/192/768/3072
    "paper-b": dict(input_shape=(3, 224, 224), split_factor=2, n_blocks=100,
                    downsample_at=(1, 7, 23, 95), num_classes=1000),
    "paper-a": dict(input_shape=(3, 224, 224), split_factor=4, n_blocks=18,
                    downsample_at=(5, 9, 15), pad_to=96, num_classes=1000),
}


def preset(name: str, **overrides) -> NetConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return make_config(**kw)


@dataclass
class Features:
    pair: SplitPair
    merged: np.ndarray
    bn_replay: Optional[list] = None
    taps: Dict[int, np.ndarray] = field(default_factory=dict)


class IRevNet:
    """An i-RevNet: split operator, coupling blocks, merge, and a linear head.

    ``forward``/``inverse`` cover the invertible part; ``classify`` adds the
    non-invertible head (average pool, ReLU, linear).
    """

    def __init__(self, config: NetConfig, blocks: List[CouplingSpec],
                 head_weight: np.ndarray, head_bias: np.ndarray):
        self.config = config
        self.blocks = blocks
        self.head_weight = head_weight
        self.head_bias = head_bias

    @property
    def dtype(self) -> np.dtype:
        return self.head_weight.dtype

    @property
    def depth(self) -> int:
        return len(self.blocks)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> Dict[str, np.ndarray]:
        """Every trainable array, in a fixed enumeration order (live references)."""
        out = {}
        for j, spec in enumerate(self.blocks, start=1):
            for name, arr in spec.residual.parameters().items():
                out[f"blocks.{j}.{name}"] = arr
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "head.weight":
            self.head_weight = value
        elif name == "head.bias":
            self.head_bias = value
        else:
            _, j, local = name.split(".", 2)
            self.blocks[int(j) - 1].residual.set_parameter(local, value)

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for j, spec in enumerate(self.blocks, start=1):
            for name, arr in spec.residual.buffers().items():
                out[f"blocks.{j}.{name}"] = arr
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        _, j, local = name.split(".", 2)
        self.blocks[int(j) - 1].residual.set_buffer(local, value)

    def astype(self, dtype) -> "IRevNet":
        dtype = as_dtype(dtype)
        blocks = [CouplingSpec(s.residual.astype(dtype), s.downsample) for s in self.blocks]
        return IRevNet(self.config, blocks, self.head_weight.astype(dtype),
                       self.head_bias.astype(dtype))

    def truncated(self, depth: int) -> "IRevNet":
        """The sub-network Phi_j sharing this network's parameters."""
        cfg = replace(self.config, blocks=self.config.blocks[:depth])
        return IRevNet(cfg, self.blocks[:depth], self.head_weight, self.head_bias)

    # -- test hooks ---------------------------------------------------------

    def zero_residuals(self) -> None:
        """Make every F identically zero, leaving a pure permutation network."""
        for spec in self.blocks:
            spec.residual.conv3.weight[...] = 0

    def set_nonlinear(self, flag: bool) -> None:
        for spec in self.blocks:
            spec.residual.nonlinear = flag

    # -- split / merge ------------------------------------------------------

    def split(self, x: np.ndarray) -> SplitPair:
        check_tensor(x)
        if tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match network input {self.config.input_shape}")
        y = psi_downsample(x, self.config.split_factor)
        if self.config.pad_to is not None:
            y = injective_pad(y, self.config.pad_to)
        return channel_split(y)

    def unsplit(self, p: SplitPair) -> np.ndarray:
        """Left inverse of :meth:`split`; also its adjoint, since split is a partial isometry."""
        y = channel_merge(p)
        c, _, _ = self.config.input_shape
        f = self.config.split_factor
        if self.config.pad_to is not None:
            y = pad_pseudo_inverse(y, c * f * f)
        return psi_inverse(y, f)

    # -- evaluation ---------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval", taps: Optional[Iterable[int]] = None,
                replay: Optional[list] = None) -> Features:
        """Compute Phi x. ``taps`` selects depths 0..J whose merged features are returned."""
        taps = set(taps or ())
        if any(t < 0 or t > self.depth for t in taps):
            raise ValueError(f"tap depths must lie in 0..{self.depth}, got {sorted(taps)}")
        if mode == "replay" and (replay is None or len(replay) != self.depth):
            raise ReplayError("replay-mode forward needs one captured stats entry per block")
        pair = self.split(x)
        tapped = {0: channel_merge(pair)} if 0 in taps else {}
        captured = [] if mode == "train" else None
        for j, spec in enumerate(self.blocks, start=1):
            st = replay[j - 1] if mode == "replay" else None
            pair, s = coupling_forward(pair, spec, mode, st)
            if captured is not None:
                captured.append(s)
            if j in taps:
                tapped[j] = channel_merge(pair)
        merged = channel_merge(pair)
        return Features(pair, merged, captured if mode == "train" else replay, tapped)

    def inverse(self, feats, mode: str = "eval", replay: Optional[list] = None) -> np.ndarray:
        """Phi^-1 (bijective) or the left inverse Phi^+ (injective).

        ``feats`` may be a :class:`Features`, a :class:`SplitPair` or a merged
        tensor. Features outside the range of an injective network are mapped
        to the pseudo-inverse value without complaint.
        """
        if isinstance(feats, Features):
            pair = feats.pair
            if replay is None and mode in ("train", "replay"):
                replay = feats.bn_replay
        elif isinstance(feats, SplitPair):
            pair = feats
        else:
            pair = channel_split(feats)
        if mode in ("train", "replay"):
            if replay is None or len(replay) != self.depth:
                raise ReplayError("train-mode inverse needs the captured BN stats of every block")
            mode = "replay"
        for j in range(self.depth, 0, -1):
            st = replay[j - 1] if mode == "replay" else None
            pair = coupling_inverse(pair, self.blocks[j - 1], mode, st)
        return self.unsplit(pair)

    def head(self, merged: np.ndarray) -> np.ndarray:
        pooled = global_avg_pool(merged)[:, :, 0, 0]
        return linear(relu(pooled), self.head_weight, self.head_bias)

    def classify(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        return self.head(self.forward(x, mode).merged)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.concatenate([
            self.classify(x[i:i + batch_size]).argmax(axis=1)
            for i in range(0, len(x), batch_size)
        ])


def build(config: NetConfig, seed: int = 0, dtype="f32") -> IRevNet:
    """Initialize a network: He-normal convolutions, unit BN, small head, zero head bias."""
    shapes = config.shapes()
    dtype = as_dtype(dtype)
    rng = np.random.default_rng(seed)
    blocks = []
    for j, b in enumerate(config.blocks):
        stream = shapes[j][0] // 2
        res = Bottleneck.init(rng, stream, config.bottleneck_ratio, dtype)
        ds = DownsampleSpec(b.downsample) if b.downsample > 1 else None
        blocks.append(CouplingSpec(res, ds))
    c_final = shapes[-1][0]
    head_w = he_normal(rng, (config.num_classes, c_final, 1, 1), dtype)[:, :, 0, 0]
    head_w = np.ascontiguousarray(head_w * np.sqrt(0.5)).astype(dtype)
    head_b = np.zeros(config.num_classes, dtype)
    return IRevNet(config, blocks, head_w, head_b)
