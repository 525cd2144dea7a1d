"""Invertible building blocks: space-to-depth permutation, channel split and
merge, zero-padding embedding, and the additive coupling block.

The coupling block maps a pair ``(x, xt)`` to ``(S xt, S (x + F xt))``
where ``S`` is either the identity or the space-to-depth permutation. It is
invertible for any residual ``F`` because ``F`` is only ever evaluated in
the forward direction.

A residual is any object exposing::

    apply(x, mode, stats) -> (y, stats)
    forward_cached(x, mode, stats) -> (y, cache, stats)
    backward(g, cache, batch_stats) -> (dx, grads)
    tangent(x, v, mode, stats) -> (y, dy)

:class:`irevnet.bottleneck.Bottleneck` is the one used by the networks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, NamedTuple, Optional

import numpy as np

from .errors import ReplayError, ShapeError
from .ops import check_same_dtype, check_tensor


class SplitPair(NamedTuple):
    left: np.ndarray
    right: np.ndarray


@dataclass(frozen=True)
class DownsampleSpec:
    factor: int = 2

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError(f"downsample factor must be positive, got {self.factor}")


@dataclass
class CouplingSpec:
    residual: Any
    downsample: Optional[DownsampleSpec] = None

    @property
    def factor(self) -> int:
        return 1 if self.downsample is None else self.downsample.factor


def psi_downsample(x: np.ndarray, f: int) -> np.ndarray:
    """Space-to-depth: (N, C, H, W) -> (N, C*f*f, H/f, W/f).

    Output channel ``c*f*f + (row % f)*f + (col % f)`` holds input channel
    ``c`` at the pixels with that row/column phase.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    if f < 1 or h % f or w % f:
        raise ShapeError(f"psi_downsample: H={h}, W={w} not divisible by f={f}")
    if f == 1:
        return x.copy()
    y = x.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y).reshape(n, c * f * f, h // f, w // f)


def psi_inverse(y: np.ndarray, f: int) -> np.ndarray:
    """Depth-to-space, the exact inverse of :func:`psi_downsample`."""
    check_tensor(y)
    n, c, h, w = y.shape
    if f < 1 or c % (f * f):
        raise ShapeError(f"psi_inverse: C={c} not divisible by f^2={f * f}")
    if f == 1:
        return y.copy()
    x = y.reshape(n, c // (f * f), f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x).reshape(n, c // (f * f), h * f, w * f)


def channel_split(x: np.ndarray) -> SplitPair:
    check_tensor(x)
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"channel_split needs an even channel count, got {c} in {x.shape}")
    return SplitPair(x[:, :c // 2].copy(), x[:, c // 2:].copy())


def channel_merge(p: SplitPair) -> np.ndarray:
    if p.left.shape != p.right.shape:
        raise ShapeError(f"channel_merge: unequal halves {p.left.shape} vs {p.right.shape}")
    check_same_dtype(p.left, p.right)
    return np.concatenate([p.left, p.right], axis=1)


def injective_pad(x: np.ndarray, c_out: int) -> np.ndarray:
    """Append zero channels up to ``c_out``."""
    check_tensor(x)
    n, c, h, w = x.shape
    if c_out < c:
        raise ShapeError(f"injective_pad: c_out={c_out} < C={c} would not be injective")
    y = np.zeros((n, c_out, h, w), dtype=x.dtype)
    y[:, :c] = x
    return y


def pad_pseudo_inverse(y: np.ndarray, c_in: int) -> np.ndarray:
    """Left inverse of :func:`injective_pad` (also its adjoint): keep the first ``c_in`` channels."""
    check_tensor(y)
    if c_in > y.shape[1]:
        raise ShapeError(f"pad_pseudo_inverse: c_in={c_in} exceeds C={y.shape[1]}")
    return y[:, :c_in].copy()


# ---------------------------------------------------------------------------
# additive coupling


def _check_pair(p: SplitPair) -> None:
    check_tensor(p.left, "left")
    check_tensor(p.right, "right")
    if p.left.shape != p.right.shape:
        raise ShapeError(f"SplitPair halves differ: {p.left.shape} vs {p.right.shape}")


def _down(p: SplitPair, f: int) -> SplitPair:
    if f == 1:
        return p
    return SplitPair(psi_downsample(p.left, f), psi_downsample(p.right, f))


def _up(p: SplitPair, f: int) -> SplitPair:
    if f == 1:
        return p
    return SplitPair(psi_inverse(p.left, f), psi_inverse(p.right, f))


def _replay_mode(spec: CouplingSpec, mode: str, stats):
    if mode in ("train", "replay"):
        if stats is None and getattr(spec.residual, "has_batch_norm", False):
            raise ReplayError("train-mode reproduction needs the captured BN stats of this block")
        return "replay"
    return mode


def coupling_forward(p: SplitPair, spec: CouplingSpec, mode: str = "eval", stats=None,
                     keep_cache: bool = False):
    """``(x, xt) -> (S xt, S (x + F xt))``; returns ``(pair, captured_stats)``.

    With ``keep_cache`` the residual's forward cache is appended to the result.
    """
    _check_pair(p)
    x, xt = p
    if keep_cache:
        fx, cache, captured = spec.residual.forward_cached(xt, mode, stats)
    else:
        fx, captured = spec.residual.apply(xt, mode, stats)
    if fx.shape != x.shape:
        raise ShapeError(f"residual output {fx.shape} does not match stream shape {x.shape}")
    out = _down(SplitPair(xt, x + fx), spec.factor)
    return (out, captured, cache) if keep_cache else (out, captured)


def coupling_inverse(q: SplitPair, spec: CouplingSpec, mode: str = "eval", stats=None) -> SplitPair:
    """Undo :func:`coupling_forward`: ``xt = S^-1 y1`` then ``x = S^-1 y2 - F xt``.

    ``mode="replay"`` (or ``"train"``) evaluates ``F`` with the BN stats
    captured by the train-mode forward pass.
    """
    _check_pair(q)
    mode = _replay_mode(spec, mode, stats)
    xt, b = _up(q, spec.factor)
    fx, _ = spec.residual.apply(xt, mode, stats)
    return SplitPair(b - fx, xt)


def coupling_backward(g: SplitPair, xt: np.ndarray, spec: CouplingSpec, *,
                      batch_stats: bool, mode: str = "eval", stats=None, cache=None):
    """Pull an output cotangent back through one coupling block.

    ``xt`` is the block's right input; ``cache`` is the residual's forward
    cache if it was kept, otherwise it is recomputed here. Returns
    ``(input_cotangent_pair, residual_param_grads)``.
    """
    ga, gb = _up(g, spec.factor)
    if cache is None:
        _, cache, _ = spec.residual.forward_cached(xt, mode, stats)
    dxt, grads = spec.residual.backward(gb, cache, batch_stats)
    return SplitPair(gb, ga + dxt), grads


def coupling_tangent(p: SplitPair, v: SplitPair, spec: CouplingSpec,
                     mode: str = "eval", stats=None):
    """Forward-mode derivative with frozen BN statistics: ``(out_pair, out_tangent)``."""
    x, xt = p
    vx, vxt = v
    fx, dfx = spec.residual.tangent(xt, vxt, mode, stats)
    f = spec.factor
    return _down(SplitPair(xt, x + fx), f), _down(SplitPair(vxt, vx + dfx), f)
