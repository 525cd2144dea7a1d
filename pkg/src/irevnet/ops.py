"""Dense NCHW tensor primitives and their hand-written adjoints.

Tensors are plain ``numpy.ndarray`` objects of shape ``(N, C, H, W)`` with
dtype float32 or float64. Every function here is pure with respect to its
array arguments; the only mutable state is the running statistics held in
:class:`BNParams`, updated by :func:`batch_norm` in ``"train"`` mode.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DTypeError, InsufficientStatisticsError, ReplayError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_dtype(name_or_dtype) -> np.dtype:
    if isinstance(name_or_dtype, str) and name_or_dtype in DTYPES:
        return np.dtype(DTYPES[name_or_dtype])
    dt = np.dtype(name_or_dtype)
    if dt not in (np.float32, np.float64):
        raise DTypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def check_tensor(x: np.ndarray, name: str = "x") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name} must be a 4-D (N, C, H, W) array, got shape {shape}")
    if x.dtype not in (np.float32, np.float64):
        raise DTypeError(f"{name} has dtype {x.dtype}; expected float32 or float64")


def check_same_dtype(*arrays: np.ndarray) -> None:
    dtypes = {a.dtype for a in arrays if a is not None}
    if len(dtypes) > 1:
        raise DTypeError(f"mixed dtypes in one call: {sorted(str(d) for d in dtypes)}")


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"conv kernel must be square and odd, got {kh}x{kw}")
        if self.stride != 1:
            raise ShapeError("only stride 1 is supported; downsampling is done by psi")
        if self.padding is None:
            self.padding = kh // 2
        if self.padding != kh // 2:
            raise ShapeError(f"padding {self.padding} is not same-padding for kernel {kh}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class BNBatchStats:
    mean: np.ndarray
    var: np.ndarray


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) with zero same-padding."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, k * k, h, w), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di * k + dj] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(n, c * k * k, h * w)


def _col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into an image."""
    n, c, h, w = shape
    p = k // 2
    cols = cols.reshape(n, c, k * k, h, w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + h, dj:dj + w] += cols[:, :, di * k + dj]
    return xp[:, :, p:p + h, p:p + w]


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-1, same-padded 2-D cross-correlation."""
    check_tensor(x)
    check_same_dtype(x, p.weight, p.bias)
    n, c, h, w = x.shape
    c_out, c_in, k, _ = p.weight.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d input shape {x.shape} does not match weight shape {p.weight.shape}")
    if k == 1:
        out = p.weight[:, :, 0, 0] @ x.reshape(n, c, h * w)
    else:
        out = p.weight.reshape(c_out, c_in * k * k) @ _im2col(x, k)
    out = out.reshape(n, c_out, h, w)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out


def conv2d_backward(g: np.ndarray, x: np.ndarray, p: ConvParams):
    """Return ``(dx, dweight, dbias)`` for ``conv2d(x, p)`` given output grad ``g``."""
    n, c, h, w = x.shape
    c_out, c_in, k, _ = p.weight.shape
    g2 = g.reshape(n, c_out, h * w)
    if k == 1:
        w2 = p.weight[:, :, 0, 0]
        dx = (w2.T @ g2).reshape(x.shape)
        dw = np.tensordot(g2, x.reshape(n, c, h * w), axes=([0, 2], [0, 2]))
        dw = dw.reshape(p.weight.shape)
    else:
        w2 = p.weight.reshape(c_out, c_in * k * k)
        dx = _col2im(w2.T @ g2, x.shape, k)
        dw = np.tensordot(g2, _im2col(x, k), axes=([0, 2], [0, 2])).reshape(p.weight.shape)
    db = g.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return dx, dw, db


def conv2d_linear(v: np.ndarray, p: ConvParams) -> np.ndarray:
    """The linear part of conv2d (bias dropped); used for forward-mode tangents."""
    if p.bias is None:
        return conv2d(v, p)
    return conv2d(v, ConvParams(p.weight, None))


# ---------------------------------------------------------------------------
# batch normalization


def _inv_std(p: BNParams, var: np.ndarray) -> np.ndarray:
    return (1.0 / np.sqrt(var + p.eps)).astype(p.gamma.dtype, copy=False)


def _bn_apply(x, p, mean, var):
    inv_std = _inv_std(p, var)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]


def batch_norm(x: np.ndarray, p: BNParams, mode: str = "train",
               stats: Optional[BNBatchStats] = None):
    """Batch normalization over (N, H, W) per channel.

    ``mode`` is one of ``"train"`` (minibatch statistics, running stats
    updated in place, captured stats returned), ``"eval"`` (running stats)
    or ``"replay"`` (the supplied ``stats`` used verbatim). Returns
    ``(y, stats_or_None)``.
    """
    check_tensor(x)
    check_same_dtype(x, p.gamma)
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"batch_norm input shape {x.shape} expects {p.channels} channels")
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise InsufficientStatisticsError(
                f"train-mode batch_norm needs N*H*W >= 2, got {m} for shape {x.shape}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        captured = BNBatchStats(mean, var)
        mom = p.momentum
        p.running_mean = ((1 - mom) * p.running_mean + mom * mean).astype(x.dtype)
        p.running_var = ((1 - mom) * p.running_var + mom * var * (m / (m - 1))).astype(x.dtype)
        return _bn_apply(x, p, mean, var), captured
    if mode == "eval":
        return _bn_apply(x, p, p.running_mean, p.running_var), None
    if mode == "replay":
        if stats is None:
            raise ReplayError("replay-mode batch_norm requires captured BNBatchStats")
        return _bn_apply(x, p, stats.mean, stats.var), None
    raise ValueError(f"unknown batch_norm mode {mode!r}")


def batch_norm_backward(g: np.ndarray, x: np.ndarray, p: BNParams,
                        mean: np.ndarray, var: np.ndarray, batch_stats: bool):
    """Return ``(dx, dgamma, dbeta)``.

    With ``batch_stats`` the mean/var are treated as functions of ``x`` (the
    train-mode derivative); otherwise they are constants and BN is affine.
    """
    inv_std = _inv_std(p, var)[None, :, None, None]
    xhat = (x - mean[None, :, None, None]) * inv_std
    dbeta = g.sum(axis=(0, 2, 3))
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dxhat = g * p.gamma[None, :, None, None]
    if not batch_stats:
        return dxhat * inv_std, dgamma, dbeta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def batch_norm_tangent(v: np.ndarray, p: BNParams, mean, var) -> np.ndarray:
    """Directional derivative of BN with frozen statistics."""
    inv_std = _inv_std(p, var)
    return v * (p.gamma * inv_std)[None, :, None, None]


# ---------------------------------------------------------------------------
# pointwise, pooling, linear


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_mask(x: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return x > 0


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeError(f"global_avg_pool on empty spatial extent {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(g: np.ndarray, shape: tuple) -> np.ndarray:
    h, w = shape[2], shape[3]
    return np.broadcast_to(g / (h * w), shape).astype(g.dtype, copy=True)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight.T + bias`` for ``x`` of shape (N, D) and weight (K, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    check_same_dtype(x, weight, bias)
    return x @ weight.T + bias
