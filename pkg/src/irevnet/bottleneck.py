"""The residual function used inside every coupling block.

Three convolutions (1x1, 3x3, 1x1), each preceded by batch normalization
and ReLU. The middle layer is ``ratio`` times narrower than the stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import (
    BNParams,
    ConvParams,
    batch_norm,
    batch_norm_backward,
    batch_norm_tangent,
    conv2d,
    conv2d_backward,
    conv2d_linear,
    relu,
    relu_mask,
)

LAYERS = ("1", "2", "3")


def middle_channels(channels: int, ratio: int = 4) -> int:
    # streams narrower than `ratio` still get a one-channel bottleneck
    return max(1, math.ceil(channels / ratio))


# the last convolution of F starts small so that F is a mild perturbation and
# the f32 inverse stays accurate through deep stacks
RESIDUAL_OUT_GAIN = 0.1


def he_normal(rng: np.random.Generator, shape, dtype, gain: float = 1.0) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * (gain * math.sqrt(2.0 / fan_in))).astype(dtype)


@dataclass
class Bottleneck:
    bn1: BNParams
    conv1: ConvParams
    bn2: BNParams
    conv2: ConvParams
    bn3: BNParams
    conv3: ConvParams
    # test hook: False replaces every ReLU with the identity
    nonlinear: bool = True

    has_batch_norm = True

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, ratio: int = 4,
             dtype=np.float32) -> "Bottleneck":
        mid = middle_channels(channels, ratio)
        return cls(
            bn1=BNParams.fresh(channels, dtype),
            conv1=ConvParams(he_normal(rng, (mid, channels, 1, 1), dtype)),
            bn2=BNParams.fresh(mid, dtype),
            conv2=ConvParams(he_normal(rng, (mid, mid, 3, 3), dtype)),
            bn3=BNParams.fresh(mid, dtype),
            conv3=ConvParams(he_normal(rng, (channels, mid, 1, 1), dtype, RESIDUAL_OUT_GAIN)),
        )

    @property
    def channels(self) -> int:
        return self.conv1.weight.shape[1]

    def layers(self):
        return [(self.bn1, self.conv1), (self.bn2, self.conv2), (self.bn3, self.conv3)]

    def parameters(self) -> dict:
        """Trainable arrays (live references) keyed by local name."""
        out = {}
        for tag, (bn, conv) in zip(LAYERS, self.layers()):
            out[f"bn{tag}.gamma"] = bn.gamma
            out[f"bn{tag}.beta"] = bn.beta
            out[f"conv{tag}.weight"] = conv.weight
            if conv.bias is not None:
                out[f"conv{tag}.bias"] = conv.bias
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        layer, attr = name.split(".")
        setattr(getattr(self, layer), attr, value)

    def buffers(self) -> dict:
        out = {}
        for tag, (bn, _) in zip(LAYERS, self.layers()):
            out[f"bn{tag}.running_mean"] = bn.running_mean
            out[f"bn{tag}.running_var"] = bn.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self.set_parameter(name, value)

    # -- evaluation ---------------------------------------------------------

    def forward_cached(self, x: np.ndarray, mode: str = "eval", stats=None):
        """Run F and keep what the backward pass needs.

        Returns ``(y, cache, captured_stats)``; ``captured_stats`` is a list of
        three :class:`BNBatchStats` in train mode and ``None`` otherwise.
        """
        captured = [] if mode == "train" else None
        cache = []
        h = x
        for i, (bn, conv) in enumerate(self.layers()):
            st = stats[i] if (mode == "replay" and stats is not None) else None
            hb, s = batch_norm(h, bn, mode, st)
            if mode == "train":
                mean, var = s.mean, s.var
                captured.append(s)
            elif mode == "replay":
                mean, var = st.mean, st.var
            else:
                mean, var = bn.running_mean, bn.running_var
            cache.append((h, hb, mean, var))
            h = conv2d(relu(hb) if self.nonlinear else hb, conv)
        return h, cache, captured

    def apply(self, x: np.ndarray, mode: str = "eval", stats=None):
        y, _, captured = self.forward_cached(x, mode, stats)
        return y, captured

    def backward(self, g: np.ndarray, cache, batch_stats: bool):
        """Cotangent of the input and parameter gradients for one F evaluation."""
        grads = {}
        for tag, (bn, conv), (h, hb, mean, var) in reversed(
                list(zip(LAYERS, self.layers(), cache))):
            a = relu(hb) if self.nonlinear else hb
            ga, dw, db = conv2d_backward(g, a, conv)
            grads[f"conv{tag}.weight"] = dw
            if db is not None:
                grads[f"conv{tag}.bias"] = db
            if self.nonlinear:
                ga = ga * relu_mask(hb)
            g, dgamma, dbeta = batch_norm_backward(ga, h, bn, mean, var, batch_stats)
            grads[f"bn{tag}.gamma"] = dgamma
            grads[f"bn{tag}.beta"] = dbeta
        return g, grads

    def tangent(self, x: np.ndarray, v: np.ndarray, mode: str = "eval", stats=None):
        """Value and directional derivative of F at ``x`` along ``v`` (frozen BN stats)."""
        if mode not in ("eval", "replay"):
            raise ValueError(f"tangent needs frozen BN statistics, got mode {mode!r}")
        h, dh = x, v
        for i, (bn, conv) in enumerate(self.layers()):
            if mode == "replay":
                mean, var = stats[i].mean, stats[i].var
                hb, _ = batch_norm(h, bn, "replay", stats[i])
            else:
                mean, var = bn.running_mean, bn.running_var
                hb, _ = batch_norm(h, bn, "eval")
            dhb = batch_norm_tangent(dh, bn, mean, var)
            if self.nonlinear:
                dhb = dhb * relu_mask(hb)
                hb = relu(hb)
            h, dh = conv2d(hb, conv), conv2d_linear(dhb, conv)
        return h, dh

    def astype(self, dtype) -> "Bottleneck":
        def bn_cast(bn: BNParams) -> BNParams:
            return BNParams(bn.gamma.astype(dtype), bn.beta.astype(dtype),
                            bn.running_mean.astype(dtype), bn.running_var.astype(dtype),
                            bn.eps, bn.momentum)

        def conv_cast(c: ConvParams) -> ConvParams:
            bias = None if c.bias is None else c.bias.astype(dtype)
            return ConvParams(c.weight.astype(dtype), bias)

        return Bottleneck(bn_cast(self.bn1), conv_cast(self.conv1), bn_cast(self.bn2),
                          conv_cast(self.conv2), bn_cast(self.bn3), conv_cast(self.conv3),
                          self.nonlinear)
