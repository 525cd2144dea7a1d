"""Gradients, optimizer and the training loop.

Two backward passes produce identical gradients:

* :func:`backward_stored` keeps every block input and residual cache from
  the forward pass (the textbook approach, memory linear in depth);
* :func:`backward_o1` keeps only the final pair and the per-block batch-norm
  statistics, rebuilding each block input from its output with the exact
  inverse during the backward sweep.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .invertible import (
    SplitPair,
    channel_merge,
    channel_split,
    coupling_backward,
    coupling_forward,
    coupling_inverse,
)
from .network import IRevNet
from .ops import global_avg_pool, global_avg_pool_backward, relu

log = logging.getLogger(__name__)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1
    return float(loss), (d / n).astype(logits.dtype)


class ActivationMeter:
    """Counts array elements retained between the forward and backward sweeps."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def retain(self, *arrays) -> int:
        n = sum(_count(a) for a in arrays)
        self.current += n
        self.peak = max(self.peak, self.current)
        return n

    def release(self, n: int) -> None:
        self.current -= n


def _count(obj) -> int:
    if obj is None:
        return 0
    if isinstance(obj, np.ndarray):
        return obj.size
    if isinstance(obj, (list, tuple)):
        return sum(_count(o) for o in obj)
    return 0


def _cache_arrays(cache):
    # residual caches hold (input, bn_output, mean, var) per layer; mean/var are O(C)
    return [(h, hb) for h, hb, _, _ in cache]


def _head_forward_backward(net: IRevNet, merged: np.ndarray, labels: np.ndarray):
    pooled = global_avg_pool(merged)[:, :, 0, 0]
    h = relu(pooled)
    logits = h @ net.head_weight.T + net.head_bias
    loss, dlogits = cross_entropy(logits, labels)
    grads = {"head.weight": dlogits.T @ h, "head.bias": dlogits.sum(axis=0)}
    dpooled = (dlogits @ net.head_weight) * (pooled > 0)
    g_merged = global_avg_pool_backward(dpooled[:, :, None, None], merged.shape)
    return loss, logits, grads, g_merged


def _collect(net: IRevNet, block_grads: Dict[int, dict], head_grads: dict) -> Dict[str, np.ndarray]:
    """Order gradients exactly like ``net.parameters()``."""
    flat = dict(head_grads)
    for j, g in block_grads.items():
        for name, arr in g.items():
            flat[f"blocks.{j}.{name}"] = arr
    return {name: flat[name] for name in net.parameters()}


@dataclass
class StepResult:
    loss: float
    grads: Dict[str, np.ndarray]
    logits: np.ndarray
    input_grad: Optional[np.ndarray] = None
    meter: Optional[ActivationMeter] = None


def backward_stored(net: IRevNet, x: np.ndarray, labels: np.ndarray,
                    meter: Optional[ActivationMeter] = None) -> StepResult:
    """Train-mode forward keeping every block input, then reverse-mode sweep."""
    meter = meter or ActivationMeter()
    pair = net.split(x)
    records = []
    for spec in net.blocks:
        xt = pair.right
        nxt, stats, cache = coupling_forward(pair, spec, "train", keep_cache=True)
        meter.retain(pair, _cache_arrays(cache))
        records.append((xt, cache))
        pair = nxt
    meter.retain(pair)
    merged = channel_merge(pair)
    loss, logits, head_grads, g_merged = _head_forward_backward(net, merged, labels)
    g = channel_split(g_merged)
    block_grads = {}
    for j in range(net.depth, 0, -1):
        xt, cache = records[j - 1]
        g, block_grads[j] = coupling_backward(g, xt, net.blocks[j - 1], batch_stats=True,
                                              cache=cache)
    return StepResult(loss, _collect(net, block_grads, head_grads), logits,
                      net.unsplit(g), meter)


def backward_o1(net: IRevNet, x: np.ndarray, labels: np.ndarray,
                meter: Optional[ActivationMeter] = None,
                check: Optional[Callable[[int, SplitPair], None]] = None) -> StepResult:
    """Train-mode forward keeping only the output pair; block inputs are rebuilt on the way back.

    ``check(j, pair)`` is called with every reconstructed block input (test hook).
    """
    meter = meter or ActivationMeter()
    pair = net.split(x)
    replay = []
    for spec in net.blocks:
        pair, stats = coupling_forward(pair, spec, "train")
        replay.append(stats)
    held = meter.retain(pair)
    merged = channel_merge(pair)
    loss, logits, head_grads, g_merged = _head_forward_backward(net, merged, labels)
    g = channel_split(g_merged)
    block_grads = {}
    for j in range(net.depth, 0, -1):
        spec, stats = net.blocks[j - 1], replay[j - 1]
        prev = coupling_inverse(pair, spec, "replay", stats)
        _, cache, _ = spec.residual.forward_cached(prev.right, "replay", stats)
        n_prev = meter.retain(prev)
        n_cache = meter.retain(_cache_arrays(cache))
        if check is not None:
            check(j, prev)
        g, block_grads[j] = coupling_backward(g, prev.right, spec, batch_stats=True, cache=cache)
        # the output pair and this block's cache die here; only its input survives
        meter.release(held + n_cache)
        held = n_prev
        pair = prev
    return StepResult(loss, _collect(net, block_grads, head_grads), logits,
                      net.unsplit(g), meter)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Sequence[int] = ()
    lr_drop: float = 0.1
    step: int = 0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        drops = sum(1 for m in self.milestones if step >= m)
        return self.lr * self.lr_drop ** drops


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             state: OptimState) -> OptimState:
    """Heavy-ball SGD with L2 weight decay, updating ``params`` in place.

    ``v <- momentum * v + g + weight_decay * w``; ``w <- w - lr * v``.
    """
    lr = state.lr_at(state.step)
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(w)
        v = state.momentum * v + g + state.weight_decay * w
        state.buffers[name] = v.astype(w.dtype, copy=False)
        w -= (lr * state.buffers[name]).astype(w.dtype, copy=False)
    state.step += 1
    return state


# ---------------------------------------------------------------------------
# training loop


def augment_batch(x: np.ndarray, rng: np.random.Generator, kind: str = "none",
                  pad: int = 4) -> np.ndarray:
    """Random pad-and-crop (``"crop"``), plus horizontal flips (``"flip+crop"``), or nothing."""
    if kind == "none":
        return x
    if kind not in ("flip+crop", "crop"):
        raise ValueError(f"unknown augmentation {kind!r}")
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    if kind == "crop":
        flip[:] = False
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i in range(n):
        dy, dx = offs[i]
        crop = xp[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


LOG_COLUMNS = ("iteration", "lr", "loss", "minibatch_accuracy")


@dataclass
class TrainSettings:
    epochs: int = 1
    batch_size: int = 64
    augment: str = "none"
    augment_pad: int = 4
    backward: str = "o1"  # or "stored"
    checkpoint_every: int = 0
    max_steps: Optional[int] = None


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for global iteration ``step``; epoch order depends only on (seed, epoch)."""
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ValueError(f"dataset of {n} samples is smaller than one batch of {batch_size}")
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]


def _trim_log(path, step: int) -> None:
    # drop rows logged after the checkpoint being resumed from
    try:
        with open(path, newline="") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        lines = [",".join(LOG_COLUMNS) + "\n"]
    keep = [ln for i, ln in enumerate(lines) if i == 0 or int(ln.split(",", 1)[0]) < step]
    with open(path, "w", newline="") as fh:
        fh.writelines(keep)


def train_loop(net: IRevNet, images: np.ndarray, labels: np.ndarray, settings: TrainSettings,
               state: OptimState, seed: int = 0, log_path=None,
               on_checkpoint: Optional[Callable[[IRevNet, OptimState], None]] = None,
               on_step: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Train from ``state.step`` up to ``epochs`` full passes; returns the log rows.

    Batches and augmentation draw from generators keyed on ``(seed, epoch)``
    and ``(seed, step)``, so resuming at any step replays the same stream.
    """
    if len(images) == 0:
        raise ValueError("training set is empty")
    backward = {"o1": backward_o1, "stored": backward_stored}[settings.backward]
    per_epoch = len(images) // settings.batch_size
    total = settings.epochs * per_epoch
    if settings.max_steps is not None:
        total = min(total, settings.max_steps)
    rows = []
    fh = writer = None
    if log_path is not None:
        new = state.step == 0
        if not new:
            _trim_log(log_path, state.step)
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(LOG_COLUMNS)
    try:
        while state.step < total:
            step = state.step
            idx = batch_indices(len(images), settings.batch_size, seed, step)
            xb = augment_batch(images[idx], np.random.default_rng([seed, step, 1]),
                               settings.augment, settings.augment_pad).astype(net.dtype, copy=False)
            yb = labels[idx]
            res = backward(net, xb, yb)
            lr = state.lr_at(step)
            sgd_step(net.parameters(), res.grads, state)
            acc = float((res.logits.argmax(axis=1) == yb).mean())
            row = {"iteration": step, "lr": lr, "loss": res.loss, "minibatch_accuracy": acc}
            rows.append(row)
            if writer is not None:
                writer.writerow([step, repr(lr), repr(res.loss), repr(acc)])
            if on_step is not None:
                on_step(row)
            if step % 50 == 0:
                log.info("step %d lr %.4g loss %.4f acc %.3f", step, lr, res.loss, acc)
            if (on_checkpoint is not None and settings.checkpoint_every
                    and state.step % settings.checkpoint_every == 0):
                on_checkpoint(net, state)
    finally:
        if fh is not None:
            fh.close()
    if on_checkpoint is not None:
        on_checkpoint(net, state)
    return rows


def evaluate(net: IRevNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 250) -> float:
    preds = net.predict(images.astype(net.dtype, copy=False), batch_size)
    return float((preds == labels).mean())
