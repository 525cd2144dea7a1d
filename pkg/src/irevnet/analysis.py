"""Measurements on a network: reconstruction error, Jacobian spectrum,
feature-space interpolation, per-depth probes and PCA-subspace probes.

Everything here is read-only on the network. Derivatives are taken in
``"eval"`` mode (frozen running BN statistics) unless stated otherwise, and
the ReLU derivative at exactly zero is 0.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import atomic_write
from .invertible import channel_merge, channel_split, coupling_backward, coupling_forward, coupling_tangent
from .network import IRevNet

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# reconstruction


def relative_errors(net: IRevNet, x: np.ndarray, batch_size: int = 128,
                    mode: str = "eval") -> np.ndarray:
    """Per-sample ``||x - inv(fwd(x))|| / ||x||``; NaN where ``||x|| == 0``."""
    out = []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size].astype(net.dtype, copy=False)
        feats = net.forward(xb, mode)
        xr = net.inverse(feats, mode)
        num = np.linalg.norm((xb - xr).reshape(len(xb), -1).astype(np.float64), axis=1)
        den = np.linalg.norm(xb.reshape(len(xb), -1).astype(np.float64), axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out.append(np.where(den > 0, num / np.where(den > 0, den, 1), np.nan))
    return np.concatenate(out) if out else np.zeros(0)


def reconstruction_error(net: IRevNet, x: np.ndarray, batch_size: int = 128,
                         mode: str = "eval") -> float:
    """Mean relative reconstruction error over the samples with nonzero norm."""
    errs = relative_errors(net, x, batch_size, mode)
    zero = np.isnan(errs)
    if zero.any():
        log.warning("skipping %d zero-norm samples in reconstruction_error", int(zero.sum()))
    if zero.all():
        raise ValueError("no sample with nonzero norm")
    return float(errs[~zero].mean())


# ---------------------------------------------------------------------------
# derivatives


def _sub(net: IRevNet, depth: Optional[int]) -> IRevNet:
    return net if depth is None else net.truncated(depth)


def jvp(net: IRevNet, x: np.ndarray, v: np.ndarray, depth: Optional[int] = None,
        mode: str = "eval", replay=None) -> np.ndarray:
    """Directional derivative of the merged features at ``depth`` along ``v``."""
    sub = _sub(net, depth)
    pair, tan = sub.split(x), sub.split(v)
    for j, spec in enumerate(sub.blocks):
        st = replay[j] if mode == "replay" else None
        pair, tan = coupling_tangent(pair, tan, spec, mode, st)
    return channel_merge(tan)


def vjp(net: IRevNet, x: np.ndarray, u: np.ndarray, depth: Optional[int] = None,
        mode: str = "eval", replay=None) -> np.ndarray:
    """Transposed Jacobian of the merged features at ``depth`` applied to ``u``."""
    sub = _sub(net, depth)
    pair = sub.split(x)
    records = []
    for j, spec in enumerate(sub.blocks):
        st = replay[j] if mode == "replay" else None
        xt = pair.right
        pair, _, cache = coupling_forward(pair, spec, mode, st, keep_cache=True)
        records.append((xt, cache))
    g = channel_split(u)
    for j in range(sub.depth, 0, -1):
        xt, cache = records[j - 1]
        g, _ = coupling_backward(g, xt, sub.blocks[j - 1], batch_stats=False, cache=cache)
    return sub.unsplit(g)


def _batched(fn, x: np.ndarray, vs: np.ndarray, chunk: int) -> np.ndarray:
    """Apply a per-sample linear map ``fn(x_rep, v)`` to many directions at one point."""
    out = []
    for i in range(0, len(vs), chunk):
        vb = vs[i:i + chunk]
        out.append(fn(np.broadcast_to(x, (len(vb),) + x.shape[1:]).copy(), vb))
    return np.concatenate(out)


def jacobian_matrix(net: IRevNet, x: np.ndarray, depth: Optional[int] = None,
                    chunk: int = 256) -> np.ndarray:
    """Dense Jacobian (out_dim, in_dim) at a single input ``x`` of shape (1, C, H, W)."""
    in_shape = x.shape[1:]
    n = int(np.prod(in_shape))
    cols = []
    for i in range(0, n, chunk):
        m = min(chunk, n - i)
        basis = np.zeros((m, n), dtype=x.dtype)
        basis[np.arange(m), i + np.arange(m)] = 1
        cols.append(_batched(lambda a, b: jvp(net, a, b, depth), x,
                             basis.reshape((m,) + in_shape), chunk).reshape(m, -1))
    return np.concatenate(cols).T


# ---------------------------------------------------------------------------
# symmetric eigensolvers


def _round_robin(n: int) -> List[np.ndarray]:
    """n-1 rounds of n/2 disjoint index pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append(np.array([(players[i], players[n - 1 - i]) for i in range(half)]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    # direct sum; sum(a^2) - sum(diag^2) cancels catastrophically near convergence
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied a round of disjoint pairs at a time. Returns
    ``(eigenvalues_descending, eigenvectors_as_columns, converged)``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    n0 = a.shape[0]
    n = n0 + (n0 % 2)
    if n != n0:
        a = np.pad(a, ((0, 1), (0, 1)))
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a) or 1.0
    rounds = _round_robin(n) if n > 1 else []
    converged = n <= 1
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= tol * scale:
            converged = True
            break
        for pairs in rounds:
            p, q = pairs[:, 0], pairs[:, 1]
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            t[tau == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    else:
        off = _off_norm(a)
        converged = off <= tol * scale
    # a padding index never couples: its off-diagonal entries stay exactly zero
    w = np.diag(a)[:n0]
    v = v[:n0, :n0]
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order], converged


@dataclass
class PowerResult:
    values: np.ndarray
    vectors: np.ndarray
    iterations: int
    converged: bool


def top_eigenpairs(matvec: Callable[[np.ndarray], np.ndarray], n: int, k: int,
                   iters: int = 500, tol: float = 1e-7, oversample: int = 5,
                   seed: int = 0) -> PowerResult:
    """Leading eigenpairs of a symmetric PSD operator by orthogonal power iteration.

    ``matvec`` maps an (n, b) block to (n, b). Ritz pairs whose Rayleigh
    quotients change by less than ``tol`` (relative) are locked; the active
    block is re-orthogonalized against locked vectors every iteration.
    """
    if k > n:
        raise ValueError(f"k={k} exceeds operator dimension {n}")
    rng = np.random.default_rng(seed)
    b = min(n, k + oversample)
    locked_vals: List[float] = []
    locked_vecs = np.zeros((n, 0))
    q, _ = np.linalg.qr(rng.standard_normal((n, b)))
    prev = None
    it = 0
    for it in range(1, iters + 1):
        if locked_vecs.shape[1]:
            q -= locked_vecs @ (locked_vecs.T @ q)
            q, _ = np.linalg.qr(q)
        z = matvec(q)
        h = q.T @ z
        theta, y, _ = jacobi_eigh(h)
        q_ritz = q @ y
        z_ritz = z @ y
        if prev is not None:
            change = np.abs(theta - prev) / np.maximum(np.abs(theta), 1e-300)
            need = k - len(locked_vals)
            n_lock = 0
            while n_lock < need and change[n_lock] < tol:
                n_lock += 1
            if n_lock:
                locked_vals.extend(theta[:n_lock].tolist())
                locked_vecs = np.concatenate([locked_vecs, q_ritz[:, :n_lock]], axis=1)
                if len(locked_vals) >= k:
                    break
                q_ritz, z_ritz, theta = q_ritz[:, n_lock:], z_ritz[:, n_lock:], theta[n_lock:]
        prev = theta
        q, _ = np.linalg.qr(z_ritz)
    converged = len(locked_vals) >= k
    if not converged:
        missing = k - len(locked_vals)
        locked_vals.extend(theta[:missing].tolist())
        locked_vecs = np.concatenate([locked_vecs, q_ritz[:, :missing]], axis=1)
    vals = np.array(locked_vals)
    order = np.argsort(-vals, kind="stable")
    return PowerResult(vals[order], locked_vecs[:, order], it, converged)


# ---------------------------------------------------------------------------
# spectrum


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    energy_cdf: np.ndarray
    method: str
    converged: bool = True
    iterations: int = 0
    total_energy: float = float("nan")
    partial: bool = False
    params: dict = field(default_factory=dict)

    def to_csv(self, path, header_note: Optional[str] = None) -> None:
        rows = [(i + 1, repr(float(s)), repr(float(e)))
                for i, (s, e) in enumerate(zip(self.singular_values, self.energy_cdf))]
        write_csv(path, ("index", "singular_value", "energy_cdf"), rows, header_note)


def frobenius_energy(net: IRevNet, x: np.ndarray, depth: Optional[int] = None,
                     chunk: int = 256) -> float:
    """Exact ``||J||_F^2`` (sum of squared singular values) via basis jvps."""
    in_shape = x.shape[1:]
    n = int(np.prod(in_shape))
    total = 0.0
    for i in range(0, n, chunk):
        m = min(chunk, n - i)
        basis = np.zeros((m, n), dtype=x.dtype)
        basis[np.arange(m), i + np.arange(m)] = 1
        cols = jvp(net, np.broadcast_to(x, (m,) + in_shape).copy(),
                   basis.reshape((m,) + in_shape), depth)
        total += float(np.sum(cols.astype(np.float64) ** 2))
    return total


def jacobian_spectrum(net: IRevNet, x: np.ndarray, k: int = 10, iters: int = 500,
                      tol: float = 1e-7, method: str = "power", depth: Optional[int] = None,
                      seed: int = 0, chunk: int = 64) -> SpectrumReport:
    """Singular values of the Jacobian of the merged features at a single input.

    ``method="power"`` returns the top ``k`` via orthogonal power iteration on
    ``v -> vjp(jvp(v))``; ``method="full"`` builds the whole Jacobian and
    diagonalizes ``J^T J`` with Jacobi rotations (all values, intended for
    inputs up to a few hundred dimensions). Computation runs in float64.
    """
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("jacobian_spectrum takes a single input")
    net64 = net.astype(np.float64)
    x = x.astype(np.float64)
    in_shape = x.shape[1:]
    n = int(np.prod(in_shape))
    params = {"k": k, "iters": iters, "tol": tol}
    if method == "full":
        jac = jacobian_matrix(net64, x, depth)
        w, _, ok = jacobi_eigh(jac.T @ jac)
        sv = np.sqrt(np.clip(w, 0, None))
        energy = float(np.sum(sv ** 2))
        cdf = np.cumsum(sv ** 2) / energy if energy > 0 else np.zeros_like(sv)
        return SpectrumReport(sv, cdf, "full_jacobian", ok, 0, energy, False, params)
    if method != "power":
        raise ValueError(f"unknown spectrum method {method!r}")

    def normal_op(block: np.ndarray) -> np.ndarray:
        vs = block.T.reshape((-1,) + in_shape)
        jv = _batched(lambda a, b: jvp(net64, a, b, depth), x, vs, chunk)
        jtjv = _batched(lambda a, b: vjp(net64, a, b, depth), x, jv, chunk)
        return jtjv.reshape(block.shape[1], n).T

    res = top_eigenpairs(normal_op, n, k, iters, tol, seed=seed)
    sv = np.sqrt(np.clip(res.values, 0, None))
    energy = frobenius_energy(net64, x, depth)
    cdf = np.cumsum(sv ** 2) / energy if energy > 0 else np.zeros_like(sv)
    return SpectrumReport(sv, cdf, "power_iteration", res.converged, res.iterations,
                          energy, k < n, params)


# ---------------------------------------------------------------------------
# interpolation


@dataclass
class InterpolationResult:
    t_values: List[float]
    images: List[np.ndarray]


def interpolate(net: IRevNet, x0: np.ndarray, x1: np.ndarray, t_values: Sequence[float]
                ) -> InterpolationResult:
    """Decode ``t * fwd(x0) + (1 - t) * fwd(x1)`` for each ``t`` (t=1 gives x0, t=0 gives x1)."""
    if x0.ndim == 3:
        x0, x1 = x0[None], x1[None]
    ts = [float(t) for t in t_values]
    if any(t < 0 or t > 1 for t in ts):
        raise ValueError(f"interpolation weights must lie in [0, 1], got {ts}")
    phi0 = net.forward(x0.astype(net.dtype, copy=False)).merged
    phi1 = net.forward(x1.astype(net.dtype, copy=False)).merged
    images = []
    for t in ts:
        phi_t = (t * phi0 + (1 - t) * phi1).astype(net.dtype, copy=False)
        images.append(net.inverse(phi_t)[0])
    return InterpolationResult(ts, images)


def linspace_t(steps: int) -> List[float]:
    """``steps + 1`` evenly spaced weights from 1 down to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return [1.0 - i / steps for i in range(steps + 1)]


# ---------------------------------------------------------------------------
# probes


def averaged_features(net: IRevNet, x: np.ndarray, depths: Sequence[int],
                      batch_size: int = 200) -> Dict[int, np.ndarray]:
    """Spatially averaged merged features at each depth, as float64 (N, C_j)."""
    out: Dict[int, list] = {d: [] for d in depths}
    for i in range(0, len(x), batch_size):
        feats = net.forward(x[i:i + batch_size].astype(net.dtype, copy=False), "eval", taps=depths)
        for d in depths:
            out[d].append(feats.taps[d].mean(axis=(2, 3), dtype=np.float64))
    return {d: np.concatenate(v) for d, v in out.items()}


def standardize(train: np.ndarray, test: np.ndarray, name: str = "features"):
    """Standardize with train-split statistics; constant train features are dropped."""
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    keep = std > 1e-12 * max(1.0, float(np.abs(mean).max(initial=0)))
    if not keep.all():
        log.warning("%s: dropping %d zero-variance features", name, int((~keep).sum()))
    return (train[:, keep] - mean[keep]) / std[keep], (test[:, keep] - mean[keep]) / std[keep]


def nn1_predict(train: np.ndarray, train_labels: np.ndarray, test: np.ndarray,
                chunk: int = 500) -> np.ndarray:
    """1-nearest-neighbour in l2; ties go to the lowest training index."""
    sq = np.sum(train * train, axis=1)
    preds = []
    for i in range(0, len(test), chunk):
        t = test[i:i + chunk]
        d = sq[None, :] - 2.0 * (t @ train.T)
        preds.append(train_labels[np.argmin(d, axis=1)])
    return np.concatenate(preds) if preds else np.zeros(0, dtype=train_labels.dtype)


@dataclass
class LinearClassifier:
    weight: np.ndarray
    bias: np.ndarray
    reg: float

    def predict(self, f: np.ndarray) -> np.ndarray:
        return np.argmax(f @ self.weight.T + self.bias, axis=1)


def _fit_softmax(f: np.ndarray, y: np.ndarray, k: int, reg: float, iters: int) -> LinearClassifier:
    # Nesterov-accelerated full-batch gradient descent, step 1/L
    n, d = f.shape
    onehot = np.eye(k)[y]
    lip = 0.5 * (np.linalg.norm(f, 2) ** 2 / n + 1.0) + reg
    step = 1.0 / lip
    w = np.zeros((k, d))
    b = np.zeros(k)
    w_prev, b_prev = w, b
    for t in range(1, iters + 1):
        mom = (t - 1) / (t + 2)
        wy = w + mom * (w - w_prev)
        by = b + mom * (b - b_prev)
        z = f @ wy.T + by
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        r = (p - onehot) / n
        gw = r.T @ f + reg * wy
        gb = r.sum(axis=0)
        w_prev, b_prev = w, b
        w, b = wy - step * gw, by - step * gb
    return LinearClassifier(w, b, reg)


REG_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


def fit_linear_probe(f: np.ndarray, y: np.ndarray, k: int, seed: int = 0,
                     regs: Sequence[float] = REG_GRID, iters: int = 300) -> LinearClassifier:
    """L2-regularized multinomial logistic regression; ``reg`` picked on a held-out fifth."""
    n = len(f)
    perm = np.random.default_rng(seed).permutation(n)
    hold, fit = perm[: n // 5], perm[n // 5:]
    best, best_acc = regs[0], -1.0
    if len(hold) and len(regs) > 1:
        for reg in regs:
            clf = _fit_softmax(f[fit], y[fit], k, reg, iters)
            acc = float((clf.predict(f[hold]) == y[hold]).mean())
            if acc > best_acc:
                best, best_acc = reg, acc
    return _fit_softmax(f, y, k, best, iters)


@dataclass
class ProbeRow:
    depth: int
    dim: int
    linear_accuracy: float
    nn1_accuracy: float
    reg: float


@dataclass
class ProbeReport:
    rows: List[ProbeRow]

    def accuracy(self, depth: int) -> ProbeRow:
        return next(r for r in self.rows if r.depth == depth)

    def to_csv(self, path, header_note: Optional[str] = None) -> None:
        write_csv(path, ("depth", "dim", "linear_accuracy", "nn1_accuracy", "reg"),
                  [(r.depth, r.dim, repr(r.linear_accuracy), repr(r.nn1_accuracy), repr(r.reg))
                   for r in self.rows], header_note)


def _probe(ftr, ytr, fte, yte, k, seed, iters):
    clf = fit_linear_probe(ftr, ytr, k, seed, iters=iters)
    lin = float((clf.predict(fte) == yte).mean())
    nn = float((nn1_predict(ftr, ytr, fte) == yte).mean())
    return lin, nn, clf.reg


def depth_probe(net: IRevNet, train, test, taps: Sequence[int], seed: int = 0,
                iters: int = 300) -> ProbeReport:
    """Linear and 1-NN accuracy on spatially averaged, standardized features per depth."""
    (xtr, ytr), (xte, yte) = train, test
    k = net.config.num_classes
    taps = sorted(set(taps))
    ftr_all = averaged_features(net, xtr, taps)
    fte_all = averaged_features(net, xte, taps)
    rows = []
    for d in taps:
        ftr, fte = standardize(ftr_all[d], fte_all[d], f"depth {d}")
        lin, nn, reg = _probe(ftr, ytr, fte, yte, k, seed, iters)
        rows.append(ProbeRow(d, ftr.shape[1], lin, nn, reg))
        log.info("depth %d: linear %.4f 1-NN %.4f", d, lin, nn)
    return ProbeReport(rows)


@dataclass
class PcaModel:
    components: np.ndarray  # (D, D) columns sorted by decreasing variance
    explained_variance: np.ndarray
    converged: bool

    def project(self, f: np.ndarray, d: int) -> np.ndarray:
        """Orthogonal projection onto the span of the first ``d`` components."""
        if d > self.components.shape[1]:
            raise ValueError(f"d={d} exceeds feature dimension {self.components.shape[1]}")
        v = self.components[:, :d]
        return (f @ v) @ v.T

    def coordinates(self, f: np.ndarray, d: int) -> np.ndarray:
        """Coordinates of ``f`` on the first ``d`` components (an isometry of the projection)."""
        if d > self.components.shape[1]:
            raise ValueError(f"d={d} exceeds feature dimension {self.components.shape[1]}")
        return f @ self.components[:, :d]


def pca_fit(f: np.ndarray) -> PcaModel:
    """Principal axes of (already centered) features via Jacobi on the covariance."""
    cov = (f.T @ f) / max(len(f) - 1, 1)
    w, v, ok = jacobi_eigh(cov)
    return PcaModel(v, np.clip(w, 0, None), ok)


@dataclass
class PcaRow:
    d: int
    linear_accuracy: float
    nn1_accuracy: float
    reg: float


@dataclass
class PcaReport:
    rows: List[PcaRow]
    explained_variance: np.ndarray
    feature_dim: int
    model: Optional[PcaModel] = None

    def accuracy(self, d: int) -> PcaRow:
        return next(r for r in self.rows if r.d == d)

    def to_csv(self, path, header_note: Optional[str] = None) -> None:
        ev = self.explained_variance
        total = float(ev.sum())
        ratio = np.cumsum(ev) / total if total > 0 else np.zeros_like(ev)
        write_csv(path, ("d", "linear_accuracy", "nn1_accuracy", "reg", "variance_ratio"),
                  [(r.d, repr(r.linear_accuracy), repr(r.nn1_accuracy), repr(r.reg),
                    repr(float(ratio[r.d - 1])) if r.d >= 1 else "0.0") for r in self.rows],
                  header_note)


def pca_probe(net: IRevNet, train, test, d_list: Sequence[int], depth: Optional[int] = None,
              seed: int = 0, iters: int = 300) -> PcaReport:
    """Probe accuracies after projecting standardized final features onto d principal axes."""
    (xtr, ytr), (xte, yte) = train, test
    depth = net.depth if depth is None else depth
    k = net.config.num_classes
    ftr = averaged_features(net, xtr, [depth])[depth]
    fte = averaged_features(net, xte, [depth])[depth]
    ftr, fte = standardize(ftr, fte, f"depth {depth}")
    dim = ftr.shape[1]
    bad = [d for d in d_list if d < 1 or d > dim]
    if bad:
        raise ValueError(f"d values {bad} outside 1..{dim} (feature dimension)")
    model = pca_fit(ftr)
    rows = []
    for d in d_list:
        # distances and the L2-regularized linear fit are the same on the
        # projection and on its coordinates, which are much cheaper for small d
        ptr, pte = model.coordinates(ftr, d), model.coordinates(fte, d)
        lin, nn, reg = _probe(ptr, ytr, pte, yte, k, seed, iters)
        rows.append(PcaRow(d, lin, nn, reg))
        log.info("pca d=%d: linear %.4f 1-NN %.4f", d, lin, nn)
    return PcaReport(rows, model.explained_variance, dim, model)


# ---------------------------------------------------------------------------
# csv


def write_csv(path, header, rows, header_note: Optional[str] = None) -> None:
    buf = io.StringIO()
    if header_note:
        for line in header_note.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue().encode("utf-8"))


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
