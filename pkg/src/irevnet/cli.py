"""Command-line interface: ``irevnet <command> ...``.

Every command is a thin wrapper over a library call; the numbers it writes
are the library's results printed with ``repr`` so they round-trip exactly.
Exit codes: 0 success, 2 usage or config error, 3 corrupt data or checkpoint.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import analysis, checkpoint
from .config import SOURCES, load_config
from .data import DatasetHandle, atomic_write, fit_to_shape, read_pnm, write_pnm
from .errors import ConfigError, FormatError
from .network import PRESETS, IRevNet, build, preset
from .training import evaluate, train_loop

log = logging.getLogger("irevnet")

UNTRAINED_NOTE = "WARNING: untrained network (no trained checkpoint; parameters are at initialization)"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


class Model:
    def __init__(self, net: IRevNet, trained: bool, seed: int, data_source: str, origin: str):
        self.net, self.trained, self.seed = net, trained, seed
        self.data_source, self.origin = data_source, origin

    @property
    def note(self) -> Optional[str]:
        return None if self.trained else UNTRAINED_NOTE


def _load_model(spec: str, args) -> Model:
    """A checkpoint file, a config file, or a preset name (the last two give untrained nets)."""
    path = Path(spec)
    if path.is_file() and path.suffix != ".ini":
        ck = checkpoint.load(path)
        net = ck.net if args.dtype is None else ck.net.astype(args.dtype)
        model = Model(net, ck.trained, ck.seed, ck.extra.get("data_source", "mnist_idx"), str(path))
    elif path.suffix == ".ini":
        exp = load_config(path)
        net = build(exp.net, args.seed, args.dtype or "f32")
        model = Model(net, False, args.seed, exp.data_source, str(path))
    elif spec in PRESETS:
        net = build(preset(spec), args.seed, args.dtype or "f32")
        model = Model(net, False, args.seed, "mnist_idx", spec)
    else:
        raise FileNotFoundError(f"model {spec} is neither a checkpoint, a config file nor a preset")
    if not model.trained:
        print(f"warning: {model.origin}: untrained network", file=sys.stderr)
    return model


def _fit(x: np.ndarray, net: IRevNet) -> np.ndarray:
    try:
        return fit_to_shape(x, net.config.input_shape).astype(net.dtype, copy=False)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _load_split(args, model: Model, split: str, count: Optional[int]):
    source = args.source or model.data_source
    x, y = DatasetHandle(source, args.data, split, model.net.config.num_classes).load()
    if count is not None:
        x, y = x[:count], y[:count]
    return _fit(x, model.net), y


def _read_image(path, net: IRevNet) -> np.ndarray:
    return _fit(read_pnm(path)[None], net)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ints(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _deterministic(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    # one BLAS thread fixes the summation order of every matmul
    return threadpool_limits(limits=1)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    exp = load_config(args.config)
    data_dir = args.data or exp.data_path
    if data_dir is None:
        raise UsageError("no data directory: pass --data or set [data] path")
    if not Path(data_dir).is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    settings = exp.train
    if args.epochs is not None:
        settings.epochs = args.epochs
    if args.max_steps is not None:
        settings.max_steps = args.max_steps
    if args.checkpoint_every is not None:
        settings.checkpoint_every = args.checkpoint_every
    out = _out(args)

    if args.resume:
        ck = checkpoint.load(args.resume)
        if ck.net.config != exp.net:
            raise ConfigError(f"{args.resume}: network config differs from {args.config}")
        net, state, seed = ck.net, ck.optim, ck.seed
        log.info("resuming at step %d", state.step)
    else:
        seed = args.seed
        net = build(exp.net, seed, args.dtype or "f32")
        state = exp.optim

    x, y = DatasetHandle(exp.data_source, data_dir, "train", exp.net.num_classes).load()
    x = _fit(x, net)
    extra = {"data_source": exp.data_source,
             "train": {"epochs": settings.epochs, "batch_size": settings.batch_size,
                       "augment": settings.augment, "augment_pad": settings.augment_pad,
                       "backward": settings.backward}}

    def save(net_, state_):
        ck = checkpoint.Checkpoint(net_, state_, seed, state_.step, extra)
        raw = checkpoint.to_bytes(ck)
        atomic_write(out / "checkpoint.irev", raw)
        if settings.checkpoint_every and state_.step % settings.checkpoint_every == 0:
            atomic_write(out / f"checkpoint_{state_.step:07d}.irev", raw)

    train_loop(net, x, y, settings, state, seed, out / "train_log.csv", on_checkpoint=save)
    rows = [("train_steps", state.step)]
    test_path = args.data or exp.data_path
    try:
        xt, yt = DatasetHandle(exp.data_source, test_path, "test", exp.net.num_classes).load()
    except FileNotFoundError:
        xt = None
    if xt is not None:
        rows.append(("test_accuracy", repr(evaluate(net, _fit(xt, net), yt))))
    analysis.write_csv(out / "summary.csv", ("metric", "value"), rows)
    for k, v in rows:
        print(f"{k} {v}")
    return 0


def cmd_invert(args) -> int:
    model = _load_model(args.model, args)
    net = model.net
    xs, sources = [], []
    for p in args.image or []:
        xs.append(_read_image(p, net))
        sources.append(Path(p).name)
    if args.noise:
        rng = np.random.default_rng(args.seed)
        xs.append(rng.uniform(0, 1, (args.noise,) + net.config.input_shape).astype(net.dtype))
        sources += [f"noise{i}" for i in range(args.noise)]
    if args.data:
        xd, _ = _load_split(args, model, args.split, args.count)
        xs.append(xd)
        sources += [f"{args.split}{i}" for i in range(len(xd))]
    if not xs:
        raise UsageError("invert needs --image, --noise or --data")
    x = np.concatenate(xs)
    out = _out(args)

    errs = analysis.relative_errors(net, x)
    feats = net.forward(x).merged
    recon = net.inverse(feats)
    rows = []
    for i, src in enumerate(sources):
        f = feats[i].astype(np.float64)
        rows.append((i, src, repr(float(np.linalg.norm(x[i].astype(np.float64)))),
                     repr(float(np.linalg.norm(f))), repr(float(f.min())), repr(float(f.max())),
                     repr(float(errs[i]))))
    analysis.write_csv(out / "invert.csv", ("sample", "source", "input_norm", "feature_norm",
                                            "feature_min", "feature_max", "relative_error"),
                       rows, model.note)
    with open(out / "invert_arrays.npz", "wb") as fh:
        np.savez(fh, x=x, features=feats, reconstruction=recon)
    for i, src in enumerate(sources[:len(args.image or [])]):
        write_pnm(out / f"input_{i:03d}.{_ext(x[i])}", x[i])
        write_pnm(out / f"reconstruction_{i:03d}.{_ext(recon[i])}", recon[i])
    mean = analysis.reconstruction_error(net, x)
    print(f"feature_shape {'x'.join(map(str, feats.shape[1:]))}")
    print(f"mean_relative_error {mean!r}")
    return 0


def _ext(img) -> str:
    return "pgm" if img.shape[0] == 1 else "ppm"


def cmd_interpolate(args) -> int:
    model = _load_model(args.model, args)
    net = model.net
    x0, x1 = _read_image(args.img0, net), _read_image(args.img1, net)
    res = analysis.interpolate(net, x0, x1, analysis.linspace_t(args.steps))
    out = _out(args)
    rows = []
    for i, (t, img) in enumerate(zip(res.t_values, res.images)):
        name = f"interp_{i:03d}_t{t:.6f}.{_ext(img)}"
        write_pnm(out / name, img)
        rows.append((i, repr(t), name))
    analysis.write_csv(out / "manifest.csv", ("index", "t", "file"), rows, model.note)
    print(f"wrote {len(rows)} frames to {out}")
    return 0


def cmd_spectrum(args) -> int:
    model = _load_model(args.model, args)
    net = model.net
    if args.image:
        x = _read_image(args.image, net)
    elif args.data:
        x, _ = _load_split(args, model, args.split, args.index + 1)
        x = x[args.index:args.index + 1]
    else:
        x = np.random.default_rng(args.seed).uniform(
            0, 1, (1,) + net.config.input_shape).astype(net.dtype)
    rep = analysis.jacobian_spectrum(net, x, args.k, args.iters, args.tol, args.method,
                                     args.depth, args.seed)
    note = [model.note] if model.note else []
    note.append(f"method={rep.method} converged={rep.converged} iterations={rep.iterations} "
                f"total_energy={rep.total_energy!r}")
    rep.to_csv(_out(args) / "spectrum.csv", "\n".join(note))
    print(f"top singular value {float(rep.singular_values[0])!r} ({rep.method}, converged={rep.converged})")
    return 0


def cmd_probe(args) -> int:
    model = _load_model(args.model, args)
    train = _load_split(args, model, "train", args.train_count)
    test = _load_split(args, model, "test", args.test_count)
    taps = args.taps or list(range(model.net.depth + 1))
    rep = analysis.depth_probe(model.net, train, test, taps, args.seed, args.iters)
    rep.to_csv(_out(args) / "probe.csv", model.note)
    for r in rep.rows:
        print(f"depth {r.depth}: linear {r.linear_accuracy:.4f} 1-nn {r.nn1_accuracy:.4f}")
    return 0


def cmd_pca(args) -> int:
    model = _load_model(args.model, args)
    train = _load_split(args, model, "train", args.train_count)
    test = _load_split(args, model, "test", args.test_count)
    rep = analysis.pca_probe(model.net, train, test, args.d_list, args.depth, args.seed, args.iters)
    rep.to_csv(_out(args) / "pca.csv", model.note)
    for r in rep.rows:
        print(f"d {r.d}: linear {r.linear_accuracy:.4f} 1-nn {r.nn1_accuracy:.4f}")
    return 0


def cmd_info(args) -> int:
    if args.model is None:
        for name in sorted(PRESETS):
            cfg = preset(name)
            kind = "bijective" if cfg.bijective else "injective"
            print(f"{name}: {kind}, {cfg.depth} blocks, input {cfg.input_shape} -> {cfg.shapes()[-1]}")
        return 0
    model = _load_model(args.model, args)
    net, cfg = model.net, model.net.config
    n_params = sum(int(a.size) for a in net.parameters().values())
    info = {
        "source": model.origin,
        "trained": model.trained,
        "dtype": str(net.dtype),
        "bijective": cfg.bijective,
        "blocks": cfg.depth,
        "parameters": n_params,
        "shapes": [list(s) for s in cfg.shapes()],
        "config": cfg.to_dict(),
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irevnet", description="Invertible coupling networks.")
    ap.add_argument("--seed", type=int, default=0, help="single source of randomness")
    ap.add_argument("--deterministic", action="store_true",
                    help="pin BLAS to one thread so repeated runs are bitwise identical")
    ap.add_argument("--dtype", choices=("f32", "f64"), default=None,
                    help="compute precision (default f32, or the checkpoint's)")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("config")
    p.add_argument("--data", help="dataset directory (overrides [data] path)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    def model_arg(p):
        p.add_argument("model", help="checkpoint, config file or preset name")

    def data_args(p, required):
        p.add_argument("--data", required=required, help="dataset directory")
        p.add_argument("--source", choices=SOURCES, help="dataset format")

    p = sub.add_parser("invert", help="reconstruction error of forward then inverse")
    model_arg(p)
    p.add_argument("--image", nargs="+", help="PGM/PPM input images")
    p.add_argument("--noise", type=int, default=0, help="number of uniform-noise inputs")
    data_args(p, False)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("interpolate", help="decode interpolated feature vectors")
    model_arg(p)
    p.add_argument("img0")
    p.add_argument("img1")
    p.add_argument("--steps", type=int, default=8)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("spectrum", help="Jacobian singular values at one input")
    model_arg(p)
    p.add_argument("--image")
    data_args(p, False)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--method", choices=("power", "full"), default="power")
    p.add_argument("--depth", type=int)
    p.set_defaults(func=cmd_spectrum)

    for name, fn, helptext in (("probe", cmd_probe, "linear and 1-NN probes per depth"),
                               ("pca", cmd_pca, "probes on PCA-projected final features")):
        p = sub.add_parser(name, help=helptext)
        model_arg(p)
        data_args(p, True)
        p.add_argument("--train-count", type=int)
        p.add_argument("--test-count", type=int)
        p.add_argument("--iters", type=int, default=300)
        if name == "probe":
            p.add_argument("--taps", type=_ints, help="depths, e.g. 0,4,8,16 (default all)")
        else:
            p.add_argument("--d-list", type=_ints, required=True, help="e.g. 1,2,4,8")
            p.add_argument("--depth", type=int)
        p.set_defaults(func=fn)

    p = sub.add_parser("info", help="describe a checkpoint, config or preset")
    p.add_argument("model", nargs="?")
    p.set_defaults(func=cmd_info)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _deterministic(args.deterministic):
            return args.func(args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, UsageError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
