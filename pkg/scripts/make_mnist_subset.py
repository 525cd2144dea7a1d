"""Write a 5000-image MNIST subset as standard IDX files.

The subset is the one bundled with ``mlxtend`` (500 images per digit). A
seeded shuffle puts 4000 images in the train files and 1000 in the t10k
files, so the directory can be read by any MNIST IDX loader.

    python scripts/make_mnist_subset.py data/mnist
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from irevnet.data import MNIST_FILES, write_idx  # noqa: E402


def build_subset(out_dir, seed=0, n_train=4000):
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(x))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, sl in (("train", slice(0, n_train)), ("test", slice(n_train, None))):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(out / f"{img_name}.gz", x[sl])
        write_idx(out / f"{lbl_name}.gz", y[sl])
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=4000)
    args = ap.parse_args()
    print(build_subset(args.out_dir, args.seed, args.n_train))
