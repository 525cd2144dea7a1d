import os
import sys
from pathlib import Path

import numpy as np
import pytest

from irevnet.data import MNIST_FILES
from irevnet.network import build, make_config

ROOT = Path(__file__).resolve().parents[1]


def small_config(blocks=2, shape=(3, 8, 8), downsample_at=(2,), pad_to=None, classes=4):
    return make_config(shape, 2, blocks, downsample_at, classes, pad_to)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return build(small_config(), seed=0, dtype="f64")


def _have_mnist(path: Path) -> bool:
    return all((path / f).exists() or (path / f"{f}.gz").exists()
               for split in MNIST_FILES.values() for f in split)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """MNIST IDX directory: $IREVNET_MNIST_DIR, the repo's data/mnist, or a fresh subset."""
    env = os.environ.get("IREVNET_MNIST_DIR")
    if env:
        return Path(env)
    local = ROOT / "data" / "mnist"
    if _have_mnist(local):
        return local
    pytest.importorskip("mlxtend")
    sys.path.insert(0, str(ROOT / "scripts"))
    from make_mnist_subset import build_subset
    return build_subset(tmp_path_factory.mktemp("mnist"))
