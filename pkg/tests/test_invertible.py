import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irevnet.bottleneck import Bottleneck
from irevnet.errors import ReplayError, ShapeError
from irevnet.invertible import (
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


def psi_oracle(x, f):
    n, c, h, w = x.shape
    y = np.zeros((n, c * f * f, h // f, w // f), dtype=x.dtype)
    for ch in range(c):
        for r in range(h):
            for s in range(w):
                y[:, ch * f * f + (r % f) * f + (s % f), r // f, s // f] = x[:, ch, r, s]
    return y


@pytest.mark.parametrize("f", [1, 2, 3, 4])
def test_psi_matches_index_oracle(rng, f):
    x = rng.standard_normal((2, 3, 4 * f, 2 * f))
    assert np.array_equal(psi_downsample(x, f), psi_oracle(x, f))


def test_psi_small_example():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y = psi_downsample(x, 2)
    assert y.shape == (1, 4, 2, 2)
    np.testing.assert_array_equal(y[0, 0], [[0, 2], [8, 10]])
    np.testing.assert_array_equal(y[0, 3], [[5, 7], [13, 15]])


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4),
       f=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_psi_roundtrip_property(n, c, h, w, f, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h * f, w * f)).astype(np.float32)
    y = psi_downsample(x, f)
    assert y.shape == (n, c * f * f, h, w)
    assert np.array_equal(psi_inverse(y, f), x)
    # permutation: multiset of values and norm are preserved
    assert np.array_equal(np.sort(y, axis=None), np.sort(x, axis=None))


@settings(max_examples=100, deadline=None)
@given(c=st.integers(1, 5), extra=st.integers(0, 6), seed=st.integers(0, 2**31 - 1))
def test_split_merge_pad_roundtrip(c, extra, seed):
    x = np.random.default_rng(seed).standard_normal((2, 2 * c, 3, 3))
    assert np.array_equal(channel_merge(channel_split(x)), x)
    y = injective_pad(x, 2 * c + extra)
    assert np.array_equal(pad_pseudo_inverse(y, 2 * c), x)
    assert np.all(y[:, 2 * c:] == 0)
    # left inverse is also the adjoint
    z = np.random.default_rng(seed + 1).standard_normal(y.shape)
    assert np.isclose(np.sum(y * z), np.sum(x * pad_pseudo_inverse(z, 2 * c)))


def test_shape_errors():
    with pytest.raises(ShapeError):
        psi_downsample(np.zeros((1, 1, 3, 4)), 2)
    with pytest.raises(ShapeError):
        psi_inverse(np.zeros((1, 3, 2, 2)), 2)
    with pytest.raises(ShapeError):
        channel_split(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        injective_pad(np.zeros((1, 4, 2, 2)), 3)
    with pytest.raises(ShapeError):
        channel_merge(SplitPair(np.zeros((1, 1, 2, 2)), np.zeros((1, 2, 2, 2))))


class AddConst:
    """Residual F(u) = u + 1, used to check the coupling algebra by hand."""
    has_batch_norm = False

    def apply(self, x, mode="eval", stats=None):
        return x + 1, None


def test_coupling_worked_example():
    x = np.full((1, 1, 2, 2), 2.0)
    xt = np.full((1, 1, 2, 2), 5.0)
    spec = CouplingSpec(AddConst(), None)
    (y1, y2), _ = coupling_forward(SplitPair(x, xt), spec)
    np.testing.assert_array_equal(y1, xt)
    np.testing.assert_array_equal(y2, np.full_like(x, 8.0))
    back = coupling_inverse(SplitPair(y1, y2), spec)
    np.testing.assert_array_equal(back.left, x)
    np.testing.assert_array_equal(back.right, xt)


def test_coupling_downsample_applies_psi_to_both_streams():
    rng = np.random.default_rng(0)
    x, xt = rng.standard_normal((2, 1, 2, 4, 4))
    spec = CouplingSpec(AddConst(), DownsampleSpec(2))
    (y1, y2), _ = coupling_forward(SplitPair(x, xt), spec)
    assert np.array_equal(y1, psi_downsample(xt, 2))
    assert np.array_equal(y2, psi_downsample(x + (xt + 1), 2))


@pytest.mark.parametrize("ds", [None, DownsampleSpec(2)])
def test_coupling_roundtrip_with_bottleneck(rng, ds):
    res = Bottleneck.init(rng, 8, dtype=np.float64)
    spec = CouplingSpec(res, ds)
    p = SplitPair(*rng.standard_normal((2, 3, 8, 4, 4)))
    q, stats = coupling_forward(p, spec, "train")
    back = coupling_inverse(q, spec, "replay", stats)
    np.testing.assert_allclose(back.left, p.left, atol=1e-13)
    # the right stream is a pure permutation and comes back bitwise
    assert np.array_equal(back.right, p.right)
    with pytest.raises(ReplayError):
        coupling_inverse(q, spec, "train")


def test_coupling_zero_residual_is_swap(rng):
    res = Bottleneck.init(rng, 4, dtype=np.float32)
    res.conv3.weight[...] = 0
    p = SplitPair(*rng.standard_normal((2, 2, 4, 3, 3)).astype(np.float32))
    (y1, y2), _ = coupling_forward(p, CouplingSpec(res, None))
    assert np.array_equal(y1, p.right) and np.array_equal(y2, p.left)


def test_downsample_spec_validates():
    with pytest.raises(ValueError):
        DownsampleSpec(0)
