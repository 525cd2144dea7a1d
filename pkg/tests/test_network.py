import numpy as np
import pytest

from irevnet.errors import ConfigError, ReplayError, ShapeError
from irevnet.invertible import channel_split
from irevnet.network import BlockSpec, NetConfig, build, make_config, preset

from conftest import small_config


def test_tiny_b_shapes_conserve_coefficients():
    cfg = preset("tiny-b")
    assert cfg.bijective and cfg.depth == 16
    shapes = cfg.shapes()
    assert shapes[0] == (12, 16, 16)
    channels = sorted({s[0] for s in shapes})
    assert channels == [12, 48, 192, 768]
    assert all(c * h * w == 3 * 32 * 32 for c, h, w in shapes)


def test_tiny_a_is_injective_and_never_shrinks():
    cfg = preset("tiny-a")
    assert not cfg.bijective
    sizes = [c * h * w for c, h, w in cfg.shapes()]
    assert sizes[0] == 24 * 16 * 16
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))


def test_paper_presets():
    b = preset("paper-b")
    streams = sorted({s[0] // 2 for s in b.shapes()[1:]})
    assert streams == [24, 96, 384, 1536]
    assert b.shapes()[0][0] == 12
    assert all(c * h * w == 3 * 224 * 224 for c, h, w in b.shapes())
    a = preset("paper-a")
    assert sorted({s[0] // 2 for s in a.shapes()[1:]}) == [48, 192, 768, 3072]


def test_config_errors_name_the_block():
    cfg = NetConfig((3, 8, 8), 2, (BlockSpec(1, 12), BlockSpec(2, 40)), 10)
    with pytest.raises(ConfigError, match="block 2"):
        cfg.shapes()
    with pytest.raises(ConfigError):
        make_config((3, 8, 8), 2, 4, downsample_at=(1, 2, 3))  # 4x4 -> 2x2 -> 1x1 -> odd
    with pytest.raises(ConfigError):
        preset("nope")


def test_config_dict_roundtrip():
    cfg = preset("tiny-a")
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_build_deterministic():
    a, b = build(small_config(), 7), build(small_config(), 7)
    for (na, pa), (nb, pb) in zip(a.parameters().items(), b.parameters().items()):
        assert na == nb and np.array_equal(pa, pb)
    c = build(small_config(), 8)
    assert not np.array_equal(a.parameters()["blocks.1.conv1.weight"],
                              c.parameters()["blocks.1.conv1.weight"])


def test_zero_residual_network_is_a_permutation(rng):
    net = build(preset("tiny-b"), 0)
    net.zero_residuals()
    x = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
    phi = net.forward(x).merged
    assert np.array_equal(np.sort(phi, axis=None), np.sort(x, axis=None))
    assert np.linalg.norm(phi) == pytest.approx(np.linalg.norm(x), rel=1e-6)
    assert np.array_equal(net.inverse(phi), x)


def test_affine_hook_gives_affine_map(rng):
    # with ReLUs removed and frozen BN the network is affine in x
    net = build(small_config(3, (3, 8, 8), (2,)), 0, "f64")
    net.set_nonlinear(False)
    x1, x2 = rng.standard_normal((2, 2, 3, 8, 8))
    f = lambda x: net.forward(x).merged
    np.testing.assert_allclose(f(0.3 * x1 + 0.7 * x2), 0.3 * f(x1) + 0.7 * f(x2), atol=1e-12)


@pytest.mark.parametrize("name", ["tiny-b", "tiny-a"])
def test_forward_inverse_f64(rng, name):
    net = build(preset(name), 1, "f64")
    x = rng.uniform(size=(3, 3, 32, 32))
    feats = net.forward(x, taps=[0, 5, 16])
    assert sorted(feats.taps) == [0, 5, 16]
    assert feats.taps[16].shape[1:] == net.config.shapes()[-1]
    np.testing.assert_allclose(net.inverse(feats), x, rtol=0, atol=1e-12)


def test_injective_left_inverse_and_pad_channels(rng):
    net = build(preset("tiny-a"), 0, "f64")
    x = rng.uniform(size=(2, 3, 32, 32))
    tap0 = net.forward(x, taps=[0]).taps[0]
    # the 12 data channels fill the left stream; the right stream is all padding
    left, right = channel_split(tap0)
    assert left.shape[1] == right.shape[1] == 12
    assert np.all(right == 0) and np.count_nonzero(left) > 0
    np.testing.assert_allclose(net.inverse(net.forward(x)), x, atol=1e-12)


def test_train_mode_inverse_needs_stats(rng):
    net = build(small_config(), 0, "f64")
    x = rng.standard_normal((4, 3, 8, 8))
    feats = net.forward(x, "train")
    np.testing.assert_allclose(net.inverse(feats, "train"), x, atol=1e-12)
    with pytest.raises(ReplayError):
        net.inverse(feats.merged, "train")


def test_shape_mismatch(rng):
    net = build(small_config(), 0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 16, 16), np.float32))


def test_untrained_accuracy_near_chance(rng):
    net = build(preset("tiny-b"), 3)
    x = rng.uniform(size=(2000, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 10, 2000)
    acc = float((net.predict(x) == y).mean())
    assert abs(acc - 0.1) <= 0.05
