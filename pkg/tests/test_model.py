import numpy as np
import pytest

from saliency_distill.gridcore import DiffGraph, Grid, ShapeError
from saliency_distill.losses import csd_loss
from saliency_distill.model import (FUSED_WIDTH, STAGE_WIDTHS, SaliencyNet, activation_head, corner_inversion,
                                    corner_patch_mean, init_params, mirror_kernel, param_shapes, se_block,
                                    symmetrize_kernel)


def net(seed=0, in_channels=3):
    return SaliencyNet.create(np.random.default_rng(seed), in_channels)


def open_gates(params, names=("se3", "se4", "se5", "fuse"), value=40.0):
    """Force SE gates to (numerically) one: zero weights, large output bias."""
    p = {k: v.copy() for k, v in params.items()}
    for n in names:
        for s in ("fc1.w", "fc1.b", "fc2.w"):
            p[f"{n}.{s}"][:] = 0.0
        p[f"{n}.fc2.b"][:] = value
    return p


# -- SE blocks -------------------------------------------------------------------------


def test_se_identity_and_annihilating_gates():
    rng = np.random.default_rng(0)
    x = Grid(rng.normal(size=(8, 3, 3)))
    w1, b1, w2 = np.zeros((2, 8)), np.zeros(2), np.zeros((8, 2))
    np.testing.assert_allclose(se_block(x, w1, b1, w2, np.full(8, 50.0)).data, x.data, rtol=1e-15)
    np.testing.assert_allclose(se_block(x, w1, b1, w2, np.full(8, -800.0)).data, 0.0, atol=1e-300)


def test_se_pools_constant_input():
    # gate depends only on the pooled vector, which equals the channel constants
    c = np.arange(1.0, 5.0)
    x = Grid(np.broadcast_to(c[:, None, None], (4, 3, 3)).copy())
    w1 = np.eye(1, 4)
    out = se_block(x, w1, np.zeros(1), np.ones((4, 1)), np.zeros(4))
    np.testing.assert_allclose(out.data[:, 0, 0], c / (1 + np.exp(-c[0])))


def test_se_channel_mismatch():
    with pytest.raises(ShapeError):
        se_block(Grid.zeros(3, 2, 2), np.zeros((1, 4)), np.zeros(1), np.zeros((4, 1)), np.zeros(4))


# -- encoder ----------------------------------------------------------------------------


def test_encoder_shapes():
    e3, e4, e5 = net().encoder_forward(Grid.zeros(3, 64, 64))
    assert (e3.shape, e4.shape, e5.shape) == ((16, 16, 16), (32, 8, 8), (64, 4, 4))


def test_zero_input_zero_features():
    for e in net().encoder_forward(Grid.zeros(3, 32, 32)):
        assert np.all(e.data == 0)


def test_input_size_must_be_multiple_of_16():
    with pytest.raises(ShapeError, match="multiple of 16"):
        net().forward(Grid.zeros(3, 40, 40))
    with pytest.raises(ShapeError, match="channels"):
        net().forward(Grid.zeros(4, 32, 32))


def test_param_set_and_init():
    shapes = param_shapes(4)
    assert shapes["stem.w"][1] == 4 and shapes["fuse.fc1.w"] == (FUSED_WIDTH // 4, FUSED_WIDTH)
    assert [shapes[f"enc{i}.b.w"][0] for i in (1, 2, 3)] == list(STAGE_WIDTHS)
    p = init_params(np.random.default_rng(1), 4)
    assert all(np.all(p[k] == 0) for k in p if k.endswith(".b"))
    a, b = init_params(np.random.default_rng(1), 4), init_params(np.random.default_rng(1), 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    bad = dict(p)
    del bad["se3.fc1.w"]
    with pytest.raises(ValueError, match="se3.fc1.w"):
        SaliencyNet(bad)


def test_kernels_start_point_symmetric():
    p = init_params(np.random.default_rng(2))
    for k, v in p.items():
        if v.ndim == 4:
            assert np.array_equal(v, v[..., ::-1, ::-1]), k
            assert np.array_equal(symmetrize_kernel(v), v)
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    assert mirror_kernel(w)[0, 0].tolist() == [[0, 1, 2], [3, 4, 3], [2, 1, 0]]


def test_half_turn_equivariance():
    # a translation drift would break this: the map must turn with the input
    rng = np.random.default_rng(9)
    n = net(9)
    n.params = {k: v + rng.normal(scale=0.1, size=v.shape) for k, v in n.params.items()}
    x = rng.uniform(size=(3, 64, 64))
    a = n.forward(Grid(x)).data
    b = n.forward(Grid(x[:, ::-1, ::-1].copy())).data
    np.testing.assert_allclose(b, a[:, ::-1, ::-1], atol=1e-12)


def test_gradients_stay_symmetric():
    rng = np.random.default_rng(10)
    n = net(10)
    y = n.forward(Grid(rng.uniform(size=(3, 32, 32))))
    grads = n.backward(csd_loss(y, 0.5)[1], (32, 32))
    for k, g in grads.items():
        if g.ndim == 4:
            assert np.array_equal(g, g[..., ::-1, ::-1]), k


# -- head ---------------------------------------------------------------------------------


def head_params(seed=0):
    return open_gates(init_params(np.random.default_rng(seed)))


def test_constant_head_gives_half():
    e3, e4, e5 = Grid.full(16, 4, 4, 1.0), Grid.full(32, 2, 2, 2.0), Grid.full(64, 1, 1, 3.0)
    y = activation_head(e3, e4, e5, head_params())
    assert y.shape == (1, 16, 16) and np.all(y.data == 0.5)


def test_single_spike_gives_single_positive_pixel():
    e3 = np.full((16, 4, 4), 0.2)
    e3[3, 1, 2] = 5.0
    e4, e5 = Grid.full(32, 2, 2, 0.1), Grid.full(64, 1, 1, 0.4)
    y = activation_head(Grid(e3), e4, e5, head_params(), out_size=(4, 4)).data[0]
    assert (y > 0.5).sum() == 1 and y[1, 2] > 0.5


def test_head_shape_mismatch():
    with pytest.raises(ShapeError):
        activation_head(Grid.zeros(16, 4, 4), Grid.zeros(32, 3, 3), Grid.zeros(64, 1, 1), head_params())


def test_logits_have_zero_mean_and_range():
    rng = np.random.default_rng(3)
    n = net(3)
    x = Grid(rng.uniform(size=(3, 32, 32)))
    assert abs(n.probe(x, "logits").mean()) < 1e-10
    raw = n.probe(x, "Y4_raw")
    assert raw.min() > 0 and raw.max() < 1
    y = n.forward(x).data
    assert y.min() >= 0 and y.max() <= 1


def test_mean_subtraction_commutes_with_channel_sum():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(5, 6, 6))
    before = (h - h.mean(axis=(1, 2), keepdims=True)).sum(axis=0)
    after = h.sum(axis=0) - h.sum(axis=0).mean()
    np.testing.assert_allclose(before, after, atol=1e-12)


def test_forward_is_bitwise_deterministic():
    x = Grid(np.random.default_rng(5).uniform(size=(3, 32, 32)))
    assert net(1).forward(x).data.tobytes() == net(1).forward(x).data.tobytes()


# -- corner inversion -------------------------------------------------------------------------


def test_corner_inversion_rules():
    y = np.full((1, 16, 16), 0.1)
    y[0, 4:12, 4:12] = 0.9
    assert np.array_equal(corner_inversion(Grid(y)).data, y)
    np.testing.assert_allclose(corner_inversion(Grid(1 - y)).data, y, atol=1e-15)
    tie = np.full((1, 16, 16), 0.5)
    assert np.array_equal(corner_inversion(Grid(tie)).data, tie)
    assert corner_patch_mean(np.full((1, 4, 4), 0.3)) == pytest.approx(0.3)


def test_corner_inversion_is_idempotent():
    rng = np.random.default_rng(6)
    for _ in range(50):
        g = corner_inversion(Grid(rng.uniform(size=(1, 9, 13))))
        assert np.array_equal(corner_inversion(g).data, g.data)


def test_corner_inversion_rejects_multichannel():
    with pytest.raises(ShapeError):
        corner_inversion(Grid.zeros(2, 4, 4))


# -- gradients ---------------------------------------------------------------------------------


def test_end_to_end_gradient_every_parameter():
    rng = np.random.default_rng(7)
    n = net(7)
    x = Grid(rng.uniform(size=(3, 16, 16)))
    y = n.forward(x)
    _, g = csd_loss(y, 0.0)
    grads = n.backward(g, (16, 16))
    eps = 1e-6
    for name, arr in n.params.items():
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, min(4, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            fp = csd_loss(n.forward(x), 0.0)[0]
            flat[i] = orig - eps
            fm = csd_loss(n.forward(x), 0.0)[0]
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = grads[name].reshape(-1)[i]
            assert abs(ana - num) <= 1e-3 * max(abs(num), 1e-8), (name, i, ana, num)


def test_flip_commutes_with_symmetric_conv_path():
    # stride-1 conv + relu + head arithmetic with identity gates; kernels
    # mirrored left-right so the whole path is flip-equivariant
    rng = np.random.default_rng(8)
    w1 = rng.normal(size=(4, 3, 3, 3))
    w1 = w1 + w1[..., ::-1]
    w2 = rng.normal(size=(2, 4, 3, 3))
    w2 = w2 + w2[..., ::-1]
    g = DiffGraph()
    x = g.input("x")
    h = g.relu(g.conv2d(x, g.input("w1"), g.input("b1"), padding_mode="wrap"))
    h = g.conv2d(h, g.input("w2"), g.input("b2"), padding_mode="wrap")
    g.sigmoid(g.channel_sum(g.sub_broadcast(h, g.spatial_mean(h))))
    img = rng.uniform(size=(3, 8, 8))
    feed = {"w1": w1, "b1": rng.normal(size=4), "w2": w2, "b2": rng.normal(size=2)}
    a = g.forward({"x": Grid(img), **feed}).data
    b = g.forward({"x": Grid(img[:, :, ::-1].copy()), **feed}).data
    np.testing.assert_allclose(b, a[:, :, ::-1], atol=1e-6)
