import logging

import numpy as np
import pytest

from asrgan.layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    PReLU,
    Sequential,
    batch_norm,
    collect_batch_stats,
    dense,
    pixel_shuffle,
    pixel_unshuffle,
    power_iteration,
    spectral_normalize,
)
from asrgan.tensor import ShapeError, Tensor
from conftest import gradcheck, param


# -- spectral normalization ---------------------------------------------------

def test_sn_identity():
    w, _, sigma, degenerate = spectral_normalize(Tensor(np.eye(3)), np.array([1.0, 0.0, 0.0]), 1)
    assert sigma == pytest.approx(1.0, abs=1e-15) and not degenerate
    np.testing.assert_allclose(w.data, np.eye(3), atol=1e-15)


def test_sn_diagonal():
    u0 = np.array([0.6, 0.8])
    w, _, sigma, _ = spectral_normalize(Tensor(np.diag([3.0, 1.0])), u0, 10)
    assert abs(sigma - 3.0) < 1e-6
    np.testing.assert_allclose(w.data, np.diag([1.0, 1 / 3]), atol=1e-6)


def test_sn_matches_svd(rng):
    wmat = rng.standard_normal((8, 8))
    u = rng.standard_normal(8)
    _, _, sigma, _ = spectral_normalize(Tensor(wmat), u / np.linalg.norm(u), 50)
    assert abs(sigma - np.linalg.svd(wmat, compute_uv=False)[0]) < 1e-3


def test_sn_zero_weight_is_degenerate():
    w = Tensor(np.zeros((3, 4)))
    out, _, sigma, degenerate = spectral_normalize(w, np.ones(3) / np.sqrt(3), 3)
    assert degenerate and out is w and sigma == 0.0


def test_sn_layer_logs_degenerate(caplog):
    layer = Dense(4, 3, spectral_norm=True, rng=0)
    layer.weight.data[:] = 0
    with caplog.at_level(logging.WARNING):
        out = layer(Tensor(np.ones((2, 4))))
    assert layer.sn_degenerate and "degenerate" in caplog.text
    np.testing.assert_array_equal(out.data, 0.0)


def test_sn_forward_does_not_advance_u(rng):
    layer = Conv2d(3, 4, 3, spectral_norm=True, rng=rng)
    u0 = layer.sn_u.copy()
    layer(Tensor(rng.standard_normal((1, 3, 5, 5))))
    np.testing.assert_array_equal(layer.sn_u, u0)
    layer.power_iterate(2)
    wmat = layer.weight.data.reshape(4, -1)
    np.testing.assert_array_equal(layer.sn_u, power_iteration(wmat, u0, 2))


def test_sn_layer_gradient(rng):
    layer = Conv2d(2, 3, 3, spectral_norm=True, rng=rng)
    layer.power_iterate(5)
    x = param(rng, 1, 2, 4, 4)
    assert gradcheck(lambda: layer(x), [x, layer.weight, layer.bias]) < 1e-4


def test_sn_dense_gradient(rng):
    layer = Dense(5, 3, spectral_norm=True, rng=rng)
    x = param(rng, 2, 5)
    assert gradcheck(lambda: layer(x), [x, layer.weight, layer.bias]) < 1e-4


# -- prelu / dense --------------------------------------------------------------

def test_prelu_identity_and_relu(rng):
    x = np.abs(rng.standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(PReLU(3)(Tensor(x)).data, x)
    y = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(PReLU(3, init=0.0)(Tensor(y)).data, np.maximum(y, 0))


def test_prelu_gradient(rng):
    act = PReLU(3)
    act.slope.data[:] = [0.1, 0.25, -0.3]
    x = param(rng, 2, 3, 3, 3)
    assert gradcheck(lambda: act(x), [x, act.slope]) < 1e-5


def test_dense_identity_and_zero(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = rng.standard_normal(2)
    np.testing.assert_array_equal(dense(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(b)).data, np.tile(b, (3, 1)))


def test_dense_gradient(rng):
    x, w, b = param(rng, 3, 4), param(rng, 2, 4), param(rng, 2)
    assert gradcheck(lambda: dense(x, w, b), [x, w, b]) < 1e-6


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        dense(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


# -- batch norm -----------------------------------------------------------------

def test_bn_train_standardizes(rng):
    bn = BatchNorm2d(3)
    x = rng.standard_normal((4, 3, 5, 5)) * 40 + 7
    y = bn(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-6)


def test_bn_standardized_input_unchanged(rng):
    x = rng.standard_normal((4, 2, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = BatchNorm2d(2)(Tensor(x)).data
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), atol=1e-12)


def test_bn_running_stats(rng):
    bn = BatchNorm2d(2)
    x = rng.standard_normal((3, 2, 4, 4)) * 2 + 1
    bn(Tensor(x))
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * mean, atol=1e-15)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var, atol=1e-15)
    assert float(bn.num_batches) == 1


def test_bn_eval_uses_running_stats(rng):
    bn = BatchNorm2d(2)
    object.__setattr__(bn, "running_mean", np.array([1.0, -2.0]))
    object.__setattr__(bn, "running_var", np.array([4.0, 9.0]))
    bn.gamma.data[:] = [2.0, 1.0]
    bn.beta.data[:] = [0.5, 0.0]
    x = rng.standard_normal((2, 2, 3, 3))
    y = batch_norm(Tensor(x), bn, "eval").data
    exp = (x - np.array([1.0, -2.0]).reshape(1, 2, 1, 1)) / np.sqrt(np.array([4.0, 9.0]) + 1e-5).reshape(1, 2, 1, 1)
    exp = exp * np.array([2.0, 1.0]).reshape(1, 2, 1, 1) + np.array([0.5, 0.0]).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(y, exp, atol=1e-14)
    assert bn.training


def test_bn_eval_before_training_is_logged(caplog, rng):
    bn = BatchNorm2d(2).eval()
    x = rng.standard_normal((1, 2, 3, 3))
    with caplog.at_level(logging.INFO):
        y = bn(Tensor(x)).data
    assert "before any training" in caplog.text
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), atol=1e-15)


def test_bn_gradient(rng):
    bn = BatchNorm2d(2)
    bn.gamma.data[:] = [1.5, 0.7]
    bn.beta.data[:] = [0.2, -0.1]
    x = param(rng, 3, 2, 3, 3)
    assert gradcheck(lambda: bn(x), [x, bn.gamma, bn.beta]) < 1e-4


def test_bn_collector_defers_updates(rng):
    bn = BatchNorm2d(2)
    with collect_batch_stats() as stats:
        bn(Tensor(rng.standard_normal((2, 2, 3, 3))))
    assert len(stats) == 1 and stats[0][0] is bn
    np.testing.assert_array_equal(bn.running_mean, 0.0)


# -- pixel shuffle ----------------------------------------------------------------

def test_pixel_shuffle_single_pixel():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    np.testing.assert_array_equal(pixel_shuffle(x, 2).data[0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_pixel_shuffle_constant_and_inverse(rng):
    np.testing.assert_array_equal(pixel_shuffle(Tensor(np.full((1, 8, 3, 3), 2.0)), 2).data, 2.0)
    x = rng.standard_normal((2, 12, 3, 4))
    np.testing.assert_array_equal(pixel_unshuffle(pixel_shuffle(Tensor(x), 2), 2).data, x)


def test_pixel_shuffle_ordering(rng):
    x = rng.standard_normal((1, 8, 2, 3))
    y = pixel_shuffle(Tensor(x), 2).data
    for c in range(2):
        for h in range(2):
            for w in range(3):
                for dy in range(2):
                    for dx in range(2):
                        assert y[0, c, 2 * h + dy, 2 * w + dx] == x[0, c * 4 + dy * 2 + dx, h, w]


def test_pixel_shuffle_gradient_and_error(rng):
    x = param(rng, 1, 8, 2, 2)
    assert gradcheck(lambda: pixel_shuffle(x, 2), [x]) < 1e-6
    with pytest.raises(ShapeError):
        pixel_shuffle(Tensor(np.ones((1, 6, 2, 2))), 2)


# -- module plumbing ------------------------------------------------------------

def test_conv_layer_descriptor_and_shape(rng):
    conv = Conv2d(3, 8, 3, stride=2, rng=rng)
    assert conv.describe() == "k3n8s2"
    assert conv(Tensor(np.ones((1, 3, 9, 9)))).shape == (1, 8, 5, 5)


def test_state_dict_roundtrip_and_strictness(rng):
    a = Sequential(Conv2d(3, 4, 3, spectral_norm=True, rng=1), BatchNorm2d(4))
    b = Sequential(Conv2d(3, 4, 3, spectral_norm=True, rng=2), BatchNorm2d(4))
    b.load_state_dict(a.state_dict())
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)
    state = a.state_dict()
    state["0.weight"] = np.zeros((4, 3, 5, 5))
    with pytest.raises(ValueError, match="0.weight"):
        b.load_state_dict(state)
    state = a.state_dict()
    del state["1.running_var"]
    with pytest.raises(KeyError, match="1.running_var"):
        b.load_state_dict(state)


def test_train_eval_propagates():
    seq = Sequential(BatchNorm2d(2), Sequential(BatchNorm2d(2)))
    seq.eval()
    assert all(not m.training for _, m in seq.named_modules())
