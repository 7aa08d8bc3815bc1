import numpy as np
import pytest

from amproto.backbone import BackboneParams, embed, embed_backward
from amproto.errors import BadShape
from amproto.grad import finite_diff_check


def test_identity_and_zero_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 2))
    p = BackboneParams(np.eye(4), np.zeros(4))
    assert np.array_equal(embed(x, p), x)
    b = rng.standard_normal(4)
    F = embed(np.zeros((4, 3, 2)), BackboneParams(np.eye(4), b))
    assert np.array_equal(F, np.broadcast_to(b[:, None, None], F.shape))


def test_per_location_oracle_and_batch():
    rng = np.random.default_rng(1)
    p = BackboneParams(rng.standard_normal((6, 4)), rng.standard_normal(6))
    x = rng.standard_normal((3, 4, 2, 5))
    F = embed(x, p)
    for n in range(3):
        np.testing.assert_array_equal(F[n], embed(x[n], p))
        for h in range(2):
            for w in range(5):
                np.testing.assert_allclose(F[n, :, h, w], p.weight @ x[n, :, h, w] + p.bias,
                                           atol=1e-13)


def test_linear_without_bias():
    rng = np.random.default_rng(2)
    p = BackboneParams(rng.standard_normal((5, 3)), np.zeros(5))
    x, y = rng.standard_normal((2, 3, 4, 4))
    lhs = embed(2.5 * x - 0.5 * y, p)
    np.testing.assert_allclose(lhs, 2.5 * embed(x, p) - 0.5 * embed(y, p), atol=1e-12)


def test_init_distribution():
    p = BackboneParams.init(16, 9, seed=3)
    assert p.weight.shape == (16, 9)
    assert np.all(np.abs(p.weight) <= 1 / 3) and np.all(p.bias == 0)
    assert BackboneParams.init(16, 9, 3).weight.tobytes() == p.weight.tobytes()


def test_shape_errors():
    p = BackboneParams.init(4, 3, 0)
    with pytest.raises(BadShape):
        embed(np.zeros((2, 3, 3)), p)
    with pytest.raises(BadShape):
        embed_backward(np.zeros((5, 3, 3)), np.zeros((3, 3, 3)), p)


def test_backward_zero_and_locality():
    rng = np.random.default_rng(4)
    p = BackboneParams(rng.standard_normal((4, 3)), rng.standard_normal(4))
    x = rng.standard_normal((3, 2, 2))
    dW, db, dx = embed_backward(np.zeros((4, 2, 2)), x, p)
    assert not dW.any() and not db.any() and not dx.any()
    up = np.zeros((4, 2, 2))
    up[:, 1, 0] = rng.standard_normal(4)
    dW, db, dx = embed_backward(up, x, p)
    np.testing.assert_allclose(dW, np.outer(up[:, 1, 0], x[:, 1, 0]), atol=1e-15)
    np.testing.assert_allclose(db, up[:, 1, 0], atol=1e-15)


def test_backward_finite_differences():
    rng = np.random.default_rng(5)
    W, b = rng.standard_normal((4, 3)), rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 2, 3))
    G = rng.standard_normal((2, 4, 2, 3))

    def loss(W_, b_, x_):
        return float((G * np.tanh(embed(x_, BackboneParams(W_, b_)))).sum())

    up = G * (1 - np.tanh(embed(x, BackboneParams(W, b))) ** 2)
    dW, db, dx = embed_backward(up, x, BackboneParams(W, b))
    assert finite_diff_check(lambda v: loss(v, b, x), W, dW) <= 1e-5
    assert finite_diff_check(lambda v: loss(W, v, x), b, db) <= 1e-5
    assert finite_diff_check(lambda v: loss(W, b, v), x, dx) <= 1e-5
