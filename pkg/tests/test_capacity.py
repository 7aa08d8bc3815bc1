import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from amproto.capacity import PROTECTED_FLOOR, active_ranks, active_set, prox_step
from amproto.errors import BadShape

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_prox_arithmetic():
    out = prox_step([0.5], [0.2], 0.1, 1.0, protect=False)
    assert out[0] == max(0.5 - 0.1 * 0.2 - 0.1 * 1.0, 0.0)
    np.testing.assert_allclose(out, [0.38], atol=1e-15)


def test_prox_threshold_crossing_is_exact_zero():
    out = prox_step([0.05, 1.0], [0.0, 0.0], 0.1, 1.0)
    assert out[0] == 0.0
    assert np.signbit(out[0]) == False  # noqa: E712


def test_prox_lambda_zero_is_projected_gradient_step():
    s = np.array([5.0, 6.0, 7.0])
    g = np.array([1.0, -2.0, 80.0])
    np.testing.assert_array_equal(prox_step(s, g, 0.1, 0.0, protect=False),
                                  np.maximum(s - 0.1 * g, 0))


def test_protected_index_floor():
    out = prox_step([0.01, 0.02, 0.0], [0.0, 0.0, 0.0], 1.0, 1.0)
    np.testing.assert_array_equal(out, [0.0, PROTECTED_FLOOR, 0.0])
    rows = prox_step(np.array([[0.3, 0.1], [0.1, 0.3]]), np.zeros((2, 2)), 1.0, 1.0)
    np.testing.assert_array_equal(rows, [[PROTECTED_FLOOR, 0], [0, PROTECTED_FLOOR]])


def test_prox_errors():
    with pytest.raises(BadShape):
        prox_step([1.0, 2.0], [1.0], 0.1, 0.0)
    with pytest.raises(ValueError):
        prox_step([1.0], [1.0], 0.0, 0.0)
    with pytest.raises(ValueError):
        prox_step([1.0], [1.0], 0.1, -1.0)


@settings(max_examples=200, deadline=None)
@given(sig=arrays(np.float64, 6, elements=st.floats(0, 5)),
       g=arrays(np.float64, 6, elements=finite),
       lr=st.floats(1e-4, 1.0), lam1=st.floats(0, 3), lam2=st.floats(0, 3))
def test_prox_nonnegative_and_monotone_in_lambda(sig, g, lr, lam1, lam2):
    lo, hi = sorted((lam1, lam2))
    a = prox_step(sig, g, lr, lo)
    b = prox_step(sig, g, lr, hi)
    assert np.all(a >= 0) and np.all(b >= 0)
    assert np.all(b <= a)


@settings(max_examples=100, deadline=None)
@given(v=arrays(np.float64, 5, elements=st.floats(0, 3)), t=st.floats(1e-3, 2))
def test_prox_is_l1_proximal_operator_on_orthant(v, t):
    # argmin_x>=0 0.5||x - v||^2 + t*||x||_1, checked against a dense grid per coordinate
    out = prox_step(v, np.zeros_like(v), 1.0, t, protect=False)
    for vi, oi in zip(v, out):
        grid = np.linspace(0, 3, 30001)
        best = grid[np.argmin(0.5 * (grid - vi) ** 2 + t * grid)]
        assert abs(best - oi) <= 1e-4


def test_active_set_examples():
    a = active_set([0.5, 0.0, 0.3])
    assert a.indices.tolist() == [0, 2] and a.rank == 2
    e = active_set(np.zeros(4))
    assert e.rank == 0 and e.indices.size == 0
    assert active_set([1e-300]).rank == 1
    assert active_ranks(np.array([[1, 0, 2], [0, 0, 1]])).tolist() == [2, 1]
