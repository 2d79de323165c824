import numpy as np
import pytest

from foamopt.gcmma import GCMMAState, gcmma_step, minimize


def test_unconstrained_quadratic():
    def f(x, grad):
        return (x[0] - 3) ** 2, 2 * (x - 3), None, None
    x, f0, _ = minimize(f, [0.5], np.zeros(1), np.full(1, 10.0), max_iter=30)
    assert x[0] == pytest.approx(3.0, abs=1e-4)


def test_active_lower_bound():
    def f(x, grad):
        return x[0], np.ones(1), None, None
    x, _, _ = minimize(f, [7.0], np.full(1, 2.0), np.full(1, 10.0), max_iter=50)
    assert x[0] == pytest.approx(2.0, abs=1e-6)


def test_constrained_kkt_point():
    def f(x, grad):
        return x @ x, 2 * x, np.array([1 - x.sum()]), -np.ones((1, 2))
    x, _, g = minimize(f, [0.9, 0.1], np.zeros(2), np.ones(2), m=1, max_iter=100)
    assert np.allclose(x, [0.5, 0.5], atol=1e-3)
    assert g[0] <= 1e-6


def test_step_stays_in_bounds_and_moves_at_most_move_limit():
    st = GCMMAState(3, 1)
    x = np.array([0.5, 0.2, 0.9])
    lo, hi = np.zeros(3), np.ones(3)
    xn, _, _ = gcmma_step(st, x, lo, hi, 0.0, np.array([1.0, -1.0, 5.0]), np.array([-1.0]), np.zeros((1, 3)),
                          lambda z: (z @ [1.0, -1.0, 5.0], np.array([-1.0])))
    assert np.all(xn >= lo) and np.all(xn <= hi)
    assert np.max(np.abs(xn - x)) <= st.move + 1e-12


def test_strict_mode_still_converges():
    def f(x, grad):
        return float(np.sum((x - 0.3) ** 2)), 2 * (x - 0.3), None, None
    x, _, _ = minimize(f, np.full(4, 0.9), np.zeros(4), np.ones(4), max_iter=60, accept_descent=False)
    assert np.allclose(x, 0.3, atol=1e-4)
