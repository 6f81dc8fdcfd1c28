import numpy as np
import pytest
from scipy.linalg import expm

from mechlearn.ad import grad, gsum
from mechlearn.errors import NumericError
from mechlearn.integrators import euler_step, midpoint_step, rk4_step, rollout, substepped


def test_zero_dynamics_fixed_point():
    f = lambda x, u: np.zeros_like(x)
    x0 = np.array([1.0, -2.0])
    assert np.array_equal(rk4_step(f, x0, None, 0.1), x0)


def test_exponential_one_step():
    # xdot = x from 1.0 over dt=0.1; one-step RK4 error below 1e-7
    f = lambda x, u: x
    x1 = rk4_step(f, np.array(1.0), None, 0.1)
    assert abs(x1 - np.exp(0.1)) < 1e-7
    # and the classical Taylor value itself
    assert np.isclose(x1, 1.0 + 0.1 + 0.1 ** 2 / 2 + 0.1 ** 3 / 6 + 0.1 ** 4 / 24)


def test_linear_system_fourth_order_convergence():
    # halving dt cuts fixed-horizon error by ~16x (matrix exponential oracle)
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3)) * 0.8
    f = lambda x, u: A @ x
    x0 = rng.normal(size=3)
    exact = expm(A) @ x0

    def final_err(dt):
        x = x0
        for _ in range(round(1.0 / dt)):
            x = rk4_step(f, x, None, dt)
        return np.linalg.norm(x - exact)

    ratio = final_err(0.02) / final_err(0.01)
    assert 12.0 < ratio < 20.0


def test_exact_for_cubic_polynomial_dynamics():
    # xdot = 3t^2 + 2t + 1 integrated exactly by RK4 (track t as a state)
    def f(x, u):
        t = x[..., 0]
        return np.stack([np.ones_like(t), 3 * t ** 2 + 2 * t + 1], axis=-1)

    x = np.array([0.0, 0.0])
    for _ in range(10):
        x = rk4_step(f, x, None, 0.1)
    t = x[0]
    assert np.isclose(x[1], t ** 3 + t ** 2 + t, rtol=1e-13)


def test_rollout_prefix_consistency_and_empty():
    f = lambda x, u: np.sin(x) + u
    x0 = np.array([0.3])
    us = [np.array([0.1]) * k for k in range(5)]
    full = rollout(f, x0, us, 0.05)
    short = rollout(f, x0, us[:2], 0.05)
    assert full.shape == (6, 1)
    assert np.array_equal(full[:3], short)
    only = rollout(f, x0, [], 0.05)
    assert np.array_equal(only, x0[None, :])


def test_rollout_double_integrator_closed_form():
    # xdot = (v, u): x(t) = x0 + v0 t + 0.5 u t^2 to 1e-10
    def f(x, u):
        return np.stack([x[..., 1], np.full_like(x[..., 1], u)], axis=-1)

    u = 0.7
    xs = rollout(f, np.array([0.2, -0.4]), [u] * 50, 0.02)
    t = 50 * 0.02
    assert abs(xs[-1, 0] - (0.2 - 0.4 * t + 0.5 * u * t ** 2)) < 1e-10
    assert abs(xs[-1, 1] - (-0.4 + u * t)) < 1e-10


def test_rollout_reports_failing_step():
    def f(x, u):
        return x * x  # finite-time blowup

    with pytest.raises(NumericError, match="step"):
        with np.errstate(over="ignore", invalid="ignore"):
            rollout(f, np.array([5.0]), [None] * 100, 1.0)


def test_step_differentiable_matches_fd():
    # d(rk4_step)/dx via AD vs central differences
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])

    def f(x, u):
        return x @ A.T

    x0 = np.array([0.4, -0.1])
    w = np.array([1.0, 2.0])

    def scalar(xv):
        return gsum(rk4_step(f, xv, None, 0.05) * w)

    g = grad(scalar, x0)
    h = 1e-6
    g_fd = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        g_fd[i] = (np.sum(rk4_step(f, x0 + e, None, 0.05) * w)
                   - np.sum(rk4_step(f, x0 - e, None, 0.05) * w)) / (2 * h)
    assert np.max(np.abs(g - g_fd)) / max(1, np.max(np.abs(g_fd))) < 1e-5


def test_euler_and_midpoint_available_behind_same_interface():
    f = lambda x, u: -x
    x0 = np.array(1.0)
    e = euler_step(f, x0, None, 0.1)
    m = midpoint_step(f, x0, None, 0.1)
    r = rk4_step(f, x0, None, 0.1)
    exact = np.exp(-0.1)
    assert abs(e - exact) > abs(m - exact) > abs(r - exact)


def test_substepped_matches_manual_chain():
    f = lambda x, u: np.sin(x)
    stepped = substepped(rk4_step, 5)
    x0 = np.array(0.3)
    direct = x0
    for _ in range(5):
        direct = rk4_step(f, direct, None, 0.02)
    assert np.allclose(stepped(f, x0, None, 0.1), direct, rtol=0, atol=0)
