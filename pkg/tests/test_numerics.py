"""Solvers and quadratures against closed-form and library oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staeckeltorus import numerics
from staeckeltorus.errors import BracketError, DegenerateIntervalError
from staeckeltorus.numerics import LMConfig, levenberg_marquardt


def test_find_root_bracketed_cubic():
    root = numerics.find_root_bracketed(lambda x: x**3 - 2.0, 0.0, 2.0)
    assert abs(root - 2.0 ** (1.0 / 3.0)) < 1e-12


def test_find_root_bracket_must_straddle():
    with pytest.raises(BracketError):
        numerics.find_root_bracketed(lambda x: x**2 + 1.0, -1.0, 1.0)


def test_newton_nd_quadratic_system():
    def F(x):
        return np.array([x[0] ** 2 + x[1] - 3.0, x[0] - x[1]])

    def J(x):
        return np.array([[2.0 * x[0], 1.0], [1.0, -1.0]])

    x = numerics.newton_nd(F, J, np.array([2.0, 0.5]))
    expected = 0.5 * (-1.0 + np.sqrt(13.0))
    assert np.abs(x - expected).max() < 1e-12


def test_sqrt_singular_quadrature_constant():
    """Integral of 1/sqrt((x-a)(b-x)) over (a,b) is pi for any a < b."""
    val = numerics.integrate_sqrt_singular(lambda t: np.ones_like(t), 0.3, 2.1)
    assert abs(val - np.pi) < 1e-14


def test_sqrt_singular_quadrature_polynomial():
    """Integral of x/sqrt((x-a)(b-x)) is pi*(a+b)/2 (midpoint moment)."""
    a, b = -0.4, 1.7
    val = numerics.integrate_sqrt_singular(lambda t: t, a, b)
    assert abs(val - np.pi * 0.5 * (a + b)) < 1e-13


def test_sqrt_singular_quadrature_vs_scipy():
    from scipy.integrate import quad

    a, b = 0.2, 1.9

    def g(t):
        return np.exp(-t) * (1.0 + 0.5 * t * t)

    ref, _ = quad(lambda t: g(t) / np.sqrt((t - a) * (b - t)), a, b,
                  points=[a, b], limit=200)
    val = numerics.integrate_sqrt_singular(g, a, b, n=64)
    assert abs(val - ref) < 1e-10


def test_sqrt_singular_rejects_degenerate_interval():
    with pytest.raises(DegenerateIntervalError):
        numerics.integrate_sqrt_singular(lambda t: t, 1.0, 1.0)


def test_chebyshev_nodes_are_midpoint_angles():
    n = 7
    x = numerics.chebyshev_nodes(n)
    expected = np.cos((2 * np.arange(1, n + 1) - 1) * np.pi / (2 * n))
    assert np.abs(x - expected).max() < 1e-15


def test_solve_lu_matches_numpy():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(12, 12))
    B = rng.normal(size=(12, 3))
    X = numerics.solve_lu(A, B)
    assert np.abs(X - np.linalg.solve(A, B)).max() < 1e-10


@given(st.floats(-3.0, 3.0))
@settings(max_examples=60, deadline=None)
def test_bisect_vec_finds_cubic_roots(c):
    f = lambda x: x**3 - c
    lo = np.full(1, -3.0)
    hi = np.full(1, 3.0)
    root = numerics.bisect_vec(f, lo, hi)
    assert abs(root[0] ** 3 - c) < 1e-9


def test_lm_converges_on_rosenbrock_least_squares():
    def residual(x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    def jacobian(x):
        return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])

    res = levenberg_marquardt(residual, jacobian, np.array([-1.2, 1.0]),
                              LMConfig(max_iter=200))
    assert res.converged
    assert np.abs(res.x - 1.0).max() < 1e-8


def test_lm_chi2_is_monotone():
    def residual(x):
        return np.array([x[0] - 3.0, 2.0 * x[1] + 1.0, x[0] * x[1]])

    def jacobian(x):
        return np.array([[1.0, 0.0], [0.0, 2.0], [x[1], x[0]]])

    res = levenberg_marquardt(residual, jacobian, np.array([5.0, 5.0]))
    hist = np.array(res.chi2_history)
    assert (np.diff(hist) <= 1e-15).all()


def test_lm_rejects_infeasible_steps():
    """residual=None marks infeasible trials; LM must stay feasible."""
    calls = {"infeasible": 0}

    def residual(x):
        if x[0] <= 0.0:
            calls["infeasible"] += 1
            return None
        return np.array([np.log(x[0]) - 1.0])

    def jacobian(x):
        return np.array([[1.0 / x[0]]])

    res = levenberg_marquardt(residual, jacobian, np.array([0.05]),
                              LMConfig(max_iter=200))
    assert res.converged
    assert abs(res.x[0] - np.e) < 1e-8


def test_lm_config_validation():
    with pytest.raises(ValueError):
        LMConfig(max_iter=0)
