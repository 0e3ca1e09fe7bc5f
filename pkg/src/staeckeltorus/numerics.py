"""Shared numerical kernels.

Bracketed 1-D root finding, damped multidimensional Newton, quadrature for
integrands with inverse-square-root endpoint behaviour, a Levenberg-Marquardt
driver that tolerates infeasible trial steps, and a dense LU solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import optimize as sopt

from .errors import (
    BracketError,
    ConvergenceError,
    DegenerateIntervalError,
    SingularJacobianError,
)


@dataclass(frozen=True)
class LMConfig:
    max_iter: int = 100
    lam0: float = 1e-3          # initial damping
    lam_up: float = 10.0        # multiply on rejected step
    lam_down: float = 10.0      # divide on accepted step
    grad_tol: float = 1e-10
    step_tol: float = 1e-12

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if min(self.grad_tol, self.step_tol) <= 0 or min(self.lam_up, self.lam_down) <= 0:
            raise ValueError("tolerances and damping factors must be positive")


@dataclass
class LMResult:
    x: np.ndarray
    chi2: float
    iterations: int
    converged: bool
    chi2_history: list


def find_root_bracketed(f, a, b, tol=1e-12):
    """Root of f in [a, b] given f(a) * f(b) <= 0 (Brent, guaranteed)."""
    fa, fb = f(a), f(b)
    if fa == 0.0:
        return a
    if fb == 0.0:
        return b
    if fa * fb > 0.0:
        raise BracketError(f"no sign change on [{a}, {b}]: f(a)={fa}, f(b)={fb}")
    return float(sopt.brentq(f, a, b, xtol=tol, rtol=4.0 * np.finfo(float).eps))


def newton_nd(F, jac, x0, tol=1e-12, max_iter=50):
    """Damped Newton for F(x) = 0 with analytic Jacobian supplier.

    Step halving enforces a monotone decrease of the sup-norm residual;
    raises when the Jacobian is singular or the iteration budget runs out.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    r = np.atleast_1d(F(x))
    rnorm = np.max(np.abs(r))
    for _ in range(max_iter):
        if rnorm < tol:
            return x
        J = np.atleast_2d(jac(x))
        try:
            dx = sla.solve(J, -r)
        except sla.LinAlgError as exc:
            raise SingularJacobianError(str(exc)) from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError("non-finite Newton step")
        step = 1.0
        for _ in range(30):
            xt = x + step * dx
            rt = np.atleast_1d(F(xt))
            tnorm = np.max(np.abs(rt))
            if np.isfinite(tnorm) and tnorm < rnorm:
                x, r, rnorm = xt, rt, tnorm
                break
            step *= 0.5
        else:
            raise ConvergenceError("Newton damping failed to reduce the residual")
    if rnorm < tol:
        return x
    raise ConvergenceError(f"newton_nd: residual {rnorm:.3e} after {max_iter} iterations")


def chebyshev_nodes(n):
    """Gauss-Chebyshev abscissae on (-1, 1): x_i = cos((2i-1) pi / 2n)."""
    i = np.arange(1, n + 1)
    return np.cos((2.0 * i - 1.0) * np.pi / (2.0 * n))


def integrate_sqrt_singular(g, a, b, n=64):
    """Integral of g(tau) / sqrt((tau - a)(b - tau)) over (a, b).

    The substitution tau = (a+b)/2 - (b-a)/2 * cos(psi) turns this into a
    smooth periodic integral; the midpoint (Gauss-Chebyshev) rule is then
    spectrally accurate.  g may be vector-valued along its last axis.
    """
    if not b > a:
        raise DegenerateIntervalError(f"need a < b, got [{a}, {b}]")
    if n < 4:
        raise ValueError("need at least 4 nodes")
    x = chebyshev_nodes(n)
    tau = 0.5 * (a + b) - 0.5 * (b - a) * x
    vals = np.asarray(g(tau))
    return (np.pi / n) * vals.sum(axis=-1 if vals.ndim == 1 else 0)


def gauss_legendre_nodes(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def levenberg_marquardt(residual, jacobian, x0, config: LMConfig = LMConfig()):
    """Minimize 0.5 ||r(x)||^2 with standard Marquardt damping.

    `residual` may return None (or non-finite values) for an infeasible x;
    such trial steps are rejected and the damping is increased, which keeps
    the iterates feasible without constrained optimization.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = residual(x)
    if r is None or not np.all(np.isfinite(r)):
        raise ValueError("infeasible starting point for Levenberg-Marquardt")
    r = np.asarray(r, dtype=float)
    if r.size < x.size:
        raise ValueError("need at least as many residuals as parameters")
    chi2 = float(r @ r)
    history = [chi2]
    lam = config.lam0
    n_iter = 0
    converged = False

    if chi2 == 0.0:
        return LMResult(x, chi2, 0, True, history)

    for n_iter in range(1, config.max_iter + 1):
        J = np.asarray(jacobian(x), dtype=float)
        g = J.T @ r
        if np.max(np.abs(g)) < config.grad_tol:
            converged = True
            n_iter -= 1
            break
        JtJ = J.T @ J
        accepted = False
        for _ in range(50):
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-30))
            try:
                dx = sla.solve(A, -g, assume_a="pos")
            except sla.LinAlgError:
                lam *= config.lam_up
                continue
            rt = residual(x + dx)
            if rt is not None and np.all(np.isfinite(rt)):
                rt = np.asarray(rt, dtype=float)
                chi2_t = float(rt @ rt)
                if chi2_t <= chi2:
                    x = x + dx
                    r, chi2 = rt, chi2_t
                    history.append(chi2)
                    lam = max(lam / config.lam_down, 1e-14)
                    accepted = True
                    break
            lam *= config.lam_up
        if not accepted:
            converged = True  # damping saturated: stationary within tolerance
            break
        if np.max(np.abs(dx)) < config.step_tol * (1.0 + np.max(np.abs(x))):
            converged = True
            break

    return LMResult(x, chi2, n_iter, converged, history)


def solve_lu(A, b):
    """Dense solve via LU with partial pivoting."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    lu, piv = sla.lu_factor(A)
    diag = np.abs(np.diag(lu))
    if not np.all(np.isfinite(lu)) or diag.min() <= diag.max() * np.finfo(float).eps * A.shape[0]:
        raise SingularJacobianError("matrix numerically singular in LU solve")
    return sla.lu_solve((lu, piv), b)


def bisect_vec(f, lo, hi, iters=90):
    """Vectorized bisection: roots of f between arrays lo < hi (sign change assumed)."""
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        take_lo = (flo * fm) > 0.0
        lo = np.where(take_lo, mid, lo)
        flo = np.where(take_lo, fm, flo)
        hi = np.where(take_lo, hi, mid)
    return 0.5 * (lo + hi)
