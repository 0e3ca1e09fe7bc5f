"""Recovery of model angles and frequencies by phase-space sampling.

On a fitted torus the generating function F(theta_toy, J) = theta_toy . J
+ 2 sum_k S_k(J) sin(k . theta_toy) maps toy action-angles to the model
ones.  Differentiating H(u(theta_toy, J_toy(theta_toy, J))) = H_bar(J)
with respect to J at fixed toy angle gives, per sample point m,

    (dH/du du/dJ_toy)_n = omega_n - sum_k (dH/dS_k) dS_k/dJ_n,

which is linear in the unknowns beta_n = [omega_n, dS_k/dJ_n].  With M
grid points this is an M x (W+1) least-squares problem whose design
matrix X = [1, -dH/dS_k] is shared by the three action components; only
the right-hand sides y_n differ.  It is solved through the normal
equations with a single LU factorization of X^T X (QR fallback on X for
ill-conditioned systems).

Factor bookkeeping: the real series uses one coefficient per wave of the
half set D+ with the convention J_toy = J + 2 sum k S_k cos(k . theta),
so dH/dS_k = 2 cos(k . theta) (k . dH/dJ_toy) and the recovered angles
are theta = theta_toy + 2 sum_k dS_k/dJ sin(k . theta_toy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import staeckel
from .errors import ConfigError, SingularJacobianError
from .numerics import solve_lu
from .torusfit import AngleGrid, TorusModel, torus_points


@dataclass
class AngleSolveResult:
    """Solution of the angle-recovery least-squares problem."""

    omega: np.ndarray          # (3,) model frequencies
    dS_dJ: np.ndarray          # (W, 3) coefficient derivatives
    residual_norm: np.ndarray  # (3,) per-component ||X beta - y||
    cond: float                # condition estimate of X^T X
    rows: int
    columns: int

    def __post_init__(self):
        if not (np.isfinite(self.omega).all() and np.isfinite(self.dS_dJ).all()):
            raise ValueError("non-finite angle solution")


def _dH_dS_and_y(model: TorusModel, theta, target, u=None):
    """Per-point dH/dS_k (B, W) and y_n = (dH/du du/dJ_toy)_n (B, 3)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if u is None:
        u, _, _ = torus_points(theta, model)
    _, dH = target.value_and_gradient_batch(u)
    _, du_dJ, _ = staeckel.jacobian_batch(u, model.toy_params)
    dH_dJ = np.einsum("bi,bij->bj", dH, du_dJ)  # (B, 3)
    k3 = model.waves.k3().astype(float)
    phase = theta @ k3.T  # (B, W)
    dH_dS = 2.0 * np.cos(phase) * (dH_dJ @ k3.T)
    return dH_dS, dH_dJ


def assemble_rows(model: TorusModel, grid: AngleGrid, target, u=None):
    """Design matrix X (M, W+1) and right-hand sides Y (M, 3).

    X = [1, -dH/dS_k] is identical for the three action components;
    the columns after the constant follow the wave order of the model.
    """
    if model.S is None or len(model.S) != len(model.waves):
        raise ValueError("model must carry one fitted coefficient per wave")
    theta = grid.points()
    dH_dS, Y = _dH_dS_and_y(model, theta, target, u=u)
    X = np.empty((theta.shape[0], len(model.waves) + 1))
    X[:, 0] = 1.0
    X[:, 1:] = -dH_dS
    return X, Y


def solve_model_angles(model: TorusModel, grid: AngleGrid, target,
                       use_qr=False, u=None,
                       cond_limit=1e14) -> AngleSolveResult:
    """Solve the normal equations for omega and dS_k/dJ; update the model.

    One LU factorization of X^T X serves all three right-hand sides.
    With use_qr=True the least-squares problem is instead solved through
    a QR factorization of X itself, which is slower but tolerates worse
    conditioning.
    """
    W = len(model.waves)
    if grid.M < W + 1:
        raise ConfigError(
            f"{grid.M} sample points cannot determine {W + 1} unknowns"
        )
    X, Y = assemble_rows(model, grid, target, u=u)
    A = X.T @ X
    cond = float(np.linalg.cond(A))
    if use_qr:
        beta, *_ = np.linalg.lstsq(X, Y, rcond=None)
    else:
        if not np.isfinite(cond) or cond > cond_limit:
            raise SingularJacobianError(
                f"normal matrix nearly rank deficient (cond ~ {cond:.2e}); "
                "retry with use_qr=True"
            )
        beta = solve_lu(A, X.T @ Y)  # (W+1, 3), shared factorization
    res = X @ beta - Y
    result = AngleSolveResult(
        omega=beta[0].copy(),
        dS_dJ=beta[1:].copy(),
        residual_norm=np.sqrt(np.sum(res * res, axis=0)),
        cond=cond,
        rows=grid.M,
        columns=W + 1,
    )
    model.omega = result.omega
    model.dS_dJ = result.dS_dJ
    model.meta["angle_residual_norm"] = result.residual_norm.tolist()
    model.meta["angle_cond"] = cond
    return result


def model_angle(theta_toy, model: TorusModel):
    """Model angles theta = theta_toy + 2 sum_k dS_k/dJ sin(k . theta_toy)."""
    if model.dS_dJ is None:
        raise ValueError("model has no dS_dJ; run solve_model_angles first")
    theta_toy = np.asarray(theta_toy, dtype=float)
    one = theta_toy.ndim == 1
    th = np.atleast_2d(theta_toy)
    k3 = model.waves.k3().astype(float)
    phase = th @ k3.T  # (B, W)
    theta = np.mod(th + 2.0 * np.sin(phase) @ model.dS_dJ, 2.0 * np.pi)
    return theta[0] if one else theta


def model_frequencies(theta_toy, model: TorusModel, target, u=None):
    """Pointwise frequency estimates omega = dH/du du/dJ_toy dJ_toy/dJ.

    dJ_toy/dJ = I + 2 sum_k (k outer dS_k/dJ) cos(k . theta_toy), so each
    point yields omega_n = y_n + sum_k (dH/dS_k) dS_k/dJ_n.  The grid
    mean over a full angle grid equals the least-squares omega because
    the normal-equation residual is orthogonal to the constant column.
    """
    if model.dS_dJ is None:
        raise ValueError("model has no dS_dJ; run solve_model_angles first")
    theta_toy = np.asarray(theta_toy, dtype=float)
    one = theta_toy.ndim == 1
    th = np.atleast_2d(theta_toy)
    dH_dS, y = _dH_dS_and_y(model, th, target, u=u)
    omega = y + dH_dS @ model.dS_dJ
    return omega[0] if one else omega
