"""Target Hamiltonians and the toy-parameter pre-fit.

A target is anything with ``value_and_gradient_batch(u) -> (H, dH/du)`` in
the cylindrical frame plus symmetry flags.  Two targets are registered by
name: the axisymmetric logarithmic potential and the toy Hamiltonian itself
(useful as an exactly-integrable reference).

The pre-fit chooses the spheroid parameters (alpha, gamma, rho0) so that the
toy potential surface matches the target's as closely as possible on a
sparse meridional grid, with a free additive offset soaking up the zero
point of the potential.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coords import CoordParams, PhasePoint, prolate_of_cyl_arrays
from .errors import ConfigError
from .numerics import LMConfig, levenberg_marquardt
from . import staeckel
from .staeckel import ToyParams


@dataclass(frozen=True)
class LogPotentialParams:
    """Phi = 1/2 ln(R^2 + z^2/a^2 + b^2): a is the axis ratio, b the core."""

    a: float = 0.8
    b: float = 0.14

    def __post_init__(self):
        if self.a <= 0.0 or self.b < 0.0:
            raise ValueError("need a > 0 and b >= 0")


class LogTarget:
    """H = |p|^2/2 + 1/2 ln(R^2 + z^2/a^2 + b^2)."""

    time_reversible = True
    z_symmetric = True
    axisymmetric = True
    name = "logarithmic"

    def __init__(self, params: LogPotentialParams = LogPotentialParams()):
        self.params = params

    def potential(self, R, z):
        p = self.params
        return 0.5 * np.log(R**2 + (z / p.a) ** 2 + p.b**2)

    def value_and_gradient_batch(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        p = self.params
        R, z = u[:, 0], u[:, 2]
        pR, pphi, pz = u[:, 3], u[:, 4], u[:, 5]
        q = R**2 + (z / p.a) ** 2 + p.b**2
        H = 0.5 * (pR**2 + pz**2 + (pphi / R) ** 2) + 0.5 * np.log(q)
        g = np.zeros_like(u)
        g[:, 0] = -(pphi**2) / R**3 + R / q
        g[:, 2] = z / (p.a**2 * q)
        g[:, 3] = pR
        g[:, 4] = pphi / R**2
        g[:, 5] = pz
        return H, g


class ToyTarget:
    """The toy Hamiltonian itself, exposed through the target interface."""

    time_reversible = True
    z_symmetric = True
    axisymmetric = True
    name = "toy-staeckel"

    def __init__(self, params: ToyParams):
        self.params = params

    def potential(self, R, z):
        R = np.asarray(R, dtype=float)
        z = np.asarray(z, dtype=float)
        lam, nu = prolate_of_cyl_arrays(R, z, self.params.alpha,
                                        self.params.gamma)
        return staeckel.toy_potential(lam, nu, self.params)

    def value_and_gradient_batch(self, u):
        return staeckel.hamiltonian_gradient_batch(u, self.params)


def make_target(name, **kwargs):
    """Targets by registered name: 'logarithmic' or 'toy-staeckel'."""
    if name == "logarithmic":
        return LogTarget(LogPotentialParams(**kwargs))
    if name == "toy-staeckel":
        if "params" in kwargs:
            return ToyTarget(kwargs["params"])
        coords = CoordParams(alpha=kwargs["alpha"], gamma=kwargs["gamma"])
        return ToyTarget(staeckel.ToyParams(coords=coords, rho0=kwargs["rho0"]))
    raise ConfigError(f"unknown target '{name}'")


def log_target(u: PhasePoint, params: LogPotentialParams):
    """(H, dH/du) of the logarithmic target at one phase point."""
    H, g = LogTarget(params).value_and_gradient_batch(u.to_array())
    return float(H[0]), g[0]


# ---------------------------------------------------------------------------
# toy-parameter pre-fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitRegion:
    """Sparse meridional grid: linearly spaced radii times fixed z/R rays.

    A repeated entry in z_over_r doubles that ray's weight in the fit.  The
    defaults were calibrated so the fit of the toy potential to the default
    logarithmic target lands on (alpha, gamma, rho0) = (-0.639, -0.142, 1.29)
    to about 2%; the region is configurable and recorded in run metadata.
    """

    r_min: float = 0.426
    r_max: float = 2.53
    n_r: int = 8
    z_over_r: tuple = (0.0, 0.277, 0.303, 0.303, 1.129)

    def points(self):
        r = np.linspace(self.r_min, self.r_max, self.n_r)
        R = np.concatenate([r for _ in self.z_over_r])
        z = np.concatenate([s * r for s in self.z_over_r])
        return R, z


def _unpack(x):
    """Fit variables -> (alpha, gamma, rho0, c) with alpha < gamma < 0, rho0 > 0."""
    t1, t2, t3, c = x
    gamma = -np.exp(t1)
    alpha = gamma - np.exp(t2)
    rho0 = np.exp(t3)
    return alpha, gamma, rho0, c


def fit_toy_params(target, region: FitRegion = FitRegion(),
                   lm: LMConfig = LMConfig(), x0=None):
    """Least-squares match of the toy potential surface to the target's.

    Minimizes sum over the region of [Psi(R, z; alpha, gamma, rho0) + c -
    Phi_target(R, z)]^2; the offset c makes the fit invariant under constant
    shifts of either potential.  Returns (ToyParams, offset, LMResult).
    """
    R, z = region.points()
    if R.size < 5:
        raise ConfigError("pre-fit region is underdetermined (need >= 5 points)")
    phi_t = np.asarray(target.potential(R, z), dtype=float)

    def residual(x):
        alpha, gamma, rho0, c = _unpack(x)
        if not np.isfinite([alpha, gamma, rho0]).all():
            return None
        tp = ToyParams(coords=CoordParams(alpha=alpha, gamma=gamma), rho0=rho0)
        lam, nu = prolate_of_cyl_arrays(R, z, alpha, gamma)
        psi = staeckel.toy_potential(lam, nu, tp)
        return psi + c - phi_t

    def jacobian(x):
        # small, well-scaled problem: forward differences are plenty
        r0 = residual(x)
        J = np.zeros((r0.size, 4))
        for i in range(4):
            d = 1e-7 * max(1.0, abs(x[i]))
            xp = np.array(x, dtype=float)
            xp[i] += d
            rp = residual(xp)
            J[:, i] = (rp - r0) / d
        return J

    if x0 is None:
        x0 = np.array([np.log(0.2), np.log(0.5), np.log(1.0), 0.0])
    result = levenberg_marquardt(residual, jacobian, x0, lm)
    alpha, gamma, rho0, c = _unpack(result.x)
    params = ToyParams(coords=CoordParams(alpha=alpha, gamma=gamma), rho0=rho0)
    return params, float(c), result
