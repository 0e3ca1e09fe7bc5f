"""Prolate spheroidal coordinate geometry.

The meridional coordinates (lambda, nu) are the two roots tau of

    R**2 / (tau + alpha) + z**2 / (tau + gamma) = 1,

with alpha < gamma < 0, so lambda >= -alpha >= nu >= -gamma.  Azimuth phi
and an octant tag complete the chart; cylindrical phase-space coordinates
u = (R, varphi, z, p_R, p_varphi, p_z) are the canonical storage frame
everywhere in this package, prolate momenta are transient.

All low-level helpers (suffixed ``_arrays``) broadcast over numpy arrays;
the dataclass API wraps them for single points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AxisError, SingularMetricError


@dataclass(frozen=True)
class CoordParams:
    """Coordinate parameters of the defining quadric (units of length**2)."""

    alpha: float
    gamma: float

    def __post_init__(self):
        if not (self.alpha < self.gamma < 0.0):
            raise ValueError(
                f"require alpha < gamma < 0, got alpha={self.alpha}, gamma={self.gamma}"
            )


@dataclass(frozen=True)
class ProlatePoint:
    """Position in the prolate chart: lam >= -alpha, -gamma <= nu <= -alpha."""

    lam: float
    phi: float
    nu: float
    n: tuple  # octant tag, one sign per Cartesian axis


@dataclass(frozen=True)
class PhasePoint:
    """Cylindrical phase-space point u = (R, varphi, z, p_R, p_varphi, p_z)."""

    R: float
    varphi: float
    z: float
    p_R: float
    p_varphi: float
    p_z: float

    def to_array(self):
        return np.array([self.R, self.varphi, self.z, self.p_R, self.p_varphi, self.p_z])

    @staticmethod
    def from_array(u):
        return PhasePoint(*(float(x) for x in u))


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------

def prolate_of_cyl_arrays(R, z, alpha, gamma):
    """Both roots (lam, nu) of the defining quadric, vectorized.

    The larger root comes from the standard quadratic formula.  The smaller
    one is recovered through the shifted variable q = nu + gamma, whose
    product form q = z^2 (gamma - alpha) / (lam + gamma) is stable near the
    equatorial plane: z = 0 maps to nu = -gamma exactly instead of losing
    half the digits to cancellation.
    """
    R2 = np.asarray(R) ** 2
    z2 = np.asarray(z) ** 2
    s = R2 + z2 - alpha - gamma          # lam + nu
    c = alpha * gamma - R2 * gamma - z2 * alpha  # lam * nu
    disc = np.sqrt(np.maximum(s * s - 4.0 * c, 0.0))
    lam = 0.5 * (s + disc)
    nu = -gamma + z2 * (gamma - alpha) / (lam + gamma)
    # clip roundoff excursions outside the coordinate ranges
    nu = np.clip(nu, -gamma, -alpha)
    lam = np.maximum(lam, -alpha)
    return lam, nu


def cyl_of_prolate_arrays(lam, nu, alpha, gamma):
    """(R, |z|) from (lam, nu); signs are carried separately by octant tags."""
    R2 = (lam + alpha) * (nu + alpha) / (alpha - gamma)
    z2 = (lam + gamma) * (nu + gamma) / (gamma - alpha)
    return np.sqrt(np.maximum(R2, 0.0)), np.sqrt(np.maximum(z2, 0.0))


def lamnu_derivs_arrays(R, z, lam, nu, alpha, gamma):
    """First derivatives of (lam, nu) with respect to (R, z).

    From implicit differentiation of the defining quadric; the denominators
    are F'(lam) = lam - nu and F'(nu) = nu - lam.
    """
    d = lam - nu
    lam_R = 2.0 * R * (lam + gamma) / d
    lam_z = 2.0 * z * (lam + alpha) / d
    nu_R = -2.0 * R * (nu + gamma) / d
    nu_z = -2.0 * z * (nu + alpha) / d
    return lam_R, lam_z, nu_R, nu_z


def _second_derivs_one(R, z, tau, other, tau_R, tau_z, other_R, other_z, alpha, gamma):
    """Second derivatives of one root tau; `other` is the companion root."""
    d = tau - other
    tau_RR = (2.0 * (tau + gamma) + 2.0 * R * tau_R - tau_R * (tau_R - other_R)) / d
    tau_Rz = (2.0 * R * tau_z - tau_R * (tau_z - other_z)) / d
    tau_zz = (2.0 * (tau + alpha) + 2.0 * z * tau_z - tau_z * (tau_z - other_z)) / d
    return tau_RR, tau_Rz, tau_zz


def scale_factors_sq_arrays(lam, nu, alpha, gamma):
    """Squared scale factors (h_lam^2, h_phi^2, h_nu^2)."""
    h2l = (lam - nu) / (4.0 * (lam + alpha) * (lam + gamma))
    h2n = (lam - nu) / (-4.0 * (nu + alpha) * (nu + gamma))
    h2p = (lam + alpha) * (nu + alpha) / (alpha - gamma)
    return h2l, h2p, h2n


def momenta_cyl_to_prolate_arrays(R, z, p_R, p_phi, p_z, lam, nu, alpha, gamma):
    """(p_lam, p_phi, p_nu) from cylindrical momenta at an interior point."""
    lam_R, lam_z, nu_R, nu_z = lamnu_derivs_arrays(R, z, lam, nu, alpha, gamma)
    h2l, _, h2n = scale_factors_sq_arrays(lam, nu, alpha, gamma)
    p_lam = h2l * (lam_R * p_R + lam_z * p_z)
    p_nu = h2n * (nu_R * p_R + nu_z * p_z)
    return p_lam, p_phi, p_nu


def momenta_prolate_to_cyl_arrays(R, z, p_lam, p_phi, p_nu, lam, nu, alpha, gamma):
    """Inverse momentum transform (point transformation: p_u = (d tau/d u)^T p_tau)."""
    lam_R, lam_z, nu_R, nu_z = lamnu_derivs_arrays(R, z, lam, nu, alpha, gamma)
    p_R = p_lam * lam_R + p_nu * nu_R
    p_z = p_lam * lam_z + p_nu * nu_z
    return p_R, p_phi, p_z


# ---------------------------------------------------------------------------
# single-point API
# ---------------------------------------------------------------------------

def _fold_phi(varphi):
    """Fold azimuth into [0, pi/2) and return the (sign x, sign y) pair."""
    x, y = np.cos(varphi), np.sin(varphi)
    nx = 1 if x >= 0 else -1
    ny = 1 if y >= 0 else -1
    phi = np.arctan2(abs(y), abs(x))
    if phi >= 0.5 * np.pi:  # arctan2(1, 0) == pi/2: fold the boundary down
        phi = np.nextafter(0.5 * np.pi, 0.0)
    return float(phi), nx, ny


def _unfold_phi(phi, nx, ny):
    if nx >= 0 and ny >= 0:
        return phi
    if nx < 0 and ny >= 0:
        return np.pi - phi
    if nx < 0 and ny < 0:
        return np.pi + phi
    return 2.0 * np.pi - phi


def cyl_to_prolate(R, varphi, z, params: CoordParams) -> ProlatePoint:
    """Map a cylindrical position with R > 0 into the prolate chart."""
    if R <= 0.0:
        raise AxisError("prolate chart is singular on the axis R=0")
    lam, nu = prolate_of_cyl_arrays(R, z, params.alpha, params.gamma)
    phi, nx, ny = _fold_phi(varphi)
    nz = 1 if z >= 0 else -1
    return ProlatePoint(float(lam), phi, float(nu), (nx, ny, nz))


def prolate_to_cyl(point: ProlatePoint, params: CoordParams):
    """Inverse position map; returns (R, varphi, z) plus a boundary flag.

    The flag is True on the degenerate surface lam = -alpha (the R=0 edge
    excluded from the chart).
    """
    lam, nu = point.lam, point.nu
    R, absz = cyl_of_prolate_arrays(lam, nu, params.alpha, params.gamma)
    nx, ny, nz = point.n
    z = nz * absz
    varphi = _unfold_phi(point.phi, nx, ny)
    on_boundary = bool(np.isclose(lam, -params.alpha) or np.isclose(nu, -params.alpha))
    return float(R), float(varphi), float(z), on_boundary


def scale_factors(lam, nu, params: CoordParams):
    """Scale factors (h_lam, h_phi, h_nu) at a strict interior point."""
    a, g = params.alpha, params.gamma
    eps = 1e-14 * abs(g)
    if lam <= -a + eps or nu >= -a - eps or nu <= -g + eps:
        raise SingularMetricError(
            f"metric degenerate at lam={lam}, nu={nu} (boundaries lam=-alpha, "
            "nu=-alpha, nu=-gamma)"
        )
    h2l, h2p, h2n = scale_factors_sq_arrays(lam, nu, a, g)
    return float(np.sqrt(h2l)), float(np.sqrt(h2p)), float(np.sqrt(h2n))


def momenta_cyl_to_prolate(point: PhasePoint, params: CoordParams):
    """Conjugate momenta (p_lam, p_phi, p_nu) at an interior phase point.

    Singular in the equatorial plane nu = -gamma, where p_nu diverges;
    callers must stay in the cylindrical frame there.
    """
    a, g = params.alpha, params.gamma
    lam, nu = prolate_of_cyl_arrays(point.R, point.z, a, g)
    if nu <= -g + 1e-12 * abs(g):
        raise SingularMetricError("p_nu singular in the equatorial plane nu=-gamma")
    p_lam, p_phi, p_nu = momenta_cyl_to_prolate_arrays(
        point.R, point.z, point.p_R, point.p_varphi, point.p_z, lam, nu, a, g
    )
    return float(p_lam), float(p_phi), float(p_nu)


def momenta_prolate_to_cyl(R, z, p_lam, p_phi, p_nu, params: CoordParams):
    """Inverse momentum transform at the cylindrical position (R, z)."""
    a, g = params.alpha, params.gamma
    lam, nu = prolate_of_cyl_arrays(R, z, a, g)
    p_R, p_phi, p_z = momenta_prolate_to_cyl_arrays(R, z, p_lam, p_phi, p_nu, lam, nu, a, g)
    return float(p_R), float(p_phi), float(p_z)


def jacobian_prolate_wrt_cyl(point: PhasePoint, params: CoordParams):
    """6x6 matrix d(lam, phi, nu, p_lam, p_phi, p_nu)/du, unfolded chart.

    Closed-form assembly from the first and second implicit derivatives of
    the root pair.  Singular in the equatorial plane nu = -gamma.
    """
    a, g = params.alpha, params.gamma
    R, z = point.R, point.z
    p_R, p_phi, p_z = point.p_R, point.p_varphi, point.p_z
    lam, nu = prolate_of_cyl_arrays(R, z, a, g)
    if nu <= -g + 1e-12 * abs(g):
        raise SingularMetricError("Jacobian singular in the equatorial plane nu=-gamma")

    lam_R, lam_z, nu_R, nu_z = lamnu_derivs_arrays(R, z, lam, nu, a, g)
    lam_RR, lam_Rz, lam_zz = _second_derivs_one(
        R, z, lam, nu, lam_R, lam_z, nu_R, nu_z, a, g
    )
    nu_RR, nu_Rz, nu_zz = _second_derivs_one(
        R, z, nu, lam, nu_R, nu_z, lam_R, lam_z, a, g
    )

    h2l, _, h2n = scale_factors_sq_arrays(lam, nu, a, g)
    Pl = (lam + a) * (lam + g)
    dh2l_dlam = 1.0 / (4.0 * Pl) - (lam - nu) * (2.0 * lam + a + g) / (4.0 * Pl * Pl)
    dh2l_dnu = -1.0 / (4.0 * Pl)
    Qn = -(nu + a) * (nu + g)
    dh2n_dlam = 1.0 / (4.0 * Qn)
    dh2n_dnu = -1.0 / (4.0 * Qn) + (lam - nu) * (2.0 * nu + a + g) / (4.0 * Qn * Qn)

    vl = lam_R * p_R + lam_z * p_z
    vn = nu_R * p_R + nu_z * p_z

    J = np.zeros((6, 6))
    J[0, 0], J[0, 2] = lam_R, lam_z
    J[1, 1] = 1.0
    J[2, 0], J[2, 2] = nu_R, nu_z

    dh2l_dR = dh2l_dlam * lam_R + dh2l_dnu * nu_R
    dh2l_dz = dh2l_dlam * lam_z + dh2l_dnu * nu_z
    J[3, 0] = dh2l_dR * vl + h2l * (lam_RR * p_R + lam_Rz * p_z)
    J[3, 2] = dh2l_dz * vl + h2l * (lam_Rz * p_R + lam_zz * p_z)
    J[3, 3] = h2l * lam_R
    J[3, 5] = h2l * lam_z

    J[4, 4] = 1.0

    dh2n_dR = dh2n_dlam * lam_R + dh2n_dnu * nu_R
    dh2n_dz = dh2n_dlam * lam_z + dh2n_dnu * nu_z
    J[5, 0] = dh2n_dR * vn + h2n * (nu_RR * p_R + nu_Rz * p_z)
    J[5, 2] = dh2n_dz * vn + h2n * (nu_Rz * p_R + nu_zz * p_z)
    J[5, 3] = h2n * nu_R
    J[5, 5] = h2n * nu_z

    return J
