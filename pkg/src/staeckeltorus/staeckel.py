"""Integrable toy Hamiltonian: the perfect oblate spheroid.

The potential separates in prolate spheroidal coordinates,

    Psi(lam, nu) = -(f(lam) - f(nu)) / (lam - nu),
    f(tau) = -2 pi rho0 alpha sqrt(-gamma (tau+gamma)) arctan sqrt((tau+gamma)/(-gamma)),

so the separated momenta obey 2 (tau+alpha)(tau+gamma) p_tau^2 = N(tau, I) with

    N(tau, I) = f(tau) + (tau+gamma) (E - I2/(tau+alpha)) + 2 (alpha-gamma) I3,

the same cubic-like function on both branches.  I2 = p_phi^2/2; the second
separation constant is normalized so that I3 >= 0 with equality exactly for
equatorial orbits.  Everything downstream (actions, angles, frequencies,
Jacobians) is built from N and its derivatives.

Quadratures use the substitution tau = m - h cos(psi) which absorbs the
inverse-square-root behaviour at turning points; the nu-branch integrands
additionally absorb the p_nu ~ 1/sqrt(nu+gamma) pole at the equatorial
plane analytically, so every integrand evaluated here is smooth.

All private ``*_batch`` helpers broadcast over a leading batch axis; public
operations wrap single points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import coords
from .coords import CoordParams, PhasePoint
from .errors import ConvergenceError, NoBoundOrbitError
from .numerics import bisect_vec, chebyshev_nodes

DEFAULT_NODES = 64        # complete (action / frequency) quadratures
DEFAULT_INC_NODES = 64    # incomplete (angle) quadratures
_TURN_SIN_TOL = 1e-5      # |sin psi| below which analytic dtheta/du is ill-posed
_PLANE_TOL = 1e-9         # |nu+gamma|/|gamma| below which a point counts as planar


@dataclass(frozen=True)
class ToyParams:
    """Perfect-oblate-spheroid parameters; G is fixed to 1."""

    coords: CoordParams
    rho0: float

    def __post_init__(self):
        if self.rho0 <= 0.0:
            raise ValueError("rho0 must be positive")

    @property
    def alpha(self):
        return self.coords.alpha

    @property
    def gamma(self):
        return self.coords.gamma


@dataclass(frozen=True)
class Integrals:
    """Isolating integrals (E, I2, I3) plus the sense of rotation.

    I2 = p_phi^2 / 2 is unsigned, so the sign of p_phi rides along
    separately; it fixes which of the two congruent tubes is meant.
    """

    E: float
    I2: float
    I3: float
    pphi_sign: int = 1

    @property
    def pphi(self):
        return self.pphi_sign * np.sqrt(2.0 * self.I2)


@dataclass(frozen=True)
class ToyAA:
    """Toy action-angle coordinates (theta in [0, 2pi)^3, J_phi signed)."""

    theta: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "J", np.asarray(self.J, dtype=float))


# ---------------------------------------------------------------------------
# the Staeckel f and the potential
# ---------------------------------------------------------------------------

def _stE(tau, p: ToyParams):
    """s = sqrt((tau+gamma)/(-gamma)), the natural argument of f."""
    return np.sqrt(np.maximum(np.asarray(tau) + p.gamma, 0.0) / (-p.gamma))


def _f(tau, p: ToyParams):
    s = _stE(tau, p)
    return 2.0 * np.pi * p.rho0 * p.alpha * p.gamma * s * np.arctan(s)


def _phi_of_s(s):
    """(arctan s + s/(1+s^2)) / s, series-protected at s=0."""
    s = np.asarray(s, dtype=float)
    small = s < 1e-3
    ss = np.where(small, 0.0, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = np.arctan(ss) / np.where(small, 1.0, ss) + 1.0 / (1.0 + ss * ss)
    s2 = s * s
    series = 2.0 - (4.0 / 3.0) * s2 + (6.0 / 5.0) * s2 * s2
    return np.where(small, series, direct)


def _dphi_over_s(s):
    """phi'(s)/s, series-protected at s=0."""
    s = np.asarray(s, dtype=float)
    small = s < 1e-2
    ss = np.where(small, 1.0, s)
    one = 1.0 + ss * ss
    direct = (1.0 / one - np.arctan(ss) / ss) / (ss * ss) - 2.0 / (one * one)
    s2 = s * s
    series = -8.0 / 3.0 + (24.0 / 5.0) * s2 - (48.0 / 7.0) * s2 * s2
    return np.where(small, series, direct)


def _fp(tau, p: ToyParams):
    return -np.pi * p.rho0 * p.alpha * _phi_of_s(_stE(tau, p))


def _fpp(tau, p: ToyParams):
    return -np.pi * p.rho0 * p.alpha * _dphi_over_s(_stE(tau, p)) / (-2.0 * p.gamma)


def toy_potential(lam, nu, params: ToyParams):
    """Staeckel potential Psi(lam, nu); the lam -> nu limit is analytic."""
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    a, g = params.alpha, params.gamma
    if np.any(lam < -a - 1e-9 * abs(g)) or np.any(nu < -g - 1e-9 * abs(g)) or np.any(
        nu > -a + 1e-9 * abs(g)
    ):
        raise ValueError("arguments outside prolate coordinate ranges")
    d = lam - nu
    tiny = np.abs(d) < 1e-8 * abs(g)
    dsafe = np.where(tiny, 1.0, d)
    direct = -(_f(lam, params) - _f(nu, params)) / dsafe
    limit = -_fp(0.5 * (lam + nu), params)
    out = np.where(tiny, limit, direct)
    return out if out.ndim else float(out)


def _dpsi(lam, nu, p: ToyParams):
    """(dPsi/dlam, dPsi/dnu), with the removable lam=nu limit."""
    d = lam - nu
    tiny = np.abs(d) < 1e-8 * abs(p.gamma)
    dsafe = np.where(tiny, 1.0, d)
    psi = toy_potential(lam, nu, p)
    dl = np.where(tiny, -0.5 * _fpp(lam, p), (-_fp(lam, p) - psi) / dsafe)
    dn = np.where(tiny, -0.5 * _fpp(nu, p), (_fp(nu, p) + psi) / dsafe)
    return dl, dn


# ---------------------------------------------------------------------------
# separated momentum function N and derivatives
# ---------------------------------------------------------------------------

def _N(tau, E, I2, I3, p: ToyParams):
    a, g = p.alpha, p.gamma
    return _f(tau, p) + (tau + g) * (E - I2 / (tau + a)) + 2.0 * (a - g) * I3


def _N_I(tau, p: ToyParams):
    """Partials of N with respect to (E, I2, I3); stacked on a new first axis."""
    a, g = p.alpha, p.gamma
    tau = np.asarray(tau, dtype=float)
    return np.stack(
        [tau + g, -(tau + g) / (tau + a), np.full_like(tau, 2.0 * (a - g))], axis=0
    )


def _N_I_dtau(tau, p: ToyParams):
    """d/dtau of the three partials above."""
    a, g = p.alpha, p.gamma
    tau = np.asarray(tau, dtype=float)
    return np.stack(
        [np.ones_like(tau), -(a - g) / (tau + a) ** 2, np.zeros_like(tau)], axis=0
    )


def _Np(tau, E, I2, p: ToyParams):
    a, g = p.alpha, p.gamma
    return _fp(tau, p) + E - I2 * (a - g) / (tau + a) ** 2


def _Npp(tau, E, I2, p: ToyParams):
    a, g = p.alpha, p.gamma
    return _fpp(tau, p) + 2.0 * I2 * (a - g) / (tau + a) ** 3


def p_tau_squared(tau, I: Integrals, params: ToyParams):
    """Separated p_tau^2 = N(tau, I) / (2 (tau+alpha)(tau+gamma)); both branches.

    Negative values mark the classically forbidden region.
    """
    tau = np.asarray(tau, dtype=float)
    a, g = params.alpha, params.gamma
    num = _N(tau, I.E, I.I2, I.I3, params)
    den = 2.0 * (tau + a) * (tau + g)
    out = num / den
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Hamiltonian, gradient, integrals of motion
# ---------------------------------------------------------------------------

def hamiltonian_batch(u, p: ToyParams):
    u = np.atleast_2d(u)
    R, z = u[:, 0], u[:, 2]
    pR, pphi, pz = u[:, 3], u[:, 4], u[:, 5]
    lam, nu = coords.prolate_of_cyl_arrays(R, z, p.alpha, p.gamma)
    return 0.5 * (pR**2 + pz**2 + (pphi / R) ** 2) + toy_potential(lam, nu, p)


def hamiltonian_gradient_batch(u, p: ToyParams):
    """(H, dH/du) in the cylindrical frame (regular everywhere with R > 0)."""
    u = np.atleast_2d(u)
    R, z = u[:, 0], u[:, 2]
    pR, pphi, pz = u[:, 3], u[:, 4], u[:, 5]
    lam, nu = coords.prolate_of_cyl_arrays(R, z, p.alpha, p.gamma)
    lam_R, lam_z, nu_R, nu_z = coords.lamnu_derivs_arrays(
        R, z, lam, nu, p.alpha, p.gamma
    )
    psi_l, psi_n = _dpsi(lam, nu, p)
    H = 0.5 * (pR**2 + pz**2 + (pphi / R) ** 2) + toy_potential(lam, nu, p)
    grad = np.zeros_like(u)
    grad[:, 0] = -(pphi**2) / R**3 + psi_l * lam_R + psi_n * nu_R
    grad[:, 2] = psi_l * lam_z + psi_n * nu_z
    grad[:, 3] = pR
    grad[:, 4] = pphi / R**2
    grad[:, 5] = pz
    return H, grad


def toy_hamiltonian(u: PhasePoint, params: ToyParams) -> float:
    """Toy energy E = kinetic + Psi, evaluated in the cylindrical frame."""
    return float(hamiltonian_batch(u.to_array(), params)[0])


def integrals_batch(u, p: ToyParams):
    """(E, I2, I3) arrays from phase points; I3 extracted on the lam branch."""
    u = np.atleast_2d(u)
    R, z = u[:, 0], u[:, 2]
    pR, pphi, pz = u[:, 3], u[:, 4], u[:, 5]
    a, g = p.alpha, p.gamma
    lam, nu = coords.prolate_of_cyl_arrays(R, z, a, g)
    E = hamiltonian_batch(u, p)
    I2 = 0.5 * pphi**2
    lam_R, lam_z, _, _ = coords.lamnu_derivs_arrays(R, z, lam, nu, a, g)
    h2l = (lam - nu) / (4.0 * (lam + a) * (lam + g))
    p_lam = h2l * (lam_R * pR + lam_z * pz)
    X = (
        2.0 * (lam + a) * (lam + g) * p_lam**2
        - _f(lam, p)
        - (lam + g) * (E - I2 / (lam + a))
    )
    I3 = np.maximum(X / (2.0 * (a - g)), 0.0)
    return E, I2, I3


def integrals_from_phase(u: PhasePoint, params: ToyParams) -> Integrals:
    """Algebraic extraction of the isolating integrals at a phase point."""
    E, I2, I3 = integrals_batch(u.to_array(), params)
    sign = 1 if u.p_varphi >= 0 else -1
    return Integrals(float(E[0]), float(I2[0]), float(I3[0]), sign)


def dI_du_batch(u, p: ToyParams):
    """(B, 3, 6) gradients of (E, I2, I3) in the cylindrical frame."""
    u = np.atleast_2d(u)
    B = u.shape[0]
    R, z = u[:, 0], u[:, 2]
    pR, pphi, pz = u[:, 3], u[:, 4], u[:, 5]
    a, g = p.alpha, p.gamma
    lam, nu = coords.prolate_of_cyl_arrays(R, z, a, g)
    E, dE = hamiltonian_gradient_batch(u, p)
    I2 = 0.5 * pphi**2

    lam_R, lam_z, nu_R, nu_z = coords.lamnu_derivs_arrays(R, z, lam, nu, a, g)
    lam_RR, lam_Rz, lam_zz = coords._second_derivs_one(
        R, z, lam, nu, lam_R, lam_z, nu_R, nu_z, a, g
    )
    Pl = (lam + a) * (lam + g)
    h2l = (lam - nu) / (4.0 * Pl)
    dh2l_dlam = 1.0 / (4.0 * Pl) - (lam - nu) * (2.0 * lam + a + g) / (4.0 * Pl * Pl)
    dh2l_dnu = -1.0 / (4.0 * Pl)
    vl = lam_R * pR + lam_z * pz
    p_lam = h2l * vl

    dlam = np.zeros((B, 6))
    dlam[:, 0], dlam[:, 2] = lam_R, lam_z
    dplam = np.zeros((B, 6))
    dh2l_dR = dh2l_dlam * lam_R + dh2l_dnu * nu_R
    dh2l_dz = dh2l_dlam * lam_z + dh2l_dnu * nu_z
    dplam[:, 0] = dh2l_dR * vl + h2l * (lam_RR * pR + lam_Rz * pz)
    dplam[:, 2] = dh2l_dz * vl + h2l * (lam_Rz * pR + lam_zz * pz)
    dplam[:, 3] = h2l * lam_R
    dplam[:, 5] = h2l * lam_z

    dI2 = np.zeros((B, 6))
    dI2[:, 4] = pphi

    # I3 = X / (2 (alpha - gamma)) with X(lam, p_lam, E, I2)
    dX_dlam = (
        2.0 * (2.0 * lam + a + g) * p_lam**2
        - _fp(lam, p)
        - (E - I2 / (lam + a))
        - (lam + g) * I2 / (lam + a) ** 2
    )
    dX_dplam = 4.0 * Pl * p_lam
    dX_dE = -(lam + g)
    dX_dI2 = (lam + g) / (lam + a)
    dI3 = (
        dX_dlam[:, None] * dlam
        + dX_dplam[:, None] * dplam
        + dX_dE[:, None] * dE
        + dX_dI2[:, None] * dI2
    ) / (2.0 * (a - g))

    return np.stack([dE, dI2, dI3], axis=1)


# ---------------------------------------------------------------------------
# turning points
# ---------------------------------------------------------------------------

def _lambda_scan_seed(E, I2, I3, p: ToyParams):
    """Coarse geometric scan for a point with N >= 0 on the lam branch."""
    a, g = p.alpha, p.gamma
    span = g - a
    offs = span * np.logspace(-4.0, 5.0, 160)
    taus = -a + offs  # (160,)
    vals = _N(taus[None, :], E[:, None], I2[:, None], I3[:, None], p)
    idx = np.argmax(vals, axis=1)
    best = np.take_along_axis(vals, idx[:, None], axis=1)[:, 0]
    if np.any(best < 0.0):
        raise NoBoundOrbitError(
            "no classically allowed lambda interval for the given integrals"
        )
    return taus[idx]


def turning_points_batch(E, I2, I3, p: ToyParams, lam_seed=None):
    """(lam_min, lam_max, nu_max) arrays; nu_min is -gamma identically."""
    E = np.atleast_1d(np.asarray(E, dtype=float))
    I2 = np.broadcast_to(np.asarray(I2, dtype=float), E.shape).copy()
    I3 = np.broadcast_to(np.asarray(I3, dtype=float), E.shape).copy()
    a, g = p.alpha, p.gamma
    span = g - a
    if np.any(E >= 0.0):
        raise NoBoundOrbitError("E >= 0 is unbound (Psi -> 0 at infinity)")
    if np.any(I2 <= 0.0):
        raise NoBoundOrbitError("tube orbits require a nonzero azimuthal action")

    def Nl(tau):
        return _N(tau, E, I2, I3, p)

    if lam_seed is None:
        seed = _lambda_scan_seed(E, I2, I3, p)
    else:
        seed = np.broadcast_to(np.asarray(lam_seed, dtype=float), E.shape).copy()
        bad = Nl(seed) < 0.0
        if np.any(bad):
            Eb, I2b, I3b = E[bad], I2[bad], I3[bad]
            seed[bad] = _lambda_scan_seed(Eb, I2b, I3b, p)

    # outer turning point: expand right until N < 0
    hi = seed + span
    for _ in range(200):
        mask = Nl(hi) >= 0.0
        if not np.any(mask):
            break
        hi = np.where(mask, seed + 2.0 * (hi - seed), hi)
    else:
        raise NoBoundOrbitError("failed to bracket the outer lambda turning point")
    lam_hi = bisect_vec(Nl, seed, hi)

    # inner turning point: shrink toward -alpha
    off = seed + a  # > 0
    lo = -a + off
    found = np.zeros(E.shape, dtype=bool)
    lo_prev = seed.copy()
    for _ in range(80):
        lo_try = -a + off * 0.5
        neg = Nl(lo_try) < 0.0
        newly = neg & ~found
        lo = np.where(newly, lo_try, lo)
        lo_prev = np.where(~found & ~neg, lo_try, lo_prev)
        found |= neg
        off *= 0.5
        if np.all(found):
            break
    lam_lo = np.where(found, bisect_vec(Nl, lo, lo_prev), -a)

    # nu turning point: N crosses from <= 0 at -gamma to +inf at -alpha
    nu_hi = np.full(E.shape, -g)
    live = I3 > 1e-300
    if np.any(live):
        El, I2l, I3l = E[live], I2[live], I3[live]

        def Nn(tau):
            return _N(tau, El, I2l, I3l, p)

        frac = np.linspace(0.0, 1.0, 130) ** 2
        taus = -g + (span - 1e-14 * abs(g)) * frac
        vals = _N(
            taus[None, :], El[:, None], I2l[:, None], I3l[:, None], p
        )
        pos = vals > 0.0
        if np.any(~pos.any(axis=1)):
            raise NoBoundOrbitError("failed to bracket the nu turning point")
        first = np.argmax(pos, axis=1)
        hi_n = taus[first]
        lo_n = taus[np.maximum(first - 1, 0)]
        nu_hi[live] = bisect_vec(Nn, lo_n, hi_n)
    return lam_lo, lam_hi, nu_hi


def turning_points(I: Integrals, params: ToyParams):
    """Orbit boundaries (lam_minus, lam_plus, nu_plus); nu_minus = -gamma."""
    lo, hi, nhi = turning_points_batch(I.E, I.I2, I.I3, params)
    return float(lo[0]), float(hi[0]), float(nhi[0])


# ---------------------------------------------------------------------------
# branch node data (everything evaluated on psi-grids is smooth)
# ---------------------------------------------------------------------------

def _S_lam(tau, a_l, b_l, E, I2, I3, p: ToyParams, one_m_cos, one_p_cos):
    """S = N / ((tau-a)(b-tau)) on the lam branch, Taylor-protected at the ends.

    one_m_cos/one_p_cos are (1 -+ cos psi) so the endpoint distances are
    exact products h*(1 -+ cos psi) rather than differences of roots.
    """
    h = 0.5 * (b_l - a_l)
    dist_a = h * one_m_cos
    dist_b = h * one_p_cos
    N = _N(tau, E, I2, I3, p)
    denom = dist_a * dist_b
    near_a = dist_a < 1e-4 * h
    near_b = dist_b < 1e-4 * h
    safe = np.where(denom > 0.0, denom, 1.0)
    S = N / safe
    if np.any(near_a):
        Sa = (_Np(a_l, E, I2, p) + 0.5 * _Npp(a_l, E, I2, p) * dist_a) / np.where(
            dist_b > 0.0, dist_b, 1.0
        )
        S = np.where(near_a, Sa, S)
    if np.any(near_b):
        Sb = (-_Np(b_l, E, I2, p) + 0.5 * _Npp(b_l, E, I2, p) * dist_b) / np.where(
            dist_a > 0.0, dist_a, 1.0
        )
        S = np.where(near_b, Sb, S)
    return np.maximum(S, 1e-300)


def _S_nu(tau, b_n, E, I2, I3, p: ToyParams, one_p_cos, degenerate):
    """S with p_nu^2 = S (b-nu)/(nu+gamma) on the nu branch; >= 0 and smooth."""
    a, g = p.alpha, p.gamma
    h = 0.5 * (b_n + g)
    dist_b = h * one_p_cos
    N = _N(tau, E, I2, I3, p)
    near_b = dist_b < 1e-4 * np.maximum(h, 1e-300)
    denom = 2.0 * (tau + a) * np.where(dist_b > 0.0, dist_b, 1.0)
    S = N / denom
    limit = -_Np(tau, E, I2, p) / (2.0 * (tau + a))
    S = np.where(near_b | degenerate, limit, S)
    return np.maximum(S, 1e-300)


class _ToyFrame:
    """All per-torus quadrature data for a batch of integrals of motion.

    Built once per (E, I2, I3, sign) batch and reused by actions, angles,
    frequencies and Jacobians.  Shapes: batch B, nodes n.
    """

    def __init__(self, E, I2, I3, pphi, p: ToyParams, n=DEFAULT_NODES,
                 lam_seed=None, want_second=False):
        self.p = p
        self.E = np.atleast_1d(np.asarray(E, dtype=float))
        B = self.E.shape[0]
        self.I2 = np.broadcast_to(np.asarray(I2, dtype=float), (B,)).copy()
        self.I3 = np.broadcast_to(np.asarray(I3, dtype=float), (B,)).copy()
        self.pphi = np.broadcast_to(np.asarray(pphi, dtype=float), (B,)).copy()
        self.n = n
        a_l, b_l, b_n = turning_points_batch(self.E, self.I2, self.I3, p, lam_seed)
        self.lam_lo, self.lam_hi, self.nu_hi = a_l, b_l, b_n
        ac, g = p.alpha, p.gamma

        x = chebyshev_nodes(n)  # cos(psi_i), interior
        self._cos = x
        one_m = 1.0 - x
        one_p = 1.0 + x

        # --- lambda branch
        hl = 0.5 * (b_l - a_l)
        ml = 0.5 * (b_l + a_l)
        taul = ml[:, None] - hl[:, None] * x[None, :]
        Sl = _S_lam(taul, a_l[:, None], b_l[:, None], self.E[:, None],
                    self.I2[:, None], self.I3[:, None], p,
                    one_m[None, :], one_p[None, :])
        Ddl = 2.0 * (taul + ac) * (taul + g)
        Wl = Sl * Ddl
        sqWl = np.sqrt(Wl)
        NIl = _N_I(taul, p)  # (3, B, n)
        self.Phi_l = NIl / (2.0 * sqWl[None])  # (3, B, n)
        sin2 = 1.0 - x * x
        self.J_lam = (hl**2 / n) * np.sum(sin2[None, :] * np.sqrt(Sl / Ddl), axis=1)
        self.A_lam = np.mean(self.Phi_l, axis=2).T  # (B, 3)
        self._lam_node = dict(tau=taul, S=Sl, Dd=Ddl, W=Wl, sqW=sqWl, h=hl, m=ml)

        # --- nu branch
        hn = 0.5 * (b_n + g)
        mn = 0.5 * (b_n - g)
        self._nu_degenerate = hn < 1e-13 * abs(g)
        taun = mn[:, None] - hn[:, None] * x[None, :]
        taun = np.where(self._nu_degenerate[:, None], (-g) * np.ones_like(taun), taun)
        Sn = _S_nu(taun, b_n[:, None], self.E[:, None], self.I2[:, None],
                   self.I3[:, None], p, one_p[None, :],
                   self._nu_degenerate[:, None])
        sqSn = np.sqrt(Sn)
        NIn = _N_I(taun, p)
        self.Phi_n = NIn / (4.0 * (taun + ac)[None] * sqSn[None])
        self.J_nu = (2.0 * hn / n) * np.sum(sqSn * one_p[None, :], axis=1)
        self.A_nu = 2.0 * np.mean(self.Phi_n, axis=2).T  # (B, 3)
        self._nu_node = dict(tau=taun, S=Sn, sqS=sqSn, h=hn, m=mn)

        # --- assemble J and dJ/dI
        self.J = np.stack([self.J_lam, self.pphi, self.J_nu], axis=1)
        A = np.zeros((B, 3, 3))
        A[:, 0, :] = self.A_lam
        A[:, 1, 1] = 1.0 / self.pphi
        A[:, 2, :] = self.A_nu
        self.A = A
        self.Binv = np.linalg.inv(A)  # dI/dJ

        self.dA = None
        if want_second:
            self._second_order()

    # -- second-order (dA/dI) machinery -------------------------------------
    def _endpoint_vels(self):
        """da/dI_k, db/dI_k for both branches (implicit: N(root, I) = 0)."""
        p = self.p
        E, I2 = self.E, self.I2

        def vel(tau):
            NI = _N_I(tau, p)  # (3, B)
            return -NI / _Np(tau, E, I2, p)[None]

        a_k = vel(self.lam_lo)  # (3, B)
        b_k = vel(self.lam_hi)
        bn_k = np.where(
            self._nu_degenerate[None, :], 0.0, vel(np.maximum(self.nu_hi, -p.gamma))
        )
        # degenerate nu interval: root velocity from dI3 only, via expansion
        if np.any(self._nu_degenerate):
            Npl = _Np(self.nu_hi, E, I2, p)
            NI = _N_I(self.nu_hi, p)
            alt = -NI / Npl[None]
            bn_k = np.where(self._nu_degenerate[None, :], alt, bn_k)
        return a_k, b_k, bn_k

    def _second_order(self):
        p = self.p
        ac, g = p.alpha, p.gamma
        n = self.n
        B = self.E.shape[0]
        x = self._cos
        one_m, one_p = 1.0 - x, 1.0 + x
        a_k, b_k, bn_k = self._endpoint_vels()

        # lambda branch: dPhi_l[j, k] (3, 3, B, n)
        nd = self._lam_node
        tau, S, Dd, W, sqW = nd["tau"], nd["S"], nd["Dd"], nd["W"], nd["sqW"]
        h, m = nd["h"], nd["m"]
        mk = 0.5 * (a_k + b_k)  # (3, B)
        hk = 0.5 * (b_k - a_k)
        ck = mk[:, :, None] - hk[:, :, None] * x[None, None, :]  # (3, B, n)
        E_, I2_ = self.E[:, None], self.I2[:, None]
        Np_n = _Np(tau, E_, I2_, p)
        NI = _N_I(tau, p)          # (3, B, n)
        NId = _N_I_dtau(tau, p)    # (3, B, n)
        Nval = _N(tau, E_, self.I2[:, None], self.I3[:, None], p)
        dN = Np_n[None] * ck + NI  # (k, B, n): total dN/dI_k at fixed psi
        h2s2 = (h[:, None] ** 2) * (1.0 - x * x)[None, :]
        dS = dN / h2s2[None] - 2.0 * S[None] * hk[:, :, None] / h[None, :, None]
        Ddp = 2.0 * (2.0 * tau + ac + g)
        dW = dS * Dd[None] + S[None] * Ddp[None] * ck
        # dPhi[j, k] = NId_j ck_k / (2 sqW) - NI_j dW_k / (4 W^{3/2})
        dPhi_l = (
            NId[:, None] * ck[None] / (2.0 * sqW[None, None])
            - NI[:, None] * dW[None] / (4.0 * (W * sqW)[None, None])
        )
        dA_lam = np.mean(dPhi_l, axis=3)  # (j, k, B)

        # nu branch
        nd = self._nu_node
        tau, S, sqS = nd["tau"], nd["S"], nd["sqS"]
        h = np.maximum(nd["h"], 1e-300)
        hk_n = 0.5 * bn_k
        ck_n = hk_n[:, :, None] * one_m[None, None, :]
        Np_n = _Np(tau, E_, I2_, p)
        NI = _N_I(tau, p)
        NId = _N_I_dtau(tau, p)
        Nval = _N(tau, E_, self.I2[:, None], self.I3[:, None], p)
        Nsafe = np.where(np.abs(Nval) > 0.0, Nval, -1e-300)
        dN = Np_n[None] * ck_n + NI
        dS_over_S = dN / Nsafe[None] - ck_n / (tau + ac)[None] - (
            hk_n[:, :, None] / h[None, :, None]
        )
        dPhi_n = (
            NId[:, None] * ck_n[None] / (4.0 * ((tau + ac) * sqS)[None, None])
            - self.Phi_n[:, None]
            * (ck_n[None] / (tau + ac)[None, None] + 0.5 * dS_over_S[None])
        )
        dA_nu = 2.0 * np.mean(dPhi_n, axis=3)

        dA = np.zeros((B, 3, 3, 3))  # [b, row, j(col of A), k(dI_k)]
        dA[:, 0] = np.transpose(dA_lam, (2, 0, 1))
        dA[:, 2] = np.transpose(dA_nu, (2, 0, 1))
        dA[:, 1, 1, 1] = -1.0 / self.pphi**3
        self.dA = dA
        self._ep_vels = (a_k, b_k, bn_k)

    # -- incomplete integrals ------------------------------------------------
    def psi_of_lam(self, lam):
        nd = self._lam_node
        xv = np.clip((nd["m"] - lam) / np.maximum(nd["h"], 1e-300), -1.0, 1.0)
        return np.arccos(xv)

    def psi_of_nu(self, nu):
        nd = self._nu_node
        xv = np.clip((nd["m"] - nu) / np.maximum(nd["h"], 1e-300), -1.0, 1.0)
        return np.arccos(xv)

    def _inc_common(self, branch, psibar, n_gl, want_dI):
        """Incomplete integrals int_0^psibar Phi_j dpsi (and their I-derivatives)."""
        p = self.p
        ac, g = p.alpha, p.gamma
        xg, wg = np.polynomial.legendre.leggauss(n_gl)
        psi = 0.5 * psibar[:, None] * (xg[None, :] + 1.0)  # (B, ngl)
        wts = 0.5 * psibar[:, None] * wg[None, :]
        cx = np.cos(psi)
        one_m, one_p = 1.0 - cx, 1.0 + cx
        E_, I2_, I3_ = self.E[:, None], self.I2[:, None], self.I3[:, None]
        if branch == "lam":
            nd = self._lam_node
            h, m = nd["h"], nd["m"]
            tau = m[:, None] - h[:, None] * cx
            S = _S_lam(tau, self.lam_lo[:, None], self.lam_hi[:, None],
                       E_, I2_, I3_, p, one_m, one_p)
            Dd = 2.0 * (tau + ac) * (tau + g)
            W = S * Dd
            sqW = np.sqrt(W)
            NI = _N_I(tau, p)
            Phi = NI / (2.0 * sqW[None])
        else:
            nd = self._nu_node
            h, m = np.maximum(nd["h"], 1e-300), nd["m"]
            tau = m[:, None] - nd["h"][:, None] * cx
            S = _S_nu(tau, self.nu_hi[:, None], E_, I2_, I3_, p, one_p,
                      self._nu_degenerate[:, None])
            sqS = np.sqrt(S)
            NI = _N_I(tau, p)
            Phi = NI / (4.0 * (tau + ac)[None] * sqS[None])
        gvals = np.sum(Phi * wts[None], axis=2)  # (3, B)
        if not want_dI:
            return gvals.T, None, None

        assert self.dA is not None, "frame built without want_second"
        a_k, b_k, bn_k = self._ep_vels
        if branch == "lam":
            mk = 0.5 * (a_k + b_k)
            hk = 0.5 * (b_k - a_k)
            ck = mk[:, :, None] - hk[:, :, None] * cx[None]
            Np_n = _Np(tau, E_, I2_, p)
            NId = _N_I_dtau(tau, p)
            dN = Np_n[None] * ck + NI
            h2s2 = (h[:, None] ** 2) * np.maximum(1.0 - cx * cx, 1e-300)
            dS = dN / h2s2[None] - 2.0 * S[None] * hk[:, :, None] / h[None, :, None]
            Ddp = 2.0 * (2.0 * tau + ac + g)
            dW = dS * Dd[None] + S[None] * Ddp[None] * ck
            dPhi = (
                NId[:, None] * ck[None] / (2.0 * sqW[None, None])
                - NI[:, None] * dW[None] / (4.0 * (W * sqW)[None, None])
            )
            hk_out, mk_out = hk, mk
        else:
            hk_n = 0.5 * bn_k
            ck = hk_n[:, :, None] * one_m[None]
            Np_n = _Np(tau, E_, I2_, p)
            NId = _N_I_dtau(tau, p)
            Nval = _N(tau, E_, I2_, I3_, p)
            Nsafe = np.where(np.abs(Nval) > 0.0, Nval, -1e-300)
            dN = Np_n[None] * ck + NI
            dS_over_S = dN / Nsafe[None] - ck / (tau + ac)[None] - (
                hk_n[:, :, None] / h[None, :, None]
            )
            dPhi = (
                NId[:, None] * ck[None] / (4.0 * ((tau + ac) * sqS)[None, None])
                - Phi[:, None] * (ck[None] / (tau + ac)[None, None]
                                  + 0.5 * dS_over_S[None])
            )
            hk_out, mk_out = hk_n, hk_n
        dg = np.sum(dPhi * wts[None, None], axis=3)  # (j, k, B)
        # boundary term: Phi_j(psibar) * dpsibar/dI_k
        sinb = np.sin(psibar)
        cosb = np.cos(psibar)
        near_turn = np.abs(sinb) < _TURN_SIN_TOL
        sin_safe = np.where(near_turn, 1.0, sinb)
        psibar_k = (hk_out * cosb[None] - mk_out) / (h * sin_safe)[None]
        if branch == "lam":
            taub = m - h * cosb
            one_mb, one_pb = 1.0 - cosb, 1.0 + cosb
            Sb = _S_lam(taub, self.lam_lo, self.lam_hi, self.E, self.I2, self.I3,
                        p, one_mb, one_pb)
            Ddb = 2.0 * (taub + ac) * (taub + g)
            Phib = _N_I(taub, p) / (2.0 * np.sqrt(Sb * Ddb))[None]
        else:
            taub = m - nd["h"] * cosb
            Sb = _S_nu(taub, self.nu_hi, self.E, self.I2, self.I3, p,
                       1.0 + cosb, self._nu_degenerate)
            Phib = _N_I(taub, p) / (4.0 * (taub + ac) * np.sqrt(Sb))[None]
        dg = dg + Phib[:, None] * psibar_k[None]
        dg = np.where(near_turn[None, None, :], np.nan, dg)
        return gvals.T, np.transpose(dg, (2, 0, 1)), near_turn

    def incomplete_lam(self, lam, n_gl=DEFAULT_INC_NODES, want_dI=False):
        return self._inc_common("lam", self.psi_of_lam(lam), n_gl, want_dI)

    def incomplete_nu(self, nu, n_gl=DEFAULT_INC_NODES, want_dI=False):
        return self._inc_common("nu", self.psi_of_nu(nu), n_gl, want_dI)

    def p_of_lam(self, lam):
        """|p_lam| at lam (positive branch)."""
        p = self.p
        psibar = self.psi_of_lam(lam)
        cx = np.cos(psibar)
        S = _S_lam(lam, self.lam_lo, self.lam_hi, self.E, self.I2, self.I3,
                   p, 1.0 - cx, 1.0 + cx)
        Dd = 2.0 * (lam + p.alpha) * (lam + p.gamma)
        h = self._lam_node["h"]
        return h * np.sin(psibar) * np.sqrt(S / Dd)

    def p_of_nu(self, nu):
        """|p_nu| at nu; diverges at the plane nu = -gamma."""
        p = self.p
        psibar = self.psi_of_nu(nu)
        cx = np.cos(psibar)
        S = _S_nu(nu, self.nu_hi, self.E, self.I2, self.I3, p, 1.0 + cx,
                  self._nu_degenerate)
        h = np.maximum(self._nu_node["h"], 1e-300)
        dist_a = np.maximum(h * (1.0 - cx), 1e-300)
        dist_b = h * (1.0 + cx)
        return np.sqrt(S * dist_b / dist_a)


# ---------------------------------------------------------------------------
# actions, frequencies, angles
# ---------------------------------------------------------------------------

def toy_actions(I: Integrals, params: ToyParams, n=DEFAULT_NODES) -> np.ndarray:
    """Toy actions (J_lam, J_phi, J_nu); J_phi = p_phi carries the L_z sign."""
    fr = _ToyFrame(I.E, I.I2, I.I3, I.pphi, params, n=n)
    return fr.J[0]


def toy_frequencies_and_dJdI(I: Integrals, params: ToyParams, n=DEFAULT_NODES):
    """(Omega, dJ/dI); Omega is the energy row of (dJ/dI)^{-1}."""
    fr = _ToyFrame(I.E, I.I2, I.I3, I.pphi, params, n=n)
    return fr.Binv[0, 0, :].copy(), fr.A[0].copy()


def _point_geometry(u, p: ToyParams):
    u = np.atleast_2d(u)
    R, z = u[:, 0], u[:, 2]
    pR, pphi, pz = u[:, 3], u[:, 4], u[:, 5]
    lam, nu = coords.prolate_of_cyl_arrays(R, z, p.alpha, p.gamma)
    lam_R, lam_z, nu_R, nu_z = coords.lamnu_derivs_arrays(R, z, lam, nu,
                                                          p.alpha, p.gamma)
    h2l, _, h2n = coords.scale_factors_sq_arrays(lam, nu, p.alpha, p.gamma)
    p_lam = h2l * (lam_R * pR + lam_z * pz)
    with np.errstate(divide="ignore", invalid="ignore"):
        p_nu = h2n * (nu_R * pR + nu_z * pz)
    return lam, nu, p_lam, p_nu


def _W_parts(fr: _ToyFrame, lam, nu, sig_lam, quadrant, n_gl=DEFAULT_INC_NODES,
             want_dI=False):
    """Branch-resolved dW/dI_j terms for the lam and nu degrees of freedom.

    quadrant in {0, 1, 2, 3}: (z>=0 outgoing, z>=0 infalling, z<0 outgoing,
    z<0 infalling); the libration in z advances one quarter period in each.
    """
    g_l, dg_l, flag_l = fr.incomplete_lam(lam, n_gl, want_dI)
    t_n, dt_n, flag_n = fr.incomplete_nu(nu, n_gl, want_dI)
    G = np.pi * fr.A_lam          # (B, 3): half-period lam integrals
    T = 0.5 * np.pi * fr.A_nu     # quarter-period nu integrals

    up = sig_lam >= 0
    W_lam = np.where(up[:, None], g_l, 2.0 * G - g_l)
    q = quadrant[:, None]
    W_nu = np.select(
        [q == 0, q == 1, q == 2], [t_n, 2.0 * T - t_n, 2.0 * T + t_n],
        default=4.0 * T - t_n,
    )
    if not want_dI:
        return W_lam, W_nu, None, None, None
    dG = np.pi * fr.dA[:, 0]      # (B, 3, 3)
    dT = 0.5 * np.pi * fr.dA[:, 2]
    dW_lam = np.where(up[:, None, None], dg_l, 2.0 * dG - dg_l)
    qq = quadrant[:, None, None]
    dW_nu = np.select(
        [qq == 0, qq == 1, qq == 2], [dt_n, 2.0 * dT - dt_n, 2.0 * dT + dt_n],
        default=4.0 * dT - dt_n,
    )
    return W_lam, W_nu, dW_lam, dW_nu, (flag_l | flag_n)


def _quadrant_of(z, pz, p_nu):
    """z-libration quarter: 0 outgoing above, 1 infalling above, 2/3 below.

    'Outgoing' is decided by the sign of p_nu (equivalently of d|nu|/dt),
    not of p_z, which is contaminated by the lam motion near the nu turning
    point.  Exactly in the plane p_nu diverges with the sign of z*p_z, so
    p_z breaks the tie there.
    """
    above = z >= 0.0
    away = np.where(p_nu != 0.0, p_nu > 0.0, np.where(above, pz > 0.0, pz < 0.0))
    return np.select(
        [above & away, above & ~away, ~above & away], [0, 1, 2], default=3
    ).astype(int)


def angles_actions_batch(u, p: ToyParams, n=DEFAULT_NODES, n_gl=DEFAULT_INC_NODES,
                         frame=None):
    """(theta (B,3), J (B,3), frame) for a batch of phase points."""
    u = np.atleast_2d(u)
    E, I2, I3 = integrals_batch(u, p)
    pphi = u[:, 4]
    lam, nu, p_lam, p_nu = _point_geometry(u, p)
    if frame is None:
        frame = _ToyFrame(E, I2, I3, pphi, p, n=n, lam_seed=lam)
    quadrant = _quadrant_of(u[:, 2], u[:, 5], p_nu)
    W_lam, W_nu, _, _, _ = _W_parts(frame, lam, nu, np.sign(p_lam) + (p_lam == 0),
                                    quadrant, n_gl)
    w = W_lam + W_nu
    w[:, 1] += u[:, 1] / pphi
    theta = np.einsum("bj,bjt->bt", w, frame.Binv)
    return np.mod(theta, 2.0 * np.pi), frame.J, frame


def toy_angles(u: PhasePoint, params: ToyParams, n=DEFAULT_NODES,
               n_gl=DEFAULT_INC_NODES) -> np.ndarray:
    """Toy angles in [0, 2pi)^3 at a phase point on a bound orbit."""
    theta, _, _ = angles_actions_batch(u.to_array(), params, n, n_gl)
    return theta[0]


# ---------------------------------------------------------------------------
# inverse map: (theta, J) -> u
# ---------------------------------------------------------------------------

def _cold_seed_I(J_target, pphi, p: ToyParams):
    """Rough (E, I3) seed for the action -> integrals Newton solve."""
    Jlam, Jnu = float(J_target[0]), float(J_target[2])
    I2 = 0.5 * pphi**2
    a, g = p.alpha, p.gamma
    psi_c = -_f(-a, p) / (g - a)

    def jlam_at(E):
        try:
            fr = _ToyFrame(np.array([E]), I2, 0.0, abs(pphi), p, n=24)
        except NoBoundOrbitError:
            return None
        return fr.J_lam[0]

    target = Jlam + Jnu + 1e-12
    fracs = np.geomspace(1e-4, 0.999, 40)
    E_last, v_last = None, None
    E_bracket = None
    for fr_ in fracs[::-1]:  # from near-escape downward
        E = psi_c * fr_
        v = jlam_at(E)
        if v is None:
            continue
        if v <= target and v_last is not None and v_last > target:
            E_bracket = (E, E_last)
            break
        E_last, v_last = E, v
    if E_bracket is None:
        # fall back: smallest bound energy found
        if E_last is None:
            raise NoBoundOrbitError("no bound orbit for requested actions")
        E_bracket = (psi_c * 0.999, E_last)
    lo, hi = E_bracket
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        v = jlam_at(mid)
        if v is None or v < target:
            lo = mid
        else:
            hi = mid
    E0 = 0.5 * (lo + hi)

    if Jnu <= 0.0:
        return E0, 0.0
    scale = abs(E0)
    I3 = 1e-6 * scale
    for _ in range(60):
        try:
            fr = _ToyFrame(np.array([E0]), I2, I3, abs(pphi), p, n=24)
        except NoBoundOrbitError:
            I3 *= 0.5
            break
        if fr.J_nu[0] >= Jnu:
            break
        I3 *= 2.0
    lo3, hi3 = 0.0, I3
    for _ in range(40):
        mid = 0.5 * (lo3 + hi3)
        try:
            fr = _ToyFrame(np.array([E0]), I2, mid, abs(pphi), p, n=24)
            v = fr.J_nu[0]
        except NoBoundOrbitError:
            v = np.inf
        if v < Jnu:
            lo3 = mid
        else:
            hi3 = mid
    return E0, 0.5 * (lo3 + hi3)


def solve_integrals_from_actions(J_toy, p: ToyParams, guess=None, n=DEFAULT_NODES,
                                 tol=1e-12, max_iter=60):
    """Batch Newton for (E, I3) with J_phi fixed; returns a _ToyFrame.

    guess: optional (E0, I30) arrays; a cold start is derived from the first
    row otherwise.
    """
    J = np.atleast_2d(np.asarray(J_toy, dtype=float))
    B = J.shape[0]
    pphi = J[:, 1]
    if np.any(np.abs(pphi) <= 0.0):
        raise NoBoundOrbitError("J_phi = 0 tori are not mappable (tube orbits only)")
    if np.any(J[:, 0] < -1e-12) or np.any(J[:, 2] < -1e-12):
        raise ValueError("oscillatory actions must be nonnegative")
    I2 = 0.5 * pphi**2
    if guess is None:
        E0, I30 = _cold_seed_I(np.median(J, axis=0), float(np.median(pphi)), p)
        E = np.full(B, E0)
        I3 = np.full(B, I30)
    else:
        E = np.broadcast_to(np.asarray(guess[0], dtype=float), (B,)).copy()
        I3 = np.broadcast_to(np.asarray(guess[1], dtype=float), (B,)).copy()
    psi_c = -_f(-p.alpha, p) / (p.gamma - p.alpha)
    lam_seed = None
    frame = None
    scale = 1.0 + np.abs(J[:, 0]) + np.abs(J[:, 2])
    for it in range(max_iter):
        frame = _ToyFrame(E, I2, I3, pphi, p, n=n, lam_seed=lam_seed)
        lam_seed = 0.5 * (frame.lam_lo + frame.lam_hi)
        r1 = frame.J_lam - J[:, 0]
        r2 = frame.J_nu - J[:, 2]
        res = np.maximum(np.abs(r1), np.abs(r2)) / scale
        if np.all(res < tol):
            return frame, E, I3
        a11, a13 = frame.A_lam[:, 0], frame.A_lam[:, 2]
        a31, a33 = frame.A_nu[:, 0], frame.A_nu[:, 2]
        det = a11 * a33 - a13 * a31
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        dE = -(a33 * r1 - a13 * r2) / det
        dI3 = -(-a31 * r1 + a11 * r2) / det
        # clamped, lightly damped update keeps iterates in the bound region
        dE = np.clip(dE, -0.25 * np.abs(E), 0.25 * np.abs(psi_c))
        E = np.clip(E + dE, psi_c * (1.0 - 1e-12), -1e-14 * abs(psi_c))
        I3 = np.maximum(I3 + dI3, 0.0)
    raise ConvergenceError(
        f"action->integrals Newton did not converge: worst residual {res.max():.3e}"
    )


def _theta_of_chi(fr: _ToyFrame, chi_lam, chi_nu, n_gl):
    """(theta_lam, theta_nu) and their chi-Jacobian on the frame's tori."""
    p = fr.p
    two_pi = 2.0 * np.pi
    cl = np.mod(chi_lam, two_pi)
    cn = np.mod(chi_nu, two_pi)
    psil = np.where(cl <= np.pi, cl, two_pi - cl)
    lam = fr._lam_node["m"] - fr._lam_node["h"] * np.cos(psil)
    g_l, _, _ = fr._inc_common("lam", psil, n_gl, False)
    G = np.pi * fr.A_lam
    W_lam = np.where((cl <= np.pi)[:, None], g_l, 2.0 * G - g_l)

    two_cn = np.mod(2.0 * cn, 2.0 * two_pi)
    psin = np.minimum(np.mod(two_cn, two_pi), two_pi - np.mod(two_cn, two_pi))
    # quarter index 0..3
    qn = np.minimum((cn / (0.5 * np.pi)).astype(int), 3)
    t_n, _, _ = fr._inc_common("nu", psin, n_gl, False)
    T = 0.5 * np.pi * fr.A_nu
    qq = qn[:, None]
    W_nu = np.select(
        [qq == 0, qq == 1, qq == 2], [t_n, 2.0 * T - t_n, 2.0 * T + t_n],
        default=4.0 * T - t_n,
    )
    w = W_lam + W_nu  # (B, 3), phi-part excluded (it cancels for lam/nu angles)
    th_l = np.einsum("bj,bj->b", w, fr.Binv[:, :, 0])
    th_n = np.einsum("bj,bj->b", w, fr.Binv[:, :, 2])

    # Jacobian: dW_lam/dchi_lam = Phi(psil), dW_nu/dchi_nu = 2 Phi_nu(psin)
    ac, g2 = p.alpha, p.gamma
    cxl = np.cos(psil)
    Sl = _S_lam(lam, fr.lam_lo, fr.lam_hi, fr.E, fr.I2, fr.I3, p,
                1.0 - cxl, 1.0 + cxl)
    Ddl = 2.0 * (lam + ac) * (lam + g2)
    Phil = _N_I(lam, p) / (2.0 * np.sqrt(Sl * Ddl))[None]  # (3, B)
    cxn = np.cos(psin)
    nun = fr._nu_node["m"] - fr._nu_node["h"] * np.cos(psin)
    Sn = _S_nu(nun, fr.nu_hi, fr.E, fr.I2, fr.I3, p, 1.0 + cxn,
               fr._nu_degenerate)
    Phin = _N_I(nun, p) / (4.0 * (nun + ac) * np.sqrt(Sn))[None]
    J11 = np.einsum("jb,bj->b", Phil, fr.Binv[:, :, 0])
    J21 = np.einsum("jb,bj->b", Phil, fr.Binv[:, :, 2])
    J12 = 2.0 * np.einsum("jb,bj->b", Phin, fr.Binv[:, :, 0])
    J22 = 2.0 * np.einsum("jb,bj->b", Phin, fr.Binv[:, :, 2])
    return th_l, th_n, (J11, J12, J21, J22), (lam, nun, psil, psin, qn, cl, cn, w)


def forward_batch(theta, J_toy, p: ToyParams, guess=None, n=DEFAULT_NODES,
                  n_gl=DEFAULT_INC_NODES, tol=1e-11, max_iter=80):
    """Map (theta, J_toy) -> cylindrical phase points u (B, 6).

    Stage 1 solves the integrals of motion from the actions; stage 2 solves
    the two libration phases chi = (chi_lam, chi_nu) from the angles, then
    the azimuth follows linearly.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    J = np.atleast_2d(np.asarray(J_toy, dtype=float))
    B = theta.shape[0]
    fr, E, I3 = solve_integrals_from_actions(J, p, guess=guess, n=n)

    chi_l = theta[:, 0].copy()
    chi_n = theta[:, 2].copy()
    two_pi = 2.0 * np.pi
    last = None
    stall = 0
    best = np.inf
    for it in range(max_iter):
        th_l, th_n, Jm, geom = _theta_of_chi(fr, chi_l, chi_n, n_gl)
        r1 = np.mod(th_l - theta[:, 0] + np.pi, two_pi) - np.pi
        r2 = np.mod(th_n - theta[:, 2] + np.pi, two_pi) - np.pi
        res = np.maximum(np.abs(r1), np.abs(r2))
        worst = res.max()
        last = geom
        if worst < tol:
            break
        # roundoff floor: accept a stalled but already-tiny residual
        if worst > 0.7 * best:
            stall += 1
            if stall >= 4 and worst < 1e-7:
                break
        else:
            stall = 0
        best = min(best, worst)
        J11, J12, J21, J22 = Jm
        det = J11 * J22 - J12 * J21
        det = np.where(np.abs(det) < 1e-300, 1e-300, det)
        d1 = -(J22 * r1 - J12 * r2) / det
        d2 = -(-J21 * r1 + J11 * r2) / det
        lim = 0.9
        mag = np.maximum(np.abs(d1), np.abs(d2))
        sc = np.where(mag > lim, lim / np.maximum(mag, 1e-300), 1.0)
        chi_l = chi_l + sc * d1
        chi_n = chi_n + sc * d2
    else:
        raise ConvergenceError(
            f"angle inversion did not converge: worst residual {res.max():.3e}"
        )

    lam, nu, psil, psin, qn, cl, cn, w = last
    ac, g = p.alpha, p.gamma
    R, absz = coords.cyl_of_prolate_arrays(lam, nu, ac, g)
    sigz = np.where(cn < np.pi, 1.0, -1.0)
    z = sigz * absz
    sig_plam = np.where(cl <= np.pi, 1.0, -1.0)
    sig_pnu = np.where(np.sin(2.0 * cn) >= 0.0, 1.0, -1.0)
    p_lam = sig_plam * fr.p_of_lam(lam)

    # azimuth from the phi angle component
    phi_az = theta[:, 1] - np.einsum("bj,bj->b", w, fr.Binv[:, :, 1])
    pphi = J[:, 1]

    plane = (nu + g) < _PLANE_TOL * abs(g)
    lam_R, lam_z, nu_R, nu_z = coords.lamnu_derivs_arrays(R, z, lam, nu, ac, g)
    u = np.zeros((B, 6))
    u[:, 0] = R
    u[:, 1] = np.mod(phi_az, two_pi)
    u[:, 2] = np.where(plane, 0.0, z)
    u[:, 4] = pphi
    p_nu = sig_pnu * fr.p_of_nu(np.where(plane, fr._nu_node["m"], nu))
    pR = p_lam * lam_R + np.where(plane, 0.0, p_nu * nu_R)
    pz = p_lam * lam_z + np.where(plane, 0.0, p_nu * nu_z)
    if np.any(plane):
        # in-plane crossing: p_z from the energy balance, sign from the quarter
        Hpos = toy_potential(lam, np.full_like(nu, -g), p)
        pz2 = 2.0 * (fr.E - Hpos) - (p_lam * lam_R) ** 2 - (pphi / R) ** 2
        # the plane is crossed upward near chi_nu=0 (quadrants 0/3) and
        # downward near chi_nu=pi (quadrants 1/2)
        sig_cross = np.where((qn == 0) | (qn == 3), 1.0, -1.0)
        pz_plane = sig_cross * np.sqrt(np.maximum(pz2, 0.0))
        degen = fr._nu_degenerate
        pz_plane = np.where(degen, 0.0, pz_plane)
        pz = np.where(plane, pz_plane, pz)
        pR = np.where(plane, p_lam * lam_R, pR)
    u[:, 3] = pR
    u[:, 5] = pz
    return u, fr, (E, I3)


def toy_forward(aa: ToyAA, params: ToyParams, n=DEFAULT_NODES,
                n_gl=DEFAULT_INC_NODES) -> PhasePoint:
    """Phase point on the toy torus with given actions at given angles."""
    u, _, _ = forward_batch(aa.theta[None, :], aa.J[None, :], params, n=n,
                            n_gl=n_gl)
    return PhasePoint.from_array(u[0])


# ---------------------------------------------------------------------------
# Jacobian d(theta, J)/du and the du/dJ block
# ---------------------------------------------------------------------------

def jacobian_batch(u, p: ToyParams, n=DEFAULT_NODES, n_gl=DEFAULT_INC_NODES,
                   fd_fallback=True):
    """(M, du_dJ, fallback_mask): M = d(theta, J)/du per point (B, 6, 6).

    Rows 0..2 are the angles, rows 3..5 the actions.  Analytic everywhere
    except within ~1e-5 (in |sin psi|) of a turning point or the equatorial
    plane, where finite differences of the forward map take over.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    B = u.shape[0]
    E, I2, I3 = integrals_batch(u, p)
    pphi = u[:, 4]
    lam, nu, p_lam, p_nu = _point_geometry(u, p)
    fr = _ToyFrame(E, I2, I3, pphi, p, n=n, lam_seed=lam, want_second=True)
    dIdu = dI_du_batch(u, p)  # (B, 3, 6)

    quadrant = _quadrant_of(u[:, 2], u[:, 5], p_nu)
    sig_lam = np.where(p_lam >= 0.0, 1.0, -1.0)
    W_lam, W_nu, dW_lam, dW_nu, turn_flag = _W_parts(
        fr, lam, nu, sig_lam, quadrant, n_gl, want_dI=True
    )
    w = W_lam + W_nu
    w[:, 1] += u[:, 1] / pphi

    plane = (nu + p.gamma) < _PLANE_TOL * abs(p.gamma)
    bad = turn_flag | plane | ~np.isfinite(w).all(axis=1)

    a_c, g = p.alpha, p.gamma
    # dW/dlam and dW/dnu with the signed point momenta
    Ddl = 2.0 * (lam + a_c) * (lam + g)
    Ddn = 2.0 * (nu + a_c) * (nu + g)
    with np.errstate(divide="ignore", invalid="ignore"):
        dWl_dlam = _N_I(lam, p).T / (2.0 * p_lam * Ddl)[:, None]  # (B, 3)
        dWn_dnu = _N_I(nu, p).T / (2.0 * p_nu * Ddn)[:, None]
    lam_R, lam_z, nu_R, nu_z = coords.lamnu_derivs_arrays(
        u[:, 0], u[:, 2], lam, nu, a_c, g
    )

    dlam_du = np.zeros((B, 6))
    dlam_du[:, 0], dlam_du[:, 2] = lam_R, lam_z
    dnu_du = np.zeros((B, 6))
    dnu_du[:, 0], dnu_du[:, 2] = nu_R, nu_z

    dw_du = (
        dWl_dlam[:, :, None] * dlam_du[:, None, :]
        + dWn_dnu[:, :, None] * dnu_du[:, None, :]
        + np.einsum("bjk,bki->bji", dW_lam + dW_nu, dIdu)
    )
    # the azimuthal piece of w_2 = ... + varphi / p_phi
    dw_du[:, 1, 1] += 1.0 / pphi
    dw_du[:, 1, 4] += -u[:, 1] / pphi**2

    Binv = fr.Binv  # (B, 3, 3)
    dA_du = np.einsum("bjtk,bki->bjti", fr.dA, dIdu)  # (B, row, col, u)
    dB_du = -np.einsum("bjm,bmni,bnt->bjti", Binv, dA_du, Binv)

    M = np.zeros((B, 6, 6))
    M[:, 0:3, :] = np.einsum("bj,bjti->bti", w, dB_du) + np.einsum(
        "bji,bjt->bti", dw_du, Binv
    )
    M[:, 3:6, :] = np.einsum("btj,bji->bti", fr.A, dIdu)

    if fd_fallback and np.any(bad):
        M[bad] = _jacobian_fd(u[bad], p, n=n, n_gl=n_gl)
    elif np.any(bad):
        warnings.warn("toy Jacobian ill-conditioned near turning point/plane")

    du_dJ = np.linalg.inv(M)[:, :, 3:6]
    return M, du_dJ, bad


def _jacobian_fd(u, p: ToyParams, n=DEFAULT_NODES, n_gl=DEFAULT_INC_NODES):
    """d(theta, J)/du by inverting central differences of the forward map."""
    u = np.atleast_2d(u)
    B = u.shape[0]
    theta, J, _ = angles_actions_batch(u, p, n=n, n_gl=n_gl)
    out = np.zeros((B, 6, 6))
    two_pi = 2.0 * np.pi
    for b in range(B):
        cols = np.zeros((6, 6))
        for j in range(6):
            d = 1e-6
            tp_ = theta[b].copy()
            Jp_ = J[b].copy()
            if j < 3:
                tp_[j] += d
                up_, _, _ = forward_batch(tp_[None], J[b][None], p, n=n, n_gl=n_gl)
                tp_[j] -= 2 * d
                um_, _, _ = forward_batch(tp_[None], J[b][None], p, n=n, n_gl=n_gl)
            else:
                Jp_[j - 3] += d
                up_, _, _ = forward_batch(theta[b][None], Jp_[None], p, n=n,
                                          n_gl=n_gl)
                Jp_[j - 3] -= 2 * d
                um_, _, _ = forward_batch(theta[b][None], Jp_[None], p, n=n,
                                          n_gl=n_gl)
            dcol = (up_[0] - um_[0]) / (2 * d)
            dcol[1] = (np.mod(up_[0, 1] - um_[0, 1] + np.pi, two_pi) - np.pi) / (
                2 * d
            )
            cols[:, j] = dcol
        out[b] = np.linalg.inv(cols)
    return out


def toy_jacobian(u: PhasePoint, params: ToyParams, n=DEFAULT_NODES,
                 n_gl=DEFAULT_INC_NODES):
    """(M, du_dJ): the 6x6 d(theta, J)/du and its inverse's action block."""
    M, du_dJ, bad = jacobian_batch(u.to_array(), params, n=n, n_gl=n_gl)
    if bad[0]:
        warnings.warn("point near a turning point or the equatorial plane; "
                      "Jacobian computed by finite-difference fallback")
    return M[0], du_dJ[0]
