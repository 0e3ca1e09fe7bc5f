"""Orbit integration in a target Hamiltonian and torus diagnostics.

Axisymmetric motion reduces to the meridional plane: with p_phi conserved
the state (R, z, p_R, p_z) evolves in the effective potential
Phi + p_phi^2 / (2 R^2), and phi is carried along by integrating
dphi/dt = p_phi / R^2.  The traces produced here feed the validation
diagnostics: Poincare sections, action residuals Delta J(t) and frequency
residuals Delta omega(t) along orbits started on a fitted model torus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from . import anglerec, staeckel
from .coords import PhasePoint
from .errors import ConvergenceError
from .torusfit import TorusModel, torus_points


@dataclass
class OrbitTrace:
    """Time series of an integrated orbit in cylindrical phase space."""

    t: np.ndarray          # (N,)
    u: np.ndarray          # (N, 6) rows (R, phi, z, p_R, p_phi, p_z)
    energy: np.ndarray     # (N,)
    p_phi: float
    target_name: str = ""
    sol: object = field(default=None, repr=False)  # dense-output solution

    @property
    def energy_drift(self):
        """Relative energy drift series |H(t) - H(0)| / |H(0)|."""
        scale = abs(self.energy[0]) if self.energy[0] != 0 else 1.0
        return np.abs(self.energy - self.energy[0]) / scale


def _meridional_rhs(target, p_phi):
    def rhs(t, y):
        R, z, pR, pz, phi = y
        u = np.array([[R, phi, z, pR, p_phi, pz]])
        _, g = target.value_and_gradient_batch(u)
        return [pR, pz, -g[0, 0], -g[0, 2], p_phi / (R * R)]
    return rhs


def integrate_target_orbit(u0, target, T, tol=1e-11, n_out=2000,
                           fixed_step=None) -> OrbitTrace:
    """Integrate an orbit in the target for duration T.

    Adaptive DOP853 with dense output by default; with fixed_step=dt a
    time-reversible leapfrog in the effective potential is used instead
    (no dense output, for long-horizon reversibility checks).
    """
    if isinstance(u0, PhasePoint):
        u0 = u0.to_array()
    u0 = np.asarray(u0, dtype=float)
    p_phi = float(u0[4])
    y0 = np.array([u0[0], u0[2], u0[3], u0[5], u0[1]])
    if fixed_step is not None:
        t, Y = _leapfrog(y0, target, p_phi, T, fixed_step)
        sol = None
    else:
        t = np.linspace(0.0, T, n_out)
        res = solve_ivp(_meridional_rhs(target, p_phi), (0.0, T), y0,
                        method="DOP853", rtol=tol, atol=tol,
                        t_eval=t, dense_output=True)
        if not res.success:
            raise ConvergenceError(f"orbit integration failed: {res.message}")
        Y = res.y.T
        sol = res.sol
    u = np.empty((len(t), 6))
    u[:, 0] = Y[:, 0]
    u[:, 1] = np.mod(Y[:, 4], 2.0 * np.pi)
    u[:, 2] = Y[:, 1]
    u[:, 3] = Y[:, 2]
    u[:, 4] = p_phi
    u[:, 5] = Y[:, 3]
    H, _ = target.value_and_gradient_batch(u)
    return OrbitTrace(t=t, u=u, energy=H, p_phi=p_phi,
                      target_name=getattr(target, "name", ""), sol=sol)


def _leapfrog(y0, target, p_phi, T, dt):
    """Position-Verlet steps in (R, z); phi by midpoint quadrature."""
    n = int(np.ceil(T / dt))
    Y = np.empty((n + 1, 5))
    Y[0] = y0
    q = y0[:2].copy()
    p = y0[2:4].copy()
    phi = y0[4]

    def force(q):
        u = np.array([[q[0], 0.0, q[1], 0.0, p_phi, 0.0]])
        _, g = target.value_and_gradient_batch(u)
        return np.array([-g[0, 0], -g[0, 2]])

    for i in range(n):
        q_half = q + 0.5 * dt * p
        phi += dt * p_phi / (q_half[0] * q_half[0])
        p = p + dt * force(q_half)
        q = q_half + 0.5 * dt * p
        Y[i + 1] = [q[0], q[1], p[0], p[1], phi]
    return np.arange(n + 1) * dt, Y


def poincare_section(trace: OrbitTrace):
    """Upward crossings of z=0: array of (t, R, p_R) with |z| < 1e-10.

    Crossing times are refined on the integrator's dense output; a trace
    from the fixed-step integrator (no dense output) uses linear
    interpolation between stored samples instead.
    """
    z = trace.u[:, 2]
    pz = trace.u[:, 5]
    hits = []
    on_plane = (z == 0.0) & (pz > 0.0)
    for i in np.nonzero(on_plane)[0]:
        hits.append((trace.t[i], trace.u[i, 0], trace.u[i, 3]))
    up = np.nonzero((z[:-1] < 0.0) & (z[1:] > 0.0))[0]
    for i in up:
        if trace.sol is not None:
            tc = brentq(lambda tt: trace.sol(tt)[1], trace.t[i],
                        trace.t[i + 1], xtol=1e-14)
            R, zc, pR, _, _ = trace.sol(tc)
            if abs(zc) > 1e-10:
                raise ConvergenceError(f"section refinement left |z|={zc:.1e}")
        else:
            w = -z[i] / (z[i + 1] - z[i])
            tc = trace.t[i] + w * (trace.t[i + 1] - trace.t[i])
            R = trace.u[i, 0] + w * (trace.u[i + 1, 0] - trace.u[i, 0])
            pR = trace.u[i, 3] + w * (trace.u[i + 1, 3] - trace.u[i, 3])
        hits.append((tc, R, pR))
    hits.sort()
    return np.array(hits).reshape(-1, 3)


def torus_section(model: TorusModel, count=16, n_scan=256):
    """(R, p_R) points of the model torus on the section z=0, p_z>0.

    For each of `count` values of the lambda-like toy angle, the
    nu-like angle is solved by bisection for z=0 on the upward branch.
    """
    th_lam = np.arange(count) * 2.0 * np.pi / count
    out = np.empty((count, 2))

    def z_of(tl, tn):
        th = np.array([[tl, 0.0, tn]])
        u, _, _ = torus_points(th, model)
        return u[0]

    # half-offset grid so the symmetry zeros of z do not sit on nodes
    grid = (np.arange(n_scan) + 0.5) * 2.0 * np.pi / n_scan
    for i, tl in enumerate(th_lam):
        th = np.column_stack([np.full(n_scan, tl), np.zeros(n_scan), grid])
        u, _, _ = torus_points(th, model)
        z = u[:, 2]
        pz = u[:, 5]
        exact = np.nonzero((np.abs(z) < 1e-12) & (pz > 0.0))[0]
        if len(exact):
            out[i] = u[exact[0], 0], u[exact[0], 3]
            continue
        # z=0 is crossed twice per nu period; keep the branch with p_z>0
        cross = np.nonzero((z * np.roll(z, -1) < 0.0)
                           & (pz + np.roll(pz, -1) > 0.0))[0]
        if len(cross) == 0:
            # planar torus: every point is on the section
            j = int(np.argmax(pz))
            out[i] = u[j, 0], u[j, 3]
            continue
        j = cross[0]
        a, b = grid[j], grid[(j + 1) % n_scan]
        if b < a:
            b += 2.0 * np.pi
        tn = brentq(lambda x: z_of(tl, x % (2.0 * np.pi))[2], a, b, xtol=1e-13)
        uc = z_of(tl, tn % (2.0 * np.pi))
        if abs(uc[2]) > 1e-10 or uc[5] <= 0.0:
            raise ConvergenceError("torus section point failed z=0, p_z>0")
        out[i] = uc[0], uc[3]
    return out


def trace_toy_coords(trace: OrbitTrace, model: TorusModel):
    """Toy angles and actions (theta (N,3), J_toy (N,3)) along a trace."""
    theta, Jt, _ = staeckel.angles_actions_batch(trace.u, model.toy_params)
    return theta, Jt


def trace_actions(model: TorusModel, trace: OrbitTrace):
    """Delta J(t) = J(t) - J0 with the coefficients frozen at S(J0).

    J(t) follows from inverting the action series at the orbit's toy
    coordinates: J = J_toy - 2 sum_k k S_k cos(k . theta_toy).
    """
    theta, Jt = trace_toy_coords(trace, model)
    k3 = model.waves.k3()
    phase = theta @ k3.T
    J = Jt - 2.0 * (np.cos(phase) * model.S[None, :]) @ k3
    return J - model.J[None, :]


def trace_frequencies(model: TorusModel, trace: OrbitTrace, target):
    """Delta omega(t) = omega(t) - omega0 with dS/dJ frozen at J0."""
    if model.omega is None or model.dS_dJ is None:
        raise ValueError("model needs omega and dS_dJ; run solve_model_angles")
    theta, _ = trace_toy_coords(trace, model)
    om = anglerec.model_frequencies(theta, model, target, u=trace.u)
    return om - model.omega[None, :]


def trace_model_angles(model: TorusModel, trace: OrbitTrace):
    """Unwrapped model angles theta(t) along a trace (N, 3)."""
    theta, _ = trace_toy_coords(trace, model)
    th = anglerec.model_angle(theta, model)
    return np.unwrap(th, axis=0)
