"""Fourier canonical transformation and the chi^2 torus fit.

A model torus with actions J is the image of the toy torus under the
generating-function map

    J_toy(theta) = J + 2 sum_{k in D+} k S_k cos(k . theta),

where D+ holds one member of each +-k pair of integer wave vectors with
k_phi = 0.  The coefficients S_k are chosen to minimize the variance of the
target Hamiltonian over an angle grid; on a true invariant torus H is
constant, so the converged torus is invariant to the accuracy of the fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .coords import CoordParams, PhasePoint
from .errors import (ConfigError, ConvergenceError, NoBoundOrbitError,
                     UnmappableTorusError)
from .numerics import LMConfig, levenberg_marquardt
from . import staeckel
from .staeckel import ToyParams


@dataclass(frozen=True)
class WaveSet:
    """Half-set D+ of wave vectors (k_lam, k_nu); k_phi = 0 throughout."""

    k: np.ndarray  # (W, 2) integers

    def __post_init__(self):
        k = np.asarray(self.k, dtype=int)
        if k.ndim != 2 or k.shape[1] != 2:
            raise ValueError("wave set must be an integer array of shape (W, 2)")
        object.__setattr__(self, "k", k)
        if len(k) and (k == 0).all(axis=1).any():
            raise ValueError("zero wave vector not allowed")
        seen = {tuple(row) for row in k}
        if len(seen) != len(k):
            raise ValueError("duplicate wave vectors")
        for row in k:
            if (-row[0], -row[1]) in seen:
                raise ValueError(f"both k and -k present for k={tuple(row)}")

    def __len__(self):
        return len(self.k)

    def k3(self):
        """Wave vectors as (W, 3) with the zero azimuthal component."""
        W = len(self.k)
        out = np.zeros((W, 3), dtype=int)
        out[:, 0] = self.k[:, 0]
        out[:, 2] = self.k[:, 1]
        return out

    @staticmethod
    def default(k_lam_max, k_nu_max, symmetry="even"):
        """Half-set for z-symmetric, time-reversible axisymmetric targets.

        k_lam in [0, k_lam_max], k_nu in [-k_nu_max, k_nu_max], keeping the
        k_lam > 0 half plus the positive k_nu axis.  The symmetry filter:

        - "even": both components even (the compact structural default);
        - "z-symmetric": k_nu even, k_lam unrestricted.  The z-flip
          z -> -z, p_z -> -p_z shifts only the nu-like angle, by pi, so
          the energy on a torus of a z-symmetric target carries no odd
          k_nu power; no symmetry constrains the k_lam parity, and fits
          of such targets need the odd k_lam terms (this is the filter
          to use for fitting);
        - "none": no parity filter.
        """
        if symmetry not in ("even", "z-symmetric", "none"):
            raise ValueError(f"unknown symmetry filter {symmetry!r}")
        lam_step = 2 if symmetry == "even" else 1
        nu_step = 1 if symmetry == "none" else 2
        ks = []
        for knu in range(nu_step, k_nu_max + 1, nu_step):
            ks.append((0, knu))
        knu_lo = -(k_nu_max - k_nu_max % nu_step)
        for klam in range(lam_step, k_lam_max + 1, lam_step):
            for knu in range(knu_lo, k_nu_max + 1, nu_step):
                ks.append((klam, knu))
        return WaveSet(np.array(ks, dtype=int))


@dataclass(frozen=True)
class AngleGrid:
    """Regular (theta_lam, theta_nu) product grid at fixed theta_phi.

    Nodes sit at half-offset positions (i + 1/2) * 2 pi / n, which keeps the
    grid clear of the equatorial plane and the orbit's turning points where
    the map Jacobian degenerates.
    """

    n_lam: int
    n_nu: int
    theta_phi: float = 0.0

    def __post_init__(self):
        if self.n_lam < 2 or self.n_nu < 2:
            raise ConfigError("angle grid needs at least 2 points per dimension")

    @property
    def M(self):
        return self.n_lam * self.n_nu

    def points(self):
        tl = (np.arange(self.n_lam) + 0.5) * 2.0 * np.pi / self.n_lam
        tn = (np.arange(self.n_nu) + 0.5) * 2.0 * np.pi / self.n_nu
        TL, TN = np.meshgrid(tl, tn, indexing="ij")
        theta = np.zeros((self.M, 3))
        theta[:, 0] = TL.ravel()
        theta[:, 1] = self.theta_phi
        theta[:, 2] = TN.ravel()
        return theta

    def check_nyquist(self, waves: WaveSet):
        """Reject grids that undersample the wave set.

        When every component is even the series lives on the half-period
        variable 2*theta, so the effective maximum frequency is half the
        nominal one; a 100x100 grid then resolves an all-even set with
        |k_lam| <= 96 (effective frequency 48 < 50), but a mixed-parity
        set of the same truncation needs twice the lambda resolution.
        """
        if len(waves) == 0:
            return
        kl = np.abs(waves.k[:, 0]).max()
        kn = np.abs(waves.k[:, 1]).max()
        all_even = not (waves.k % 2).any()
        div = 2 if all_even else 1
        if self.n_lam <= 2 * kl // div or self.n_nu <= 2 * kn // div:
            raise ConfigError(
                f"grid {self.n_lam}x{self.n_nu} undersamples wave set "
                f"(max |k| = ({kl}, {kn}), even filter: {all_even})"
            )


@dataclass
class TorusModel:
    """A fitted torus: target actions J plus generating coefficients S."""

    J: np.ndarray
    waves: WaveSet
    S: np.ndarray
    toy_params: ToyParams
    H_bar: float | None = None
    omega: np.ndarray | None = None
    dS_dJ: np.ndarray | None = None  # (W, 3)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        if self.S.shape != (len(self.waves),):
            raise ValueError("one coefficient per wave required")
        if not np.isfinite(self.S).all():
            raise ValueError("non-finite generating coefficients")


def toy_actions_on_torus(theta, model: TorusModel):
    """J_toy(theta) = J + 2 sum_k k S_k cos(k . theta); J_phi is untouched."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    k3 = model.waves.k3()  # (W, 3)
    phase = theta @ k3.T  # (B, W)
    Jt = model.J[None, :] + 2.0 * (np.cos(phase) * model.S[None, :]) @ k3
    return Jt


def _check_mappable(theta, Jt):
    badl = Jt[:, 0] < 0.0
    badn = Jt[:, 2] < 0.0
    bad = badl | badn
    if np.any(bad):
        i = int(np.argmax(bad))
        raise UnmappableTorusError(
            "negative oscillatory toy action on torus",
            theta=theta[i].copy(), J_toy=Jt[i].copy(),
        )


def torus_points(theta, model: TorusModel, guess=None):
    """Phase points of the model torus at toy angles theta (B, 3)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    Jt = toy_actions_on_torus(theta, model)
    _check_mappable(theta, Jt)
    u, fr, EI = staeckel.forward_batch(theta, Jt, model.toy_params, guess=guess)
    return u, fr, EI


def torus_point(theta, model: TorusModel) -> PhasePoint:
    u, _, _ = torus_points(np.asarray(theta, dtype=float)[None, :], model)
    return PhasePoint.from_array(u[0])


def chi2_and_residuals(model: TorusModel, grid: AngleGrid, target, guess=None):
    """(chi2, residuals, H_bar) of the target energy over the angle grid."""
    theta = grid.points()
    u, fr, EI = torus_points(theta, model, guess=guess)
    H, _ = target.value_and_gradient_batch(u)
    H_bar = float(np.mean(H))
    r = H - H_bar
    return float(np.sum(r * r)), r, H_bar, (u, EI)


def chi2_jacobian(model: TorusModel, grid: AngleGrid, target, u=None):
    """M x W matrix of d residual_m / d S_k (mean-centered columns)."""
    theta = grid.points()
    if u is None:
        u, _, _ = torus_points(theta, model)
    _, dH = target.value_and_gradient_batch(u)
    _, du_dJ, _ = staeckel.jacobian_batch(u, model.toy_params)
    dH_dJ = np.einsum("bi,bij->bj", dH, du_dJ)  # (M, 3)
    k3 = model.waves.k3()
    phase = theta @ k3.T  # (M, W)
    dJ_dS = 2.0 * np.cos(phase)  # times k, contracted below
    cols = np.einsum("bj,wj,bw->bw", dH_dJ, k3.astype(float), dJ_dS)
    return cols - cols.mean(axis=0, keepdims=True)


def fit_torus(J, waves: WaveSet, grid: AngleGrid, target,
              lm: LMConfig = LMConfig(), toy_params: ToyParams = None,
              verbose=False) -> TorusModel:
    """Levenberg-Marquardt fit of the generating coefficients S.

    Starts from S = 0 (the plain toy torus).  A trial step that makes any
    grid point unmappable is rejected exactly like a chi^2 increase: the
    damping grows and the step is retried.
    """
    if toy_params is None:
        raise ValueError("toy_params required")
    grid.check_nyquist(waves)
    J = np.asarray(J, dtype=float)
    model = TorusModel(J=J, waves=waves, S=np.zeros(len(waves)),
                       toy_params=toy_params)
    theta = grid.points()

    state = {}

    def residual(S):
        if not np.isfinite(S).all():
            return None
        m = TorusModel(J=J, waves=waves, S=S, toy_params=toy_params)
        try:
            chi2, r, H_bar, (u, EI) = chi2_and_residuals(
                m, grid, target, guess=state.get("EI")
            )
        except (UnmappableTorusError, NoBoundOrbitError, ConvergenceError):
            return None
        state["EI"] = EI
        state["H_bar"] = H_bar
        state["u"] = u
        state["S"] = np.array(S, dtype=float, copy=True)
        return r

    def jacobian(S):
        m = TorusModel(J=J, waves=waves, S=S, toy_params=toy_params)
        u = state.get("u")
        if state.get("S") is None or not np.array_equal(state["S"], S):
            u = None  # cache is from a different (rejected) trial point
        return chi2_jacobian(m, grid, target, u=u)

    result = levenberg_marquardt(residual, jacobian, model.S, lm)
    if verbose:
        print(f"fit_torus: chi2 {result.chi2_history[0]:.3e} -> "
              f"{result.chi2:.3e} in {result.iterations} iterations")
    final = TorusModel(
        J=J, waves=waves, S=result.x, toy_params=toy_params,
        H_bar=state.get("H_bar"),
        meta=dict(
            grid=[grid.n_lam, grid.n_nu], theta_phi=grid.theta_phi,
            chi2=result.chi2, chi2_start=result.chi2_history[0],
            iterations=result.iterations, converged=result.converged,
            M=grid.M, n_waves=len(waves), target=getattr(target, "name", "?"),
        ),
    )
    # refresh H_bar at the accepted optimum
    chi2, r, H_bar, _ = chi2_and_residuals(final, grid, target)
    final.H_bar = H_bar
    final.meta["chi2"] = chi2
    final.meta["sigma_H_over_Hbar"] = float(
        np.std(r) / max(abs(H_bar), 1e-300)
    )
    return final


# ---------------------------------------------------------------------------
# model (de)serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: TorusModel) -> dict:
    d = {
        "format": "staeckeltorus-model-1",
        "toy_params": {
            "alpha": model.toy_params.alpha,
            "gamma": model.toy_params.gamma,
            "rho0": model.toy_params.rho0,
        },
        "J": model.J.tolist(),
        "waves": model.waves.k.tolist(),
        "S": model.S.tolist(),
        "H_bar": model.H_bar,
        "omega": None if model.omega is None else np.asarray(model.omega).tolist(),
        "dS_dJ": None if model.dS_dJ is None else np.asarray(model.dS_dJ).tolist(),
        "meta": model.meta,
    }
    return d


def model_from_dict(d: dict) -> TorusModel:
    if d.get("format") != "staeckeltorus-model-1":
        raise ConfigError("unrecognized model file format")
    tp = d["toy_params"]
    params = ToyParams(
        coords=CoordParams(alpha=tp["alpha"], gamma=tp["gamma"]), rho0=tp["rho0"]
    )
    model = TorusModel(
        J=np.array(d["J"], dtype=float),
        waves=WaveSet(np.array(d["waves"], dtype=int)),
        S=np.array(d["S"], dtype=float),
        toy_params=params,
        H_bar=d.get("H_bar"),
        meta=d.get("meta", {}),
    )
    if d.get("omega") is not None:
        model.omega = np.array(d["omega"], dtype=float)
    if d.get("dS_dJ") is not None:
        model.dS_dJ = np.array(d["dS_dJ"], dtype=float)
    return model


def save_model(model: TorusModel, path):
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=1)


def load_model(path) -> TorusModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
