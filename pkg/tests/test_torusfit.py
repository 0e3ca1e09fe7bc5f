"""Generating-function torus model: wave sets, grids, objective, fitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staeckeltorus.errors import ConfigError, UnmappableTorusError
from staeckeltorus.numerics import LMConfig
from staeckeltorus.staeckel import angles_actions_batch
from staeckeltorus.target import ToyTarget
from staeckeltorus.torusfit import (AngleGrid, TorusModel, WaveSet,
                                    chi2_and_residuals, chi2_jacobian,
                                    fit_torus, load_model, save_model,
                                    torus_points, toy_actions_on_torus)


def _model(toy_params, J=(0.5, 0.45, 0.5), klmax=8, knmax=4, sym="even"):
    ws = WaveSet.default(klmax, knmax, symmetry=sym)
    return TorusModel(J=np.array(J), waves=ws, S=np.zeros(len(ws)),
                      toy_params=toy_params)


# ---------------------------------------------------------------------------
# wave sets
# ---------------------------------------------------------------------------

def test_default_wave_count_at_full_scale():
    assert len(WaveSet.default(96, 24, symmetry="even")) == 1212


def test_default_wave_count_small():
    # k_lam in {2,...,16 even} x k_nu in {-8..8 even} plus (0, 2..8 even)
    assert len(WaveSet.default(16, 8, symmetry="even")) == 8 * 9 + 4


@given(klmax=st.integers(2, 20), knmax=st.integers(2, 10),
       sym=st.sampled_from(["even", "z-symmetric", "none"]))
@settings(max_examples=60, deadline=None)
def test_wave_set_invariants(klmax, knmax, sym):
    ks = WaveSet.default(klmax, knmax, symmetry=sym).k
    # no duplicates, no zero wave, within bounds
    assert len({tuple(k) for k in ks}) == len(ks)
    assert not any((k == 0).all() for k in ks)
    assert (np.abs(ks[:, 0]) <= klmax).all()
    assert (np.abs(ks[:, 1]) <= knmax).all()
    # canonical half-lattice: k_lam > 0, or k_lam == 0 and k_nu > 0
    assert ((ks[:, 0] > 0) | ((ks[:, 0] == 0) & (ks[:, 1] > 0))).all()
    if sym in ("even", "z-symmetric"):
        assert (ks[:, 1] % 2 == 0).all()
    if sym == "even":
        assert (ks[:, 0] % 2 == 0).all()


def test_wave_set_rejects_bad_input():
    with pytest.raises(ValueError):
        WaveSet(np.array([[0, 0]]))
    with pytest.raises(ValueError):
        WaveSet(np.array([[2, 2], [2, 2]]))
    with pytest.raises(ValueError):
        WaveSet(np.array([[2, 2], [-2, -2]]))


# ---------------------------------------------------------------------------
# angle grids
# ---------------------------------------------------------------------------

def test_angle_grid_half_offset_and_shape():
    g = AngleGrid(n_lam=6, n_nu=4)
    th = g.points()
    assert th.shape == (24, 3)
    assert (th[:, 1] == 0.0).all()
    # half-offset: no node at theta = 0 or on the z = 0 symmetry line
    assert th[:, 0].min() > 0 and th[:, 2].min() > 0
    assert np.abs(th[:, 2] - np.pi).min() > 1e-12


def test_angle_grid_nyquist_guard():
    ws = WaveSet.default(16, 8, symmetry="even")
    AngleGrid(n_lam=17, n_nu=9).check_nyquist(ws)  # even filter halves need
    with pytest.raises(ConfigError):
        AngleGrid(n_lam=16, n_nu=9).check_nyquist(ws)
    with pytest.raises(ConfigError):
        AngleGrid(n_lam=17, n_nu=8).check_nyquist(ws)
    mixed = WaveSet.default(16, 8, symmetry="z-symmetric")
    with pytest.raises(ConfigError):
        AngleGrid(n_lam=32, n_nu=17).check_nyquist(mixed)
    AngleGrid(n_lam=33, n_nu=17).check_nyquist(mixed)


# ---------------------------------------------------------------------------
# the objective on analytic cases
# ---------------------------------------------------------------------------

def test_zero_coefficients_on_toy_target_give_zero_residual(toy_params):
    """With S = 0 the image torus is the toy torus itself, so the toy
    Hamiltonian is exactly constant on it."""
    model = _model(toy_params)
    grid = AngleGrid(n_lam=20, n_nu=12)
    chi2, r, H_bar, _ = chi2_and_residuals(model, grid, ToyTarget(toy_params))
    assert chi2 < 1e-22
    assert np.abs(r).max() < 1e-11


def test_toy_actions_on_torus_mean_is_target_action(toy_params):
    model = _model(toy_params)
    rng = np.random.default_rng(3)
    model.S[:] = 1e-3 * rng.standard_normal(model.S.size)
    th = AngleGrid(n_lam=24, n_nu=24).points()
    Jt = toy_actions_on_torus(th, model)
    # cos(k.theta) averages to ~0 on the uniform half-offset grid
    assert np.abs(Jt.mean(axis=0) - model.J).max() < 1e-12
    # the azimuthal action is untouched pointwise
    assert np.abs(Jt[:, 1] - model.J[1]).max() == 0.0


def test_chi2_jacobian_matches_finite_differences(toy_params, log_target):
    model = _model(toy_params, klmax=6, knmax=4, sym="z-symmetric")
    rng = np.random.default_rng(5)
    model.S[:] = 2e-3 * rng.standard_normal(model.S.size)
    grid = AngleGrid(n_lam=16, n_nu=12)
    _, r0, _, (u, _) = chi2_and_residuals(model, grid, log_target)
    J = chi2_jacobian(model, grid, log_target, u=u)
    h = 1e-6
    for j in rng.choice(model.S.size, 6, replace=False):
        S = model.S.copy()
        model.S[j] = S[j] + h
        _, rp, _, _ = chi2_and_residuals(model, grid, log_target)
        model.S[j] = S[j] - h
        _, rm, _, _ = chi2_and_residuals(model, grid, log_target)
        model.S[:] = S
        fd = (rp - rm) / (2 * h)
        scale = max(1.0, np.abs(J[:, j]).max())
        assert np.abs(fd - J[:, j]).max() < 2e-5 * scale


def test_torus_points_lie_on_toy_energy_shell(toy_params):
    model = _model(toy_params, klmax=6, knmax=4)
    th = AngleGrid(n_lam=8, n_nu=6).points()
    u, _, _ = torus_points(th, model)
    H, _ = ToyTarget(toy_params).value_and_gradient_batch(u)
    assert np.ptp(H) < 1e-11
    # the toy action-angle map inverts back to the image actions
    _, J, _ = angles_actions_batch(u, model.toy_params)
    assert np.abs(J[:, 1] - model.J[1]).max() < 1e-12


def test_unmappable_torus_raises(toy_params):
    model = _model(toy_params, J=(0.1, 0.45, 0.1), klmax=4, knmax=2)
    # coefficients large enough to drive an image action negative
    model.S[:] = 0.5
    with pytest.raises(UnmappableTorusError) as exc:
        torus_points(AngleGrid(n_lam=8, n_nu=6).points(), model)
    assert exc.value.J_toy.min() < 0.0


def test_torus_model_validates_coefficients(toy_params):
    ws = WaveSet.default(4, 2)
    with pytest.raises(ValueError):
        TorusModel(J=np.array([0.5, 0.45, 0.5]), waves=ws,
                   S=np.zeros(len(ws) + 1), toy_params=toy_params)
    with pytest.raises(ValueError):
        TorusModel(J=np.array([0.5, 0.45, 0.5]), waves=ws,
                   S=np.full(len(ws), np.nan), toy_params=toy_params)


# ---------------------------------------------------------------------------
# a small end-to-end fit
# ---------------------------------------------------------------------------

def test_small_fit_reduces_energy_spread(toy_params, log_target,
                                         reference_actions):
    ws = WaveSet.default(8, 4, symmetry="z-symmetric")
    grid = AngleGrid(n_lam=24, n_nu=16)
    model = fit_torus(reference_actions, ws, grid, log_target,
                      lm=LMConfig(max_iter=15), toy_params=toy_params)
    assert model.meta["chi2"] < model.meta["chi2_start"] / 4
    assert model.H_bar is not None and model.H_bar != 0.0
    assert model.meta["converged"] or model.meta["iterations"] == 15


def test_model_save_load_round_trip(tmp_path, toy_params):
    model = _model(toy_params, klmax=6, knmax=4, sym="z-symmetric")
    rng = np.random.default_rng(7)
    model.S[:] = 1e-3 * rng.standard_normal(model.S.size)
    model.H_bar = -0.123
    model.omega = np.array([1.1, 0.9, 1.3])
    model.dS_dJ = rng.standard_normal((model.S.size, 3))
    model.meta["note"] = "round-trip"
    path = tmp_path / "model.json"
    save_model(model, path)
    back = load_model(path)
    assert np.array_equal(back.waves.k, model.waves.k)
    assert np.array_equal(back.S, model.S)
    assert np.array_equal(back.J, model.J)
    assert np.array_equal(back.omega, model.omega)
    assert np.array_equal(back.dS_dJ, model.dS_dJ)
    assert back.H_bar == model.H_bar
    assert back.meta["note"] == "round-trip"
    assert back.toy_params.alpha == model.toy_params.alpha
    assert back.toy_params.rho0 == model.toy_params.rho0
