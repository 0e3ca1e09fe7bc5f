"""End-to-end acceptance suite.

One test per headline capability, each printing a single PASS line with the
measured figure of merit (run with -s to see them).  The expensive shared
artifact — one finely resolved fitted torus of the default logarithmic
target — is built once per session and reused by the orbit-based checks.
"""

import time

import numpy as np
import pytest

from staeckeltorus import anglerec, orbit
from staeckeltorus.coords import (PhasePoint, cyl_of_prolate_arrays,
                                  prolate_of_cyl_arrays)
from staeckeltorus.errors import NoBoundOrbitError, UnmappableTorusError
from staeckeltorus.numerics import LMConfig
from staeckeltorus.staeckel import (angles_actions_batch, forward_batch,
                                    jacobian_batch)
from staeckeltorus.target import (FitRegion, LogTarget, ToyTarget,
                                  fit_toy_params)
from staeckeltorus.torusfit import (AngleGrid, TorusModel, WaveSet, fit_torus,
                                    torus_points, toy_actions_on_torus)

J0 = np.array([0.5, 0.45, 0.5])

# the finely resolved ("desk-scale") fit configuration; see the README for
# why the lambda-like index needs both parities and this truncation
DESK_WAVES = (40, 20)
DESK_GRID = (88, 48)

# a coarser configuration that is still good to sigma(H)/|H| ~ 1e-3,
# cheap enough to fit seven times for the frequency cross-check
SMALL_WAVES = (16, 8)
SMALL_GRID = (36, 20)


def _report(num, label, detail):
    print(f"\n[criterion {num}] PASS {label}: {detail}")


@pytest.fixture(scope="module")
def desk_model(toy_params, log_target):
    t0 = time.monotonic()
    model = fit_torus(J0, WaveSet.default(*DESK_WAVES, symmetry="z-symmetric"),
                      AngleGrid(*DESK_GRID), log_target,
                      LMConfig(max_iter=10), toy_params)
    model.meta["fit_seconds"] = time.monotonic() - t0
    return model


@pytest.fixture(scope="module")
def small_model(toy_params, log_target):
    model = fit_torus(J0, WaveSet.default(*SMALL_WAVES, symmetry="z-symmetric"),
                      AngleGrid(*SMALL_GRID), log_target,
                      LMConfig(max_iter=20), toy_params)
    anglerec.solve_model_angles(model, AngleGrid(*SMALL_GRID), log_target)
    return model


@pytest.fixture(scope="module")
def desk_orbits(desk_model, log_target):
    """Eight target orbits started at random angles on the fitted torus."""
    rng = np.random.default_rng(2024)
    theta0 = rng.uniform(0.0, 2.0 * np.pi, (8, 3))
    u0, _, _ = torus_points(theta0, desk_model)
    return [orbit.integrate_target_orbit(u, log_target, T=60.0, n_out=400)
            for u in u0]


def test_criterion_1_coordinates_and_canonicity(toy_params):
    """Coordinate round trips < 1e-10; Poisson-bracket canonicity of the
    action-angle map < 1e-6 at 100 random points; under a minute."""
    t0 = time.monotonic()
    p = toy_params.coords
    rng = np.random.default_rng(42)
    R = rng.uniform(0.1, 5.0, 100)
    z = rng.uniform(-3.0, 3.0, 100)
    lam, nu = prolate_of_cyl_arrays(R, z, p.alpha, p.gamma)
    R2, z2 = cyl_of_prolate_arrays(lam, nu, p.alpha, p.gamma)
    round_err = max(np.abs(R2 - R).max(), np.abs(z2 - np.abs(z)).max())
    assert round_err < 1e-10

    theta = rng.uniform(0, 2 * np.pi, (100, 3))
    J = np.column_stack([rng.uniform(0.05, 0.6, 100),
                         rng.uniform(0.3, 0.7, 100),
                         rng.uniform(0.05, 0.6, 100)])
    u, _, _ = forward_batch(theta, J, toy_params)
    M, _, bad = jacobian_batch(u, toy_params)
    Om = np.zeros((6, 6))
    Om[:3, 3:] = np.eye(3)
    Om[3:, :3] = -np.eye(3)
    S = np.einsum("bij,jk,blk->bil", M[~bad], Om, M[~bad])
    canon_err = np.abs(S - Om[None]).max()
    assert canon_err < 1e-6
    dt = time.monotonic() - t0
    assert dt < 60.0
    _report(1, "coordinates/canonicity",
            f"round-trip {round_err:.2e} < 1e-10, bracket {canon_err:.2e} "
            f"< 1e-6, {dt:.1f} s")


def test_criterion_2_toy_integrability(toy_params):
    """Along 10 integrated toy orbits of ~10 radial periods each the toy
    actions are constant to 1e-8 (scaled) and the unwrapped toy angles are
    affine in time to 1e-5 rad; under two minutes."""
    t0 = time.monotonic()
    target = ToyTarget(toy_params)
    rng = np.random.default_rng(7)
    worst_dJ = 0.0
    worst_resid = 0.0
    for _ in range(10):
        theta0 = rng.uniform(0, 2 * np.pi, (1, 3))
        J = np.array([[rng.uniform(0.1, 0.6), rng.uniform(0.3, 0.7),
                       rng.uniform(0.1, 0.6)]])
        u0, fr, _ = forward_batch(theta0, J, toy_params)
        Omega = fr.Binv[0, 0, :]  # dH/dJ rows of the frame
        T = 10.0 * 2.0 * np.pi / np.abs(Omega).min()
        trace = orbit.integrate_target_orbit(u0[0], target, T=T, n_out=250)
        th, Jt, _ = angles_actions_batch(trace.u, toy_params)
        worst_dJ = max(worst_dJ,
                       (np.abs(Jt - J) / np.abs(J)).max())
        th = np.unwrap(th, axis=0)
        A = np.column_stack([np.ones_like(trace.t), trace.t])
        coef, *_ = np.linalg.lstsq(A, th, rcond=None)
        worst_resid = max(worst_resid, np.abs(th - A @ coef).max())
    assert worst_dJ < 1e-8
    assert worst_resid < 1e-5
    dt = time.monotonic() - t0
    assert dt < 120.0
    _report(2, "toy integrability",
            f"max scaled |dJ| {worst_dJ:.2e} < 1e-8, angle residual "
            f"{worst_resid:.2e} < 1e-5 rad, {dt:.1f} s")


def test_criterion_3_prefit_reproduction(log_target):
    """The toy-parameter pre-fit on the logarithmic target (a=0.8, b=0.14)
    lands within 5% of (-0.639, -0.142, 1.29); under 30 seconds."""
    t0 = time.monotonic()
    params, _, res = fit_toy_params(log_target, FitRegion(), LMConfig())
    got = np.array([params.coords.alpha, params.coords.gamma, params.rho0])
    ref = np.array([-0.639, -0.142, 1.29])
    rel = np.abs(got / ref - 1.0)
    assert rel.max() < 0.05
    assert res.converged
    dt = time.monotonic() - t0
    assert dt < 30.0
    _report(3, "pre-fit reproduction",
            f"(alpha, gamma, rho0) = ({got[0]:.4f}, {got[1]:.4f}, "
            f"{got[2]:.3f}), max rel dev {rel.max():.1%} < 5%, {dt:.1f} s")


def test_criterion_4_desk_scale_torus_fit(desk_model):
    """The finely resolved fit converges and reduces sigma(H)/|H_bar| on
    the grid by at least two orders of magnitude from S = 0; under ten
    minutes."""
    ratio = np.sqrt(desk_model.meta["chi2_start"] / desk_model.meta["chi2"])
    assert ratio >= 100.0
    assert desk_model.meta["converged"] or desk_model.meta["iterations"] >= 5
    dt = desk_model.meta["fit_seconds"]
    assert dt < 600.0
    _report(4, "desk-scale torus fit",
            f"sigma(H) improvement {ratio:.0f}x >= 100x "
            f"(final sigma/|H| {desk_model.meta['sigma_H_over_Hbar']:.2e}), "
            f"{len(desk_model.waves)} waves, {dt:.0f} s")


def test_criterion_5_action_recovery_along_orbits(desk_model, desk_orbits,
                                                  toy_params):
    """For 8 target orbits started on the fitted torus, the recovered model
    actions are at least 10x more constant than the plain toy actions, with
    no secular trend; under five minutes."""
    t0 = time.monotonic()
    base = TorusModel(J=J0.copy(), waves=desk_model.waves,
                      S=np.zeros(len(desk_model.waves)), toy_params=toy_params)
    worst_ratio = np.inf
    worst_trend = 0.0
    for trace in desk_orbits:
        dJ = orbit.trace_actions(desk_model, trace)
        dJ0 = orbit.trace_actions(base, trace)
        amp = np.abs(dJ - dJ.mean(axis=0)).max()
        worst_ratio = min(worst_ratio, np.abs(dJ0).max() / np.abs(dJ).max())
        # secular drift: the fitted linear trend over the full duration
        # must stay below the oscillation amplitude
        A = np.column_stack([np.ones_like(trace.t), trace.t])
        coef, *_ = np.linalg.lstsq(A, dJ, rcond=None)
        trend = np.abs(coef[1]).max() * (trace.t[-1] - trace.t[0])
        worst_trend = max(worst_trend, trend / amp)
    assert worst_ratio >= 10.0
    assert worst_trend < 1.0
    dt = time.monotonic() - t0
    assert dt < 300.0
    _report(5, "action recovery along orbits",
            f"|dJ| reduction {worst_ratio:.0f}x >= 10x over 8 orbits, "
            f"worst trend/amplitude {worst_trend:.2f} < 1, {dt:.0f} s")


def test_criterion_6_angle_and_frequency_recovery(toy_params, log_target,
                                                  small_model):
    """(a) With the toy potential as its own target the recovered
    frequencies match the analytic ones to 1e-8 and all dS/dJ vanish.
    (b) The recovered frequencies agree with centered finite differences
    of H_bar across neighboring fitted tori to 2%.  (c) Unwrapped model
    angles along a target orbit are affine in time with slope omega, and
    the angle drift rate tracks the local energy residual (top-decile
    coincidence > 50%).  All under ten minutes."""
    t0 = time.monotonic()

    # (a) toy self-target sanity
    ws = WaveSet.default(6, 4, symmetry="even")
    toy_model = TorusModel(J=J0.copy(), waves=ws, S=np.zeros(len(ws)),
                           toy_params=toy_params)
    grid = AngleGrid(16, 10)
    res = anglerec.solve_model_angles(toy_model, grid, ToyTarget(toy_params))
    _, fr, _ = forward_batch(np.zeros((1, 3)), J0[None, :], toy_params)
    Omega = fr.Binv[0, 0, :]
    err_a = np.abs(res.omega - Omega).max()
    ds_a = np.abs(res.dS_dJ).max()
    assert err_a < 1e-8 and ds_a < 1e-8

    # (b) omega vs centered differences of H_bar across neighboring tori
    delta = 0.01
    lm = LMConfig(max_iter=20)
    sgrid = AngleGrid(*SMALL_GRID)
    swaves = WaveSet.default(*SMALL_WAVES, symmetry="z-symmetric")
    fd = np.zeros(3)
    for n in range(3):
        H = []
        for s in (+1.0, -1.0):
            J = J0.copy()
            J[n] += s * delta
            H.append(fit_torus(J, swaves, sgrid, log_target, lm,
                               toy_params).H_bar)
        fd[n] = (H[0] - H[1]) / (2.0 * delta)
    err_b = np.abs(small_model.omega / fd - 1.0).max()
    assert err_b < 0.02

    # (c) affine angles along a target orbit; drift rate vs energy residual
    rng = np.random.default_rng(11)
    u0, _, _ = torus_points(rng.uniform(0, 2 * np.pi, (1, 3)), small_model)
    trace = orbit.integrate_target_orbit(u0[0], log_target, T=80.0,
                                         n_out=1500)
    th = orbit.trace_model_angles(small_model, trace)
    A = np.column_stack([np.ones_like(trace.t), trace.t])
    coef, *_ = np.linalg.lstsq(A, th, rcond=None)
    slope_err = np.abs(coef[1] / small_model.omega - 1.0).max()
    resid = th - A @ coef
    assert slope_err < 0.01
    assert np.abs(resid).max() < 0.1  # bounded libration, no growth
    # local energy residual of the model at the orbit's toy angles
    theta_toy, _ = orbit.trace_toy_coords(trace, small_model)
    um, _, _ = torus_points(theta_toy, small_model)
    Hm, _ = log_target.value_and_gradient_batch(um)
    eres = np.abs(Hm - small_model.H_bar)
    rate = np.abs(np.gradient(resid, trace.t, axis=0)).max(axis=1)
    q = int(0.9 * len(rate))
    top_r = set(np.argsort(rate)[q:])
    top_e = set(np.argsort(eres)[q:])
    coincidence = len(top_r & top_e) / len(top_r)
    assert coincidence > 0.5
    dt = time.monotonic() - t0
    assert dt < 600.0
    _report(6, "angle/frequency recovery",
            f"(a) toy omega err {err_a:.1e} < 1e-8; (b) omega vs dH_bar/dJ "
            f"{err_b:.2%} < 2%; (c) slope err {slope_err:.2%}, top-decile "
            f"coincidence {coincidence:.0%} > 50%; {dt:.0f} s")


def test_criterion_7_thin_torus_boundary(toy_params, log_target):
    """Scanning thin tori at J_phi = 0.45, J_nu = 0.25, the fit stops
    producing mappable tori near J_lam ~ 0.01 (within a factor of 3); a
    deliberately unmappable evaluation exercises the rejection path."""
    t0 = time.monotonic()
    ws = WaveSet.default(*SMALL_WAVES, symmetry="z-symmetric")
    grid = AngleGrid(*SMALL_GRID)
    eval_grid = AngleGrid(53, 29)  # different offsets from the fit grid
    lm = LMConfig(max_iter=20)
    last_good = None
    first_bad = None
    for j_lam in (0.02, 0.01, 0.005, 0.0025):
        J = np.array([j_lam, 0.45, 0.25])
        try:
            m = fit_torus(J, ws, grid, log_target, lm, toy_params)
            ratio = np.sqrt(m.meta["chi2_start"] / m.meta["chi2"])
            torus_points(eval_grid.points(), m)
            constructed = ratio >= 10.0
        except (UnmappableTorusError, NoBoundOrbitError):
            constructed = False
        if constructed:
            last_good = j_lam
        else:
            first_bad = j_lam
            break
    assert last_good is not None and first_bad is not None
    threshold = np.sqrt(last_good * first_bad)
    assert 0.01 / 3.0 <= threshold <= 0.01 * 3.0

    # the J < 0 rejection path, exercised directly
    fat = TorusModel(J=np.array([0.005, 0.45, 0.25]), waves=ws,
                     S=np.full(len(ws), 0.05), toy_params=toy_params)
    with pytest.raises(UnmappableTorusError) as exc:
        torus_points(eval_grid.points(), fat)
    assert exc.value.J_toy.min() < 0.0
    dt = time.monotonic() - t0
    _report(7, "thin-torus boundary",
            f"thinnest mappable J_lam in ({first_bad}, {last_good}], "
            f"threshold ~ {threshold:.4f} within 3x of 0.01, {dt:.0f} s")


def test_criterion_8_wave_set_count():
    """The structural even-parity wave set at truncation (96, 24) has
    exactly 1212 members, i.e. 1213 unknowns with the mean energy."""
    n = len(WaveSet.default(96, 24, symmetry="even"))
    assert n == 1212
    _report(8, "wave-set count", f"#waves(96, 24, even) = {n} == 1212")
