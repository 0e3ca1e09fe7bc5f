"""Command-line driver: configuration, fits, orbit traces, and reports.

Subcommands
-----------
fit-params      pre-fit the toy potential parameters to the target
fit-torus       fit the generating-function coefficients of one torus
recover-angles  solve for model frequencies and dS/dJ on a fitted torus
section         Poincare section (z=0, p_z>0) of orbits started on the torus
trace           Delta J(t) and Delta omega(t) along orbits started on the torus
report          render SVG plots from the CSV outputs of a run directory

Configuration is an INI file with sections [toy], [target], [torus],
[grid], [lm], [output]; unknown sections or keys are errors.  Every
output file embeds the configuration it was produced with.  Exit codes:
0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, anglerec, orbit, target as target_mod, torusfit
from .coords import CoordParams
from .errors import ConfigError, StaeckelTorusError
from .numerics import LMConfig
from .staeckel import ToyParams
from .target import FitRegion, fit_toy_params
from .torusfit import AngleGrid, TorusModel, WaveSet

_SCHEMA = {
    "toy": {"alpha", "gamma", "rho0", "prefit", "r_min", "r_max", "n_r",
            "z_over_r"},
    "target": {"name", "a", "b", "alpha", "gamma", "rho0"},
    "torus": {"j_lam", "j_phi", "j_nu", "k_lam_max", "k_nu_max", "symmetry"},
    "grid": {"n_lam", "n_nu", "theta_phi"},
    "lm": {"max_iter", "lam0", "lam_up", "lam_down", "grad_tol", "step_tol"},
    "output": {"outdir", "seed", "n_orbits", "duration", "orbit_tol",
               "section_count"},
}


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
    return cp


def config_dict(cp: configparser.ConfigParser) -> dict:
    return {s: dict(cp[s]) for s in cp.sections()}


def _require(cp, section, key):
    if section not in cp or key not in cp[section]:
        raise ConfigError(f"missing required key '{key}' in section [{section}]")
    return cp[section][key]


def build_target(cp):
    name = _require(cp, "target", "name")
    kwargs = {}
    for key in ("a", "b", "alpha", "gamma", "rho0"):
        if cp.has_option("target", key):
            kwargs[key] = cp.getfloat("target", key)
    try:
        return target_mod.make_target(name, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for target '{name}': {exc}")


def build_lm(cp) -> LMConfig:
    kwargs = {}
    if cp.has_section("lm"):
        for key in cp["lm"]:
            conv = int if key == "max_iter" else float
            kwargs[key] = conv(cp["lm"][key])
    return LMConfig(**kwargs)


def build_region(cp) -> FitRegion:
    kwargs = {}
    if cp.has_option("toy", "r_min"):
        kwargs["r_min"] = cp.getfloat("toy", "r_min")
    if cp.has_option("toy", "r_max"):
        kwargs["r_max"] = cp.getfloat("toy", "r_max")
    if cp.has_option("toy", "n_r"):
        kwargs["n_r"] = cp.getint("toy", "n_r")
    if cp.has_option("toy", "z_over_r"):
        kwargs["z_over_r"] = tuple(
            float(x) for x in cp["toy"]["z_over_r"].split(","))
    return FitRegion(**kwargs)


def build_toy_params(cp, target) -> ToyParams:
    prefit = cp.has_option("toy", "prefit") and cp.getboolean("toy", "prefit")
    if prefit:
        params, _, _ = fit_toy_params(target, build_region(cp), build_lm(cp))
        return params
    try:
        alpha = cp.getfloat("toy", "alpha")
        gamma = cp.getfloat("toy", "gamma")
        rho0 = cp.getfloat("toy", "rho0")
    except (configparser.NoSectionError, configparser.NoOptionError):
        raise ConfigError(
            "section [toy] needs alpha, gamma, rho0 (or prefit = true)")
    return ToyParams(coords=CoordParams(alpha=alpha, gamma=gamma), rho0=rho0)


def _outdir(cp) -> Path:
    out = Path(_require(cp, "output", "outdir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header_lines(cp):
    lines = [f"# staeckeltorus {__version__}"]
    for section, values in config_dict(cp).items():
        for key, val in values.items():
            lines.append(f"# {section}.{key} = {val}")
    return lines


def write_csv(path, cp, header, rows):
    with open(path, "w", newline="") as fh:
        for line in _header_lines(cp):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def load_model_checked(cp) -> TorusModel:
    path = _outdir(cp) / "model.json"
    if not path.exists():
        raise ConfigError(f"no fitted model at {path}; run fit-torus first")
    return torusfit.load_model(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit_params(cp):
    target = build_target(cp)
    params, c, res = fit_toy_params(target, build_region(cp), build_lm(cp))
    out = _outdir(cp)
    payload = {
        "alpha": params.coords.alpha,
        "gamma": params.coords.gamma,
        "rho0": params.rho0,
        "offset_c": c,
        "chi2": res.chi2,
        "iterations": res.iterations,
        "config": config_dict(cp),
        "version": __version__,
    }
    with open(out / "toyparams.json", "w") as fh:
        json.dump(payload, fh, indent=2)
    print(f"alpha={params.coords.alpha:.6f} gamma={params.coords.gamma:.6f} "
          f"rho0={params.rho0:.6f} chi2={res.chi2:.3e}")
    print(f"wrote {out / 'toyparams.json'}")


def _torus_inputs(cp, target):
    J = np.array([cp.getfloat("torus", "j_lam"),
                  cp.getfloat("torus", "j_phi"),
                  cp.getfloat("torus", "j_nu")])
    symmetry = cp.get("torus", "symmetry", fallback="z-symmetric")
    waves = WaveSet.default(cp.getint("torus", "k_lam_max"),
                            cp.getint("torus", "k_nu_max"), symmetry=symmetry)
    grid = AngleGrid(cp.getint("grid", "n_lam"), cp.getint("grid", "n_nu"),
                     theta_phi=cp.getfloat("grid", "theta_phi", fallback=0.0))
    return J, waves, grid


def cmd_fit_torus(cp):
    target = build_target(cp)
    toy_params = build_toy_params(cp, target)
    J, waves, grid = _torus_inputs(cp, target)
    model = torusfit.fit_torus(J, waves, grid, target, build_lm(cp),
                               toy_params, verbose=True)
    model.meta["config"] = config_dict(cp)
    out = _outdir(cp)
    torusfit.save_model(model, out / "model.json")
    rows = [(int(k[0]), int(k[1]), s, abs(k[0] * s), abs(k[1] * s))
            for k, s in zip(model.waves.k, model.S)]
    write_csv(out / "coefficients.csv", cp,
              ["k_lam", "k_nu", "S", "abs_klam_S", "abs_knu_S"], rows)
    print(f"chi2 {model.meta['chi2_start']:.4e} -> {model.meta['chi2']:.4e} "
          f"in {model.meta['iterations']} iterations; "
          f"sigma_H/|H| = {model.meta['sigma_H_over_Hbar']:.3e}")
    print(f"wrote {out / 'model.json'} and {out / 'coefficients.csv'}")


def cmd_recover_angles(cp):
    target = build_target(cp)
    model = load_model_checked(cp)
    _, _, grid = _torus_inputs(cp, target)
    result = anglerec.solve_model_angles(model, grid, target)
    model.meta["config"] = config_dict(cp)
    out = _outdir(cp)
    torusfit.save_model(model, out / "model.json")
    print(f"omega = {result.omega} (cond {result.cond:.2e}, "
          f"residual norms {result.residual_norm})")
    print(f"updated {out / 'model.json'}")


def _start_points(model, cp):
    """Orbit initial conditions spread over the model torus."""
    seed = cp.getint("output", "seed", fallback=0)
    n = cp.getint("output", "n_orbits", fallback=4)
    rng = np.random.default_rng(seed)
    theta0 = rng.uniform(0.0, 2.0 * np.pi, (n, 3))
    u0, _, _ = torusfit.torus_points(theta0, model)
    return u0


def _integrate_all(model, cp, target):
    duration = cp.getfloat("output", "duration", fallback=60.0)
    tol = cp.getfloat("output", "orbit_tol", fallback=1e-11)
    return [orbit.integrate_target_orbit(u0, target, duration, tol=tol)
            for u0 in _start_points(model, cp)]


def cmd_section(cp):
    target = build_target(cp)
    model = load_model_checked(cp)
    out = _outdir(cp)
    traces = _integrate_all(model, cp, target)
    rows = []
    for trace in traces:
        rows.extend(tuple(row) for row in orbit.poincare_section(trace))
    write_csv(out / "section.csv", cp, ["t", "R", "p_R"], rows)
    count = cp.getint("output", "section_count", fallback=16)
    pts = orbit.torus_section(model, count=count)
    write_csv(out / "torus_section.csv", cp, ["R", "p_R"],
              [tuple(row) for row in pts])
    print(f"wrote {out / 'section.csv'} ({len(rows)} crossings) and "
          f"{out / 'torus_section.csv'} ({count} points)")


def cmd_trace(cp):
    target = build_target(cp)
    model = load_model_checked(cp)
    out = _outdir(cp)
    traces = _integrate_all(model, cp, target)
    for i, trace in enumerate(traces):
        dJ = orbit.trace_actions(model, trace)
        write_csv(out / f"trace_actions_{i:02d}.csv", cp,
                  ["t", "dJ_lam", "dJ_phi", "dJ_nu"],
                  np.column_stack([trace.t, dJ]).tolist())
    if model.omega is not None and model.dS_dJ is not None:
        for i, trace in enumerate(traces):
            dw = orbit.trace_frequencies(model, trace, target)
            write_csv(out / f"trace_freq_{i:02d}.csv", cp,
                      ["t", "dw_lam", "dw_phi", "dw_nu"],
                      np.column_stack([trace.t, dw]).tolist())
        print(f"wrote {len(traces)} action and frequency trace files in {out}")
    else:
        print(f"wrote {len(traces)} action trace files in {out} "
              "(no omega/dS_dJ in model; run recover-angles for frequencies)")


def _read_csv(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(
            line for line in fh if not line.startswith("#"))]
    return rows[0], np.array(rows[1:], dtype=float)


def cmd_report(cp):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _outdir(cp)
    made = []

    coeff = out / "coefficients.csv"
    if coeff.exists():
        _, data = _read_csv(coeff)
        knorm = np.hypot(data[:, 0], data[:, 1])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.semilogy(knorm, np.abs(data[:, 2]) + 1e-300, ".", ms=3)
        ax.set_xlabel("|k|")
        ax.set_ylabel("|S_k|")
        fig.savefig(out / "coefficients.svg", bbox_inches="tight")
        plt.close(fig)
        made.append("coefficients.svg")

    section = out / "section.csv"
    if section.exists():
        _, data = _read_csv(section)
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.plot(data[:, 1], data[:, 2], ".", ms=3, label="orbit crossings")
        tsec = out / "torus_section.csv"
        if tsec.exists():
            _, pts = _read_csv(tsec)
            ax.plot(pts[:, 0], pts[:, 1], "o", mfc="none", label="model torus")
        ax.set_xlabel("R")
        ax.set_ylabel("p_R")
        ax.legend(fontsize=8)
        fig.savefig(out / "section.svg", bbox_inches="tight")
        plt.close(fig)
        made.append("section.svg")

    for stem, ylabel in (("trace_actions", "Delta J"),
                         ("trace_freq", "Delta omega")):
        files = sorted(out.glob(f"{stem}_*.csv"))
        if not files:
            continue
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for path in files:
            header, data = _read_csv(path)
            for j, name in enumerate(header[1:], start=1):
                ax.plot(data[:, 0], data[:, j], lw=0.6,
                        label=name if path == files[0] else None)
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.savefig(out / f"{stem}.svg", bbox_inches="tight")
        plt.close(fig)
        made.append(f"{stem}.svg")

    if not made:
        print(f"no CSV outputs found in {out}")
    else:
        print("wrote " + ", ".join(str(out / name) for name in made))


_COMMANDS = {
    "fit-params": cmd_fit_params,
    "fit-torus": cmd_fit_torus,
    "recover-angles": cmd_recover_angles,
    "section": cmd_section,
    "trace": cmd_trace,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="staeckeltorus",
        description="Invariant tori and action-angle variables from a "
                    "Staeckel toy Hamiltonian plus a fitted generating "
                    "function.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("-c", "--config", required=True,
                        help="INI configuration file")
    args = parser.parse_args(argv)
    try:
        cp = load_config(args.config)
        _COMMANDS[args.command](cp)
    except (ConfigError, configparser.Error, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StaeckelTorusError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
