"""Command-line driver: config validation, pipeline smoke run, outputs."""

import csv
import json

import numpy as np
import pytest

from staeckeltorus.cli import main

TOY = """\
[toy]
alpha = {alpha}
gamma = {gamma}
rho0 = {rho0}
"""


def _config(tmp_path, toy_params, extra):
    text = TOY.format(alpha=toy_params.coords.alpha,
                      gamma=toy_params.coords.gamma,
                      rho0=toy_params.rho0) + extra.format(out=tmp_path / "run")
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


PIPELINE = """\
[target]
name = logarithmic
a = 0.8
b = 0.14

[torus]
j_lam = 0.5
j_phi = 0.45
j_nu = 0.5
k_lam_max = 6
k_nu_max = 4
symmetry = z-symmetric

[grid]
n_lam = 16
n_nu = 12

[lm]
max_iter = 6

[output]
outdir = {out}
seed = 3
n_orbits = 2
duration = 8
section_count = 4
"""


def _read_csv(path):
    with open(path) as fh:
        lines = fh.readlines()
    comments = [l for l in lines if l.startswith("#")]
    rows = list(csv.reader(l for l in lines if not l.startswith("#")))
    return comments, rows[0], rows[1:]


def test_missing_config_file_is_exit_2(capsys):
    assert main(["fit-torus", "-c", "/nonexistent/x.ini"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_unknown_key_is_exit_2_and_named(tmp_path, toy_params, capsys):
    path = _config(tmp_path, toy_params, PIPELINE + "bogus_knob = 1\n")
    assert main(["fit-torus", "-c", str(path)]) == 2
    err = capsys.readouterr().err
    assert "bogus_knob" in err and "[output]" in err


def test_unknown_section_is_exit_2(tmp_path, toy_params, capsys):
    path = _config(tmp_path, toy_params, PIPELINE + "\n[mystery]\nx = 1\n")
    assert main(["fit-torus", "-c", str(path)]) == 2
    assert "mystery" in capsys.readouterr().err


def test_missing_model_is_exit_2(tmp_path, toy_params, capsys):
    path = _config(tmp_path, toy_params, PIPELINE)
    assert main(["recover-angles", "-c", str(path)]) == 2
    assert "fit-torus" in capsys.readouterr().err


def test_fit_params_writes_json(tmp_path, capsys):
    ini = tmp_path / "p.ini"
    ini.write_text("[toy]\nprefit = true\n\n[target]\nname = logarithmic\n"
                   f"a = 0.8\nb = 0.14\n\n[output]\noutdir = {tmp_path / 'run'}\n")
    assert main(["fit-params", "-c", str(ini)]) == 0
    payload = json.loads((tmp_path / "run" / "toyparams.json").read_text())
    assert abs(payload["alpha"] / -0.639 - 1.0) < 0.05
    assert payload["config"]["target"]["name"] == "logarithmic"


@pytest.mark.slow
def test_pipeline_smoke(tmp_path, toy_params, capsys):
    """fit-torus -> recover-angles -> trace -> section -> report end to end
    on a deliberately tiny configuration."""
    path = _config(tmp_path, toy_params, PIPELINE)
    out = tmp_path / "run"

    assert main(["fit-torus", "-c", str(path)]) == 0
    model = json.loads((out / "model.json").read_text())
    assert model["format"] == "staeckeltorus-model-1"
    assert model["meta"]["chi2"] < model["meta"]["chi2_start"]
    comments, header, rows = _read_csv(out / "coefficients.csv")
    assert header == ["k_lam", "k_nu", "S", "abs_klam_S", "abs_knu_S"]
    assert len(rows) == len(model["S"])
    # config is embedded in every CSV header
    assert any("torus.k_lam_max = 6" in c for c in comments)

    assert main(["recover-angles", "-c", str(path)]) == 0
    model = json.loads((out / "model.json").read_text())
    assert model["omega"] is not None and len(model["omega"]) == 3
    assert np.isfinite(model["omega"]).all()

    assert main(["trace", "-c", str(path)]) == 0
    _, header, rows = _read_csv(out / "trace_actions_00.csv")
    assert header == ["t", "dJ_lam", "dJ_phi", "dJ_nu"]
    assert (out / "trace_actions_01.csv").exists()
    assert not (out / "trace_actions_02.csv").exists()
    assert (out / "trace_freq_00.csv").exists()
    dJ = np.array(rows, dtype=float)[:, 1:]
    assert np.isfinite(dJ).all()

    assert main(["section", "-c", str(path)]) == 0
    _, header, rows = _read_csv(out / "section.csv")
    assert header == ["t", "R", "p_R"] and len(rows) > 0
    _, header, rows = _read_csv(out / "torus_section.csv")
    assert header == ["R", "p_R"] and len(rows) == 4

    assert main(["report", "-c", str(path)]) == 0
    for name in ("coefficients.svg", "section.svg", "trace_actions.svg",
                 "trace_freq.svg"):
        svg = (out / name).read_text()
        assert svg.lstrip().startswith("<?xml")


def test_seed_determinism(tmp_path, toy_params, capsys):
    """Two runs with the same seed produce bit-identical trace CSVs."""
    path = _config(tmp_path, toy_params, PIPELINE)
    out = tmp_path / "run"
    assert main(["fit-torus", "-c", str(path)]) == 0
    assert main(["trace", "-c", str(path)]) == 0
    first = (out / "trace_actions_00.csv").read_bytes()
    assert main(["trace", "-c", str(path)]) == 0
    assert (out / "trace_actions_00.csv").read_bytes() == first
