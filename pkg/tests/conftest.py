"""Shared fixtures: reference toy parameters, targets, and small tori."""

import numpy as np
import pytest

from staeckeltorus.coords import CoordParams
from staeckeltorus.staeckel import ToyParams
from staeckeltorus.target import LogTarget


# Toy parameters obtained by the pre-fit against the logarithmic target
# (a=0.8, b=0.14) over the default fit region; frozen here so tests do
# not depend on the fit converging first.
PREFIT_ALPHA = -0.6516101305
PREFIT_GAMMA = -0.1450919018
PREFIT_RHO0 = 1.3195556690


@pytest.fixture(scope="session")
def toy_params():
    return ToyParams(coords=CoordParams(alpha=PREFIT_ALPHA, gamma=PREFIT_GAMMA),
                     rho0=PREFIT_RHO0)


@pytest.fixture(scope="session")
def log_target():
    return LogTarget()


@pytest.fixture(scope="session")
def reference_actions():
    """Desk-scale torus label used throughout the validation runs."""
    return np.array([0.5, 0.45, 0.5])
