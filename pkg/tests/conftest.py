import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from npe_control.control import ControlParams, build_control_u, search_amplitudes  # noqa: E402
from npe_control.functionals import compute_trace  # noqa: E402
from npe_control.spectral import LatticeSpec, random_smooth_field  # noqa: E402

# frozen values from tests/oracles.py (triad sum, scipy quad, numpy.roots)
SEARCHED_AMPLITUDES = (-1.0, -2.0, 0.0)
PSI_U_FROZEN = 0.001638018372992819
G_INF_FROZEN = 0.00037125400824573196
T_STAR_FROZEN = 0.1481968493195369  # root of (2/g_inf) g(t) = 1
HORIZON_X0_FROZEN = 0.8771668694469638  # x^16 + x = 1
HORIZON_T_FROZEN = 0.13105803167996583


@pytest.fixture(scope="session")
def lat8():
    return LatticeSpec(32, 8)


@pytest.fixture(scope="session")
def lat4():
    return LatticeSpec(14, 4)


@pytest.fixture(scope="session")
def corpus(lat8):
    return [random_smooth_field(lat8, seed) for seed in range(50)]


@pytest.fixture(scope="session")
def amplitudes():
    return search_amplitudes(ControlParams()).amplitudes


@pytest.fixture(scope="session")
def control8(lat8, amplitudes):
    return build_control_u(ControlParams(amplitudes=amplitudes), lat8)


@pytest.fixture(scope="session")
def u8(control8):
    return control8.u


@pytest.fixture(scope="session")
def trace_u8(u8):
    return compute_trace(u8)


@pytest.fixture(scope="session")
def g_inf(trace_u8):
    return float(trace_u8.cumulative[-1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance report ---------------------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
