import numpy as np
import pytest

from dualocp.gedmd import exact_generators
from dualocp.polybasis import build_dictionary
from dualocp.presets import example1_system, lorentz_system, vdp_system

BOX2 = np.array([[-5.0, -5.0], [5.0, 5.0]])
N2 = np.array([[-0.1, -0.1], [0.1, 0.1]])


@pytest.fixture(scope="session")
def ex1():
    return example1_system()


@pytest.fixture(scope="session")
def vdp():
    return vdp_system()


@pytest.fixture(scope="session")
def lorentz():
    return lorentz_system()


@pytest.fixture(scope="session")
def ex1_exact(ex1):
    """Exact generators of the first example on a degree-4 Legendre dictionary."""
    basis = build_dictionary("legendre", 2, 4, BOX2)
    return exact_generators(ex1.drift_polys, ex1.input_polys, basis)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one summary line per acceptance criterion (printed at the end of the run)."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
