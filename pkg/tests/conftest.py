import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from commodvol import LocalVolSurface, build_mesh  # noqa: E402


@pytest.fixture(scope="session")
def mesh():
    """The standard calibration lattice (tau_max 0.5, dtau 0.01, dy 0.05)."""
    return build_mesh(0.5, 0.01, 0.05)


@pytest.fixture(scope="session")
def small_mesh():
    """A coarse lattice for gradient checks: I = 8, J = 10."""
    return build_mesh(0.4, 0.05, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def flat_surface(mesh):
    return LocalVolSurface.constant(mesh, 0.08)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
