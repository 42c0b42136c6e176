import math

import pytest

from vectorsense import beam

WAVELENGTH = 1.55e-6

_ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    """Register a one-line verdict for the acceptance summary printed after the run."""
    _ACCEPTANCE_LINES.append((number, "PASS" if passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")


@pytest.fixture(scope="session")
def small_geometry():
    return beam.GridGeometry.centered(1.0e-3, n=128, span=2.5)


@pytest.fixture(scope="session")
def small_waist():
    # 90-10 width of 1 mm for the doughnut; the unit ratio is close to 1.8426.
    return 1.0e-3 / 1.8426


@pytest.fixture(scope="session")
def radial_small(small_geometry, small_waist):
    return beam.radial_mode(small_waist, WAVELENGTH, 0.0, small_geometry)


@pytest.fixture(scope="session")
def radial_256():
    geom = beam.GridGeometry.centered(1.0e-3, n=256, span=2.5)
    return beam.radial_mode(1.0e-3 / 1.8426, WAVELENGTH, 0.0, geom)


def wrap_pi(a):
    """Difference folded to [-pi/2, pi/2)."""
    return (a + math.pi / 2) % math.pi - math.pi / 2
