import numpy as np
import pytest

from constrained_flow.grid import ScalarField, StaggeredGrid, VectorField
from constrained_flow.solenoidal import leray_project


def random_vector(grid, rng, no_slip=True):
    vf = VectorField(grid, rng.standard_normal((grid.nx + 1, grid.ny)),
                     rng.standard_normal((grid.nx, grid.ny + 1)))
    return vf.with_no_slip() if no_slip else vf


def random_solenoidal(grid, rng, scale=1.0):
    p = leray_project(random_vector(grid, rng))
    return p * (scale / p.max_abs())


def random_scalar(grid, rng):
    return ScalarField(grid, rng.standard_normal(grid.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid16():
    return StaggeredGrid.uniform(16, 12, 1.0, 0.75)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
