import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from constrained_flow.grid import ScalarField, StaggeredGrid, VectorField, curl_matrix, divergence, gradient
from constrained_flow.solenoidal import (PoissonConvergenceError, PoissonSolver,
                                         leray_project, neumann_laplacian, poisson_solve)

from conftest import random_scalar, random_vector


def test_zero_rhs_gives_zero(grid16):
    q = poisson_solve(ScalarField.zeros(grid16))
    assert np.all(q.values == 0)


@pytest.mark.parametrize("method", ["dct", "cg"])
def test_recovers_forward_applied_potential(grid16, rng, method):
    q_star = random_scalar(grid16, rng)
    q_star = q_star - q_star.mean()
    rhs = neumann_laplacian(q_star)
    q, info = poisson_solve(rhs, PoissonSolver(grid16, method=method), return_info=True)
    assert np.abs(q.values - q_star.values).max() <= 1e-9
    assert info.residual <= 1e-12


def test_dct_and_cg_agree(rng):
    g = StaggeredGrid.uniform(24, 20, 1.0, 0.8)
    rhs = random_scalar(g, rng)
    a = poisson_solve(rhs, PoissonSolver(g, method="dct"))
    b = poisson_solve(rhs, PoissonSolver(g, method="cg"))
    assert np.abs(a.values - b.values).max() <= 1e-10 * np.abs(a.values).max()


def test_nonzero_mean_is_reported(grid16, rng):
    rhs = random_scalar(grid16, rng) + 2.0
    q, info = poisson_solve(rhs, return_info=True)
    assert info.mean_removed == pytest.approx(rhs.mean())
    assert np.allclose(neumann_laplacian(q).values, rhs.values - rhs.mean(), atol=1e-9)
    assert abs(q.mean()) < 1e-12


def test_cg_signals_non_convergence(rng):
    g = StaggeredGrid.uniform(32, 32)
    solver = PoissonSolver(g, method="cg", max_iterations=3)
    with pytest.raises(PoissonConvergenceError) as exc:
        solver.solve(random_scalar(g, rng))
    assert exc.value.residual > 0


def test_solver_validates_settings(grid16):
    with pytest.raises(ValueError):
        PoissonSolver(grid16, tolerance=2.0)
    with pytest.raises(ValueError):
        PoissonSolver(grid16, method="multigrid")


def test_projection_of_gradient_vanishes(grid16, rng):
    z = gradient(random_scalar(grid16, rng))
    assert leray_project(z).norm() <= 1e-10 * z.norm()


def test_projection_keeps_divergence_free_fields(grid16, rng):
    w = VectorField.from_interior(grid16, curl_matrix(grid16) @ rng.standard_normal(
        (grid16.nx - 1) * (grid16.ny - 1)))
    assert (leray_project(w) - w).max_abs() <= 1e-10 * w.max_abs()


def test_projection_is_orthogonal(grid16, rng):
    z = random_vector(grid16, rng)
    pz = leray_project(z)
    w = VectorField.from_interior(grid16, curl_matrix(grid16) @ rng.standard_normal(
        (grid16.nx - 1) * (grid16.ny - 1)))
    assert abs((z - pz).dot(w)) <= 1e-11 * z.norm() * w.norm()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), nx=st.integers(3, 12), ny=st.integers(3, 12))
def test_projection_properties(seed, nx, ny):
    g = StaggeredGrid.uniform(nx, ny, 1.0, 0.6)
    z = random_vector(g, np.random.default_rng(seed))
    p = leray_project(z)
    assert np.abs(divergence(p).values).max() <= 1e-8 * max(1.0, z.max_abs())
    assert (leray_project(p) - p).max_abs() <= 1e-10 * max(1.0, z.max_abs())
    assert p.norm() <= z.norm() * (1 + 1e-12)
    assert p.boundary_normal_max() == 0
