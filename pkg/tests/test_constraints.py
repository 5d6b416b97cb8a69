import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from constrained_flow.constraints import (ConstraintKind, ProjectionControl,
                                          RegularizationParams, UnsupportedDegenerateK2,
                                          constrained_quantity, gradient_bound_project_K2,
                                          pointwise_truncate_K1, project_constraint_solenoidal,
                                          radial_truncate_centers, regularize_gamma,
                                          violation_report)
from constrained_flow.grid import (ObstacleField, StaggeredGrid, VectorField, cell_velocity_gradient,
                                   divergence, interpolate_face_to_center)
from constrained_flow.solenoidal import leray_project

from conftest import random_solenoidal, random_vector
from oracles import naive_violation, qp_projection


def const(grid, value):
    return ObstacleField.constant(grid, value)


# -- regularisation ----------------------------------------------------------

@pytest.mark.parametrize("gamma, expected", [(0.5, 0.5), (0.0, 0.1), (np.inf, 10.0)])
def test_regularize_examples(grid16, gamma, expected):
    out = regularize_gamma(const(grid16, gamma), RegularizationParams(0.1, 10.0))
    assert np.all(out.values == expected)


def test_regularization_params_validated():
    for d, n in [(0.0, 2.0), (1.0, 2.0), (0.5, 0.5)]:
        with pytest.raises(ValueError):
            RegularizationParams(d, n)


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.one_of(st.floats(0, 1e3), st.just(np.inf)), min_size=9, max_size=9),
       delta=st.floats(1e-3, 0.99), N=st.floats(1.0, 50.0))
def test_regularize_clamps_and_keeps_middle(vals, delta, N):
    g = StaggeredGrid.uniform(3, 3)
    gam = ObstacleField(g, np.array(vals).reshape(3, 3))
    out = regularize_gamma(gam, RegularizationParams(delta, N)).values
    assert np.all((out >= delta) & (out <= N))
    mid = (gam.values >= delta) & (gam.values <= N)
    assert np.array_equal(out[mid], gam.values[mid])


def test_constraint_kind_parsing():
    assert ConstraintKind.parse("K1") is ConstraintKind.VELOCITY_BOUND
    assert ConstraintKind.parse("gradient_bound") is ConstraintKind.GRADIENT_BOUND
    with pytest.raises(ValueError):
        ConstraintKind.parse("curl")


# -- pointwise truncation ----------------------------------------------------

def test_truncate_scales_onto_ball(grid16):
    vf = VectorField.from_functions(grid16, lambda x, y: 3 + 0 * x, lambda x, y: 4 + 0 * x,
                                    no_slip=False)
    uc, vc = interpolate_face_to_center(pointwise_truncate_K1(vf, const(grid16, 1.0)))
    assert np.allclose(uc.values, 0.6) and np.allclose(vc.values, 0.8)


def test_truncate_infinite_and_zero(grid16, rng):
    vf = random_vector(grid16, rng)
    same = pointwise_truncate_K1(vf, const(grid16, np.inf))
    assert np.array_equal(same.u, vf.u) and np.array_equal(same.v, vf.v)
    assert pointwise_truncate_K1(vf, const(grid16, 0.0)).max_abs() == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gval=st.floats(0.0, 3.0))
def test_centre_truncation_idempotent_and_nonexpansive(seed, gval):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 5, 5))
    b = rng.standard_normal((2, 5, 5))
    g = np.full((5, 5), gval)
    pa = radial_truncate_centers(*a, g)
    pb = radial_truncate_centers(*b, g)
    again = radial_truncate_centers(*pa, g)
    assert np.allclose(again, pa, atol=1e-14)
    assert np.linalg.norm(np.subtract(pa, pb)) <= np.linalg.norm(a - b) * (1 + 1e-12)


def test_face_truncation_slack_is_small(rng):
    g = StaggeredGrid.uniform(32, 32)
    xs, ys = g.u_points()
    vf = VectorField.from_functions(g, lambda x, y: np.sin(np.pi * x) * np.cos(np.pi * y),
                                    lambda x, y: -np.cos(np.pi * x) * np.sin(np.pi * y))
    out = pointwise_truncate_K1(vf, const(g, 0.5))
    # averaging the factors to faces leaves an O(h) excess, not an O(1) one
    assert violation_report(out, "velocity", const(g, 0.5)).max_violation < 0.1


# -- projection onto the intersection ----------------------------------------

def test_feasible_solenoidal_field_is_fixed(grid16, rng):
    w = random_solenoidal(grid16, rng, scale=0.5)
    out = project_constraint_solenoidal(w, "velocity", const(grid16, 1.0))
    assert (out - w).max_abs() <= 1e-9


def test_infinite_obstacle_reduces_to_leray(grid16, rng):
    v = random_vector(grid16, rng)
    out = project_constraint_solenoidal(v, "velocity", const(grid16, np.inf))
    assert (out - leray_project(v)).max_abs() <= 1e-9


@pytest.mark.parametrize("method", ["dykstra", "newton"])
def test_projection_matches_conic_oracle(rng, method):
    g = StaggeredGrid.uniform(8, 8)
    for _ in range(3):
        v = random_vector(g, rng)
        gam = ObstacleField(g, rng.uniform(0.0, 0.6, g.shape))
        w, info = project_constraint_solenoidal(
            v, "velocity", gam, ProjectionControl(method=method), return_info=True)
        ref = qp_projection(v, gam)
        assert (w - ref).norm() <= 1e-6
        assert info.divergence <= 1e-8 and info.violation <= 1e-8
        assert not info.degraded


def test_dykstra_without_polish_matches_oracle(rng):
    g = StaggeredGrid.uniform(8, 8)
    v = random_vector(g, rng)
    gam = ObstacleField(g, rng.uniform(0.1, 0.6, g.shape))
    w, info = project_constraint_solenoidal(
        v, "velocity", gam, ProjectionControl(tolerance=1e-10, max_sweeps=20000, polish=False),
        return_info=True)
    assert info.converged
    assert (w - qp_projection(v, gam)).norm() <= 1e-6


def test_dykstra_distances_are_monotone(rng):
    g = StaggeredGrid.uniform(12, 12)
    tol = 1e-9
    for _ in range(3):
        v = random_vector(g, rng)
        gam = ObstacleField(g, rng.uniform(0.0, 0.5, g.shape))
        _, info = project_constraint_solenoidal(
            v, "velocity", gam, ProjectionControl(tolerance=tol, polish=False), return_info=True)
        d = np.array(info.distances)
        # non-decreasing up to the sweep tolerance
        assert np.all(np.diff(d) >= -10 * tol)
        assert d[-1] >= d[0]


def test_non_convergence_is_flagged(rng):
    g = StaggeredGrid.uniform(8, 8)
    v = random_vector(g, rng)
    gam = ObstacleField(g, rng.uniform(0.0, 0.3, g.shape))
    w, info = project_constraint_solenoidal(
        v, "velocity", gam, ProjectionControl(max_sweeps=2, polish=False), return_info=True)
    assert info.degraded and info.sweeps == 2
    assert np.isfinite(w.u).all()


def test_zero_patch_stops_flow(rng):
    g = StaggeredGrid.uniform(16, 16)
    v = random_vector(g, rng)
    vals = np.full(g.shape, np.inf)
    vals[4:10, 5:12] = 0.0
    gam = ObstacleField(g, vals)
    w = project_constraint_solenoidal(v, "velocity", gam)
    speed = constrained_quantity(w, ConstraintKind.VELOCITY_BOUND)
    assert speed[4:10, 5:12].max() <= 1e-8
    assert np.abs(divergence(w).values).max() <= 1e-8


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gval=st.floats(0.05, 1.0))
def test_projection_lands_in_intersection(seed, gval):
    g = StaggeredGrid.uniform(8, 6, 1.0, 0.75)
    v = random_vector(g, np.random.default_rng(seed))
    w = project_constraint_solenoidal(v, "velocity", const(g, gval))
    assert np.abs(divergence(w).values).max() <= 1e-8
    assert violation_report(w, "velocity", const(g, gval)).max_violation <= 1e-8
    # a projection never moves further than to any feasible point, e.g. zero
    assert (w - v).norm() <= v.norm() + 1e-12


# -- gradient bounds ---------------------------------------------------------

def test_gradient_bound_inactive_is_identity(grid16, rng):
    w = random_solenoidal(grid16, rng)
    G = cell_velocity_gradient(w)
    gmax = np.sqrt((G * G).sum(axis=0)).max()
    out = gradient_bound_project_K2(w, const(grid16, 2 * gmax))
    assert (out - w).max_abs() <= 1e-9


def test_gradient_bound_clips_shear():
    g = StaggeredGrid.uniform(16, 16)
    sigma, gam = 4.0, 1.5
    v = leray_project(VectorField.from_functions(g, lambda x, y: sigma * (y - 0.5),
                                                 lambda x, y: 0 * x))
    w, info = gradient_bound_project_K2(v, const(g, gam), return_info=True)
    G = cell_velocity_gradient(w)
    assert np.sqrt((G * G).sum(axis=0)).max() <= gam + 1e-8
    assert info.divergence <= 1e-8
    # the interior shear slope is reduced to at most the bound
    dudy = G[1][4:12, 4:12]
    assert np.abs(dudy).max() <= gam + 1e-8


def test_gradient_bound_matches_conic_oracle(rng):
    g = StaggeredGrid.uniform(6, 6)
    v = random_vector(g, rng)
    gam = ObstacleField(g, rng.uniform(0.5, 3.0, g.shape))
    w = gradient_bound_project_K2(v, gam)
    assert (w - qp_projection(v, gam, kind="gradient")).norm() <= 1e-6


def test_degenerate_gradient_bound_rejected(grid16, rng):
    vals = np.ones(grid16.shape)
    vals[3, 3] = 0.0
    with pytest.raises(UnsupportedDegenerateK2):
        gradient_bound_project_K2(random_vector(grid16, rng), ObstacleField(grid16, vals))
    with pytest.raises(UnsupportedDegenerateK2):
        project_constraint_solenoidal(random_vector(grid16, rng), "gradient",
                                      ObstacleField(grid16, vals))


# -- violation report --------------------------------------------------------

def test_violation_of_feasible_and_doubled_fields(grid16):
    vf = VectorField.from_functions(grid16, lambda x, y: 0.6 + 0 * x, lambda x, y: 0.8 + 0 * x,
                                    no_slip=False)
    rep = violation_report(vf, "velocity", const(grid16, 1.0))
    assert rep.max_violation == 0 and rep.active_fraction == 1.0
    rep = violation_report(vf * 2.0, "velocity", const(grid16, 1.0))
    assert rep.max_violation == pytest.approx(1.0)


def test_violation_matches_naive_loop(grid16, rng):
    v = random_vector(grid16, rng)
    gvals = rng.uniform(0, 1, grid16.shape)
    gvals[0, :] = np.inf
    gam = ObstacleField(grid16, gvals)
    assert violation_report(v, "velocity", gam).max_violation == pytest.approx(
        max(naive_violation(v, gam), 0.0), abs=1e-15)
