"""Velocity and velocity-gradient bounds, obstacle regularisation, projections.

Constraints are sampled at cell centres: ``|v| <= gamma`` uses the two-point
face averages, ``|grad v| <= gamma`` the Frobenius norm of
:func:`~constrained_flow.grid.cell_velocity_gradient`.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import (ObstacleField, StaggeredGrid, VectorField, _check_same_grid,
                   cell_gradient_matrices, cell_velocity_gradient,
                   center_interpolation_matrices, curl_matrix,
                   interpolate_face_to_center)
from .semismooth import ConstrainedNewtonSolver
from .solenoidal import PoissonSolver, leray_project

log = logging.getLogger(__name__)


class ConstraintKind(enum.Enum):
    VELOCITY_BOUND = "velocity"
    GRADIENT_BOUND = "gradient"

    @classmethod
    def parse(cls, text) -> "ConstraintKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower()
        aliases = {"velocity": cls.VELOCITY_BOUND, "k1": cls.VELOCITY_BOUND,
                   "velocitybound": cls.VELOCITY_BOUND,
                   "gradient": cls.GRADIENT_BOUND, "k2": cls.GRADIENT_BOUND,
                   "gradientbound": cls.GRADIENT_BOUND}
        try:
            return aliases[key.replace("_", "")]
        except KeyError:
            raise ValueError(f"unknown constraint kind {text!r}") from None


class UnsupportedDegenerateK2(ValueError):
    """Gradient bounds with an obstacle that vanishes somewhere are not solved."""


@dataclass(frozen=True)
class RegularizationParams:
    delta: float
    cap_N: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.cap_N >= 1:
            raise ValueError("cap_N must be >= 1")


@dataclass(frozen=True)
class ProjectionControl:
    tolerance: float = 1e-10
    max_sweeps: int = 5000
    method: str = "dykstra"   # or "newton"
    polish: bool = True       # finish Dykstra with a Newton solve from its iterate

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.method not in ("dykstra", "newton"):
            raise ValueError(f"unknown projection method {self.method!r}")


@dataclass(frozen=True)
class ViolationSummary:
    max_violation: float
    l2_violation: float
    active_fraction: float
    n_active: int


@dataclass
class ProjectionInfo:
    converged: bool
    sweeps: int
    divergence: float
    violation: float
    distances: list = field(default_factory=list)
    newton_iterations: int = 0

    @property
    def degraded(self) -> bool:
        return not self.converged


def regularize_gamma(gamma: ObstacleField, params: RegularizationParams) -> ObstacleField:
    """Clamp the obstacle into ``[delta, N]``; ``inf`` maps to ``N``."""
    vals = np.minimum(np.maximum(gamma.values, params.delta), params.cap_N)
    return ObstacleField(gamma.grid, vals)


def constrained_quantity(v: VectorField, kind: ConstraintKind) -> np.ndarray:
    """Pointwise centre magnitude bounded by the obstacle (``|v|`` or ``|grad v|``)."""
    if kind is ConstraintKind.VELOCITY_BOUND:
        uc, vc = interpolate_face_to_center(v)
        return np.hypot(uc.values, vc.values)
    G = cell_velocity_gradient(v)
    return np.sqrt((G * G).sum(axis=0))


def constraint_blocks(grid: StaggeredGrid, kind: ConstraintKind) -> list[sp.csr_matrix]:
    if kind is ConstraintKind.VELOCITY_BOUND:
        return list(center_interpolation_matrices(grid))
    return cell_gradient_matrices(grid)


def violation_report(v: VectorField, kind: ConstraintKind, gamma: ObstacleField,
                     tol: float = 1e-9) -> ViolationSummary:
    _check_same_grid(v, gamma)
    q = constrained_quantity(v, ConstraintKind.parse(kind))
    g = gamma.values
    viol = np.where(np.isfinite(g), np.maximum(q - np.where(np.isfinite(g), g, 0.0), 0.0), 0.0)
    active = np.isfinite(g) & (q >= g - tol)
    grid = v.grid
    return ViolationSummary(
        max_violation=float(viol.max()),
        l2_violation=float(np.sqrt(grid.cell_area * np.sum(viol**2))),
        active_fraction=float(active.mean()),
        n_active=int(active.sum()),
    )


def pointwise_truncate_K1(v: VectorField, gamma: ObstacleField) -> VectorField:
    """Radial truncation of centre velocities, transferred back to faces.

    Each cell gets the factor ``min(1, gamma / |v_c|)``; a face is scaled by
    the mean factor of its two cells (a boundary face by its single cell).
    The centre bound then holds up to an interpolation slack.
    """
    _check_same_grid(v, gamma)
    speed = constrained_quantity(v, ConstraintKind.VELOCITY_BOUND)
    g = gamma.values
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(speed > g, g / speed, 1.0)
    fu = np.empty_like(v.u)
    fu[1:-1] = 0.5 * (f[1:] + f[:-1])
    fu[0], fu[-1] = f[0], f[-1]
    fv = np.empty_like(v.v)
    fv[:, 1:-1] = 0.5 * (f[:, 1:] + f[:, :-1])
    fv[:, 0], fv[:, -1] = f[:, 0], f[:, -1]
    return VectorField(v.grid, v.u * fu, v.v * fv)


def radial_truncate_centers(uc: np.ndarray, vc: np.ndarray, gamma: np.ndarray):
    """Exact projection of centre vectors onto the balls ``|.| <= gamma``."""
    s = np.hypot(uc, vc)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(s > gamma, gamma / s, 1.0)
    return uc * f, vc * f


# ---------------------------------------------------------------------------
# Projection onto (divergence free) ∩ (pointwise constraint set)
# ---------------------------------------------------------------------------


class _ColoredBallProjector:
    """Exact projection onto ``{|I_c x| <= gamma_c, c in colour}``.

    Cells of one checkerboard colour share no faces and the two centre
    interpolation rows of a cell are orthogonal, so the projection splits into
    independent cell problems.  Row norms differ next to walls (one interior
    face instead of two), which turns the radial clip into a one-dimensional
    secular equation in the cell multiplier.
    """

    def __init__(self, grid, gamma, parity):
        Iu, Iv = center_interpolation_matrices(grid)
        ii, jj = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny), indexing="ij")
        mask = ((ii + jj) % 2 == parity).ravel() & np.isfinite(gamma.ravel())
        self.cells = np.flatnonzero(mask)
        self.gamma = gamma.ravel()[self.cells]
        self.A = [Iu[self.cells].tocsr(), Iv[self.cells].tocsr()]
        self.AT = [A.T.tocsr() for A in self.A]
        self.d = np.stack([np.asarray(A.multiply(A).sum(axis=1)).ravel() for A in self.A])

    def __call__(self, x):
        y = np.stack([A @ x for A in self.A])
        ynew = _ellipse_clip(y, self.d, self.gamma)
        eta = (y - ynew) / self.d
        return x - self.AT[0] @ eta[0] - self.AT[1] @ eta[1]


def _ellipse_clip(y, d, g, iterations=40):
    """Solve ``min |x' - x|`` s.t. ``|A x'| <= g`` in terms of ``y = A x``.

    The minimiser has ``y'_r = y_r / (1 + t d_r)`` with ``t >= 0`` fixing
    ``|y'| = g``; Newton on ``1/g - 1/|y'(t)|`` (nearly linear in ``t``)
    converges monotonically from ``t = 0``.
    """
    s0 = np.sqrt((y * y).sum(axis=0))
    out = s0 > g
    ynew = y.copy()
    zero = out & (g <= 0)
    ynew[:, zero] = 0.0
    act = out & (g > 0)
    if act.any():
        ya, da, ga = y[:, act], d[:, act], g[act]
        t = np.zeros(ga.size)
        for _ in range(iterations):
            q = 1.0 + t * da
            s = np.sqrt(((ya / q) ** 2).sum(axis=0))
            ds = -((ya**2 * da) / q**3).sum(axis=0) / s
            phi = 1.0 / ga - 1.0 / s
            dphi = ds / s**2
            step = phi / dphi
            t = t - step
            if np.all(np.abs(step) <= 1e-15 * np.maximum(t, 1.0)):
                break
        ynew[:, act] = ya / (1.0 + t * da)
    return ynew


def _dykstra_K1(v: VectorField, gamma: ObstacleField, tolerance: float, max_sweeps: int):
    """Dykstra sweeps over (solenoidal subspace, red cells, black cells).

    The subspace needs no correction term since its projection is linear.
    ``distances`` holds the distance to ``v`` of each solenoidal iterate.
    """
    grid = v.grid
    solver = PoissonSolver(grid)
    norm = np.sqrt(grid.cell_area)

    def proj_S(x):
        return leray_project(VectorField.from_interior(grid, x), solver).interior()

    sets = [_ColoredBallProjector(grid, gamma.values, parity) for parity in (0, 1)]
    x0 = v.interior()
    x = proj_S(x0)
    incs = [np.zeros_like(x) for _ in sets]
    distances = [float(norm * np.linalg.norm(x - x0))]
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        x_prev = x
        for k, P in enumerate(sets):
            t = x + incs[k]
            x = P(t)
            incs[k] = t - x
        gap = norm * np.linalg.norm(proj_S(x) - x)
        x = proj_S(x)
        distances.append(float(norm * np.linalg.norm(x - x0)))
        if max(gap, norm * np.linalg.norm(x - x_prev)) <= tolerance:
            converged = True
            break
    return x, converged, sweep, distances


def _newton_projection(v: VectorField, kind: ConstraintKind, gamma: ObstacleField,
                       ctl: ProjectionControl):
    grid = v.grid
    n = grid.n_interior_faces
    solver = ConstrainedNewtonSolver(curl_matrix(grid), constraint_blocks(grid, kind),
                                     sp.identity(n, format="csr"),
                                     tol=min(1e-11, ctl.tolerance))
    return solver.solve(v.interior(), gamma.values.ravel())


def project_constraint_solenoidal(v: VectorField, kind, gamma: ObstacleField,
                                  ctl: ProjectionControl = ProjectionControl(),
                                  return_info: bool = False):
    """Metric projection of ``v`` onto divergence-free fields obeying the bound.

    ``method="dykstra"`` (velocity bounds) alternates the Leray projection with
    exact projections onto the two checkerboard halves of the constraint set,
    keeping Dykstra corrections so that the limit is the nearest point of the
    intersection; with ``polish`` the iterate seeds a semismooth Newton solve
    that removes the remaining tolerance gap.  ``method="newton"`` solves
    directly.  On non-convergence the best iterate is returned and the info
    object reports ``degraded``.
    """
    kind = ConstraintKind.parse(kind)
    _check_same_grid(v, gamma)
    if kind is ConstraintKind.GRADIENT_BOUND:
        return gradient_bound_project_K2(v, gamma, ctl, return_info=return_info)
    grid = v.grid
    distances, sweeps = [], 0
    converged = True
    if ctl.method == "dykstra":
        # the Newton polish owns the final accuracy, so Dykstra can stop early
        tol = max(ctl.tolerance, 1e-6) if ctl.polish else ctl.tolerance
        x, converged, sweeps, distances = _dykstra_K1(v, gamma, tol, ctl.max_sweeps)
        w = VectorField.from_interior(grid, x)
        if not (converged or ctl.polish):
            log.warning("Dykstra projection did not converge in %d sweeps", sweeps)
    newton_its = 0
    if ctl.method == "newton" or ctl.polish:
        sol = _newton_projection(v, kind, gamma, ctl)
        newton_its = sol.report.iterations
        if sol.report.converged or ctl.method == "newton":
            w = VectorField.from_interior(grid, sol.x)
            converged = sol.report.converged
        elif tol > ctl.tolerance:
            # polish failed: finish with Dykstra at the requested tolerance
            x, converged, more, distances = _dykstra_K1(v, gamma, ctl.tolerance, ctl.max_sweeps)
            sweeps += more
            w = VectorField.from_interior(grid, x)
    info = _finish_info(w, kind, gamma, converged, sweeps, distances, newton_its)
    return (w, info) if return_info else w


def _finish_info(w, kind, gamma, converged, sweeps, distances, newton_its):
    from .grid import divergence
    div = float(np.abs(divergence(w).values).max())
    viol = violation_report(w, kind, gamma).max_violation
    return ProjectionInfo(converged, sweeps, div, viol, distances, newton_its)


def gradient_bound_project_K2(v: VectorField, gamma: ObstacleField,
                              ctl: ProjectionControl = ProjectionControl(),
                              return_info: bool = False):
    """Projection onto divergence-free fields with ``|grad v| <= gamma`` at centres.

    Only the non-degenerate regime (``gamma > 0`` everywhere) is supported.
    """
    _check_same_grid(v, gamma)
    if (gamma.values <= 0).any():
        raise UnsupportedDegenerateK2(
            "gradient bound with an obstacle vanishing somewhere (degenerate regime) "
            "is not supported")
    sol = _newton_projection(v, ConstraintKind.GRADIENT_BOUND, gamma, ctl)
    w = VectorField.from_interior(v.grid, sol.x)
    info = _finish_info(w, ConstraintKind.GRADIENT_BOUND, gamma, sol.report.converged, 0, [],
                        sol.report.iterations)
    return (w, info) if return_info else w
