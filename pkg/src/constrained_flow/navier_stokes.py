"""Backward-Euler time stepping of the constrained Navier-Stokes inequality.

Each step solves, over divergence-free no-slip fields obeying the pointwise
bound,

    <(v+ - v^n)/dt + nu A v+ + G(w) v+ - g, xi - v+> >= 0   for all admissible xi,

with ``A`` the Dirichlet vector Laplacian (``-lap``) and ``G(w)`` the skew
advection matrix frozen at ``w = v^n`` (or iterated to ``w = v+``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constraints import (ConstraintKind, ProjectionControl, UnsupportedDegenerateK2,
                          constraint_blocks, project_constraint_solenoidal,
                          violation_report)
from .grid import (ObstacleField, StaggeredGrid, VectorField, curl_matrix,
                   dirichlet_energy, laplacian_matrix)
from .semismooth import ConstrainedNewtonSolver

log = logging.getLogger(__name__)

ADVECTION_MODES = ("frozen", "full", "off")


# ---------------------------------------------------------------------------
# Advection
# ---------------------------------------------------------------------------


def convection_matrix(w: VectorField) -> sp.csr_matrix:
    """Central flux-form convection ``div(w z)`` on interior faces.

    Fluxes are face averages of ``w`` (all of ``w``'s faces are used, so a
    non-zero normal wall velocity is allowed); transported values are two-point
    averages of ``z`` with ``z = 0`` on walls.
    """
    g = w.grid
    nx, ny, hx, hy = g.nx, g.ny, g.hx, g.hy
    iu, iv = g.u_index, g.v_index
    wu, wv = w.u, w.v
    rows, cols, vals = [], [], []

    def add(r, c, coef):
        r, c, coef = np.broadcast_arrays(r, c, coef)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(coef.astype(float).ravel())

    # u faces (i, j), i = 1..nx-1
    p = iu[1:-1]
    fe = 0.5 * (wu[1:-1] + wu[2:]) / hx          # flux through cell i
    fw = 0.5 * (wu[:-2] + wu[1:-1]) / hx         # flux through cell i-1
    add(p, p, 0.5 * (fe - fw))
    add(p, iu[2:], 0.5 * fe)
    add(p, iu[:-2], -0.5 * fw)
    # node fluxes: wv averaged over cells i-1, i at row j (south) and j+1 (north)
    fn = 0.5 * (wv[:-1, 1:] + wv[1:, 1:]) / hy   # shape (nx-1, ny)
    fs = 0.5 * (wv[:-1, :-1] + wv[1:, :-1]) / hy
    add(p[:, :-1], p[:, :-1], 0.5 * fn[:, :-1])
    add(p[:, :-1], p[:, 1:], 0.5 * fn[:, :-1])
    add(p[:, 1:], p[:, 1:], -0.5 * fs[:, 1:])
    add(p[:, 1:], p[:, :-1], -0.5 * fs[:, 1:])

    # v faces (i, j), j = 1..ny-1
    q = iv[:, 1:-1]
    fn = 0.5 * (wv[:, 1:-1] + wv[:, 2:]) / hy
    fs = 0.5 * (wv[:, :-2] + wv[:, 1:-1]) / hy
    add(q, q, 0.5 * (fn - fs))
    add(q, iv[:, 2:], 0.5 * fn)
    add(q, iv[:, :-2], -0.5 * fs)
    fe = 0.5 * (wu[1:, :-1] + wu[1:, 1:]) / hx   # shape (nx, ny-1)
    fw = 0.5 * (wu[:-1, :-1] + wu[:-1, 1:]) / hx
    add(q[:-1], q[:-1], 0.5 * fe[:-1])
    add(q[:-1], q[1:], 0.5 * fe[:-1])
    add(q[1:], q[1:], -0.5 * fw[1:])
    add(q[1:], q[:-1], -0.5 * fw[1:])

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = (rows >= 0) & (cols >= 0)
    n = g.n_interior_faces
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def advection_matrix(w: VectorField) -> sp.csr_matrix:
    """Skew-symmetric part of the convection matrix.

    ``<G z, z> = 0`` for every ``z`` regardless of ``div w``; for
    divergence-free ``w`` this equals the convection matrix itself.
    """
    N = convection_matrix(w)
    return ((N - N.T) * 0.5).tocsr()


def advect(w: VectorField, v: VectorField) -> VectorField:
    """Skew-symmetric discrete ``(w . grad) v`` on interior faces."""
    from .grid import _check_same_grid
    _check_same_grid(w, v)
    return VectorField.from_interior(w.grid, advection_matrix(w) @ v.interior())


# ---------------------------------------------------------------------------
# Parameters and state
# ---------------------------------------------------------------------------

BodyForce = Callable[[float], VectorField]


@dataclass(frozen=True)
class NSParams:
    nu: float
    dt: float
    body_force: VectorField | BodyForce | None = None
    advection: str = "frozen"
    inner_tolerance: float = 1e-10
    inner_max_iters: int = 50
    method: str = "newton"           # or "projected_gradient"

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.advection not in ADVECTION_MODES:
            raise ValueError(f"advection must be one of {ADVECTION_MODES}")
        if self.method not in ("newton", "projected_gradient"):
            raise ValueError(f"unknown inner method {self.method!r}")
        if not self.inner_tolerance > 0 or self.inner_max_iters < 1:
            raise ValueError("inner tolerance and iteration limit must be positive")

    def force_at(self, grid: StaggeredGrid, t: float) -> VectorField:
        g = self.body_force
        if g is None:
            return VectorField.zeros(grid)
        if isinstance(g, VectorField):
            return g
        return g(t)


@dataclass(frozen=True)
class StepReport:
    converged: bool
    inner_iterations: int
    residual: float
    multiplier_norm: float
    max_violation: float
    active_fraction: float
    picard_iterations: int = 0


@dataclass(frozen=True)
class StepArtifacts:
    """Intermediate fields of a step, kept for complementarity diagnostics."""
    v_pre: VectorField              # unconstrained solve with the same operator
    momentum_residual: np.ndarray   # M v+ - b + reaction, on interior faces
    multipliers: np.ndarray | None  # shape (k, n_constrained)
    cells: np.ndarray | None        # constrained cell indices
    dt: float = 1.0


@dataclass(frozen=True)
class NSState:
    v: VectorField
    t: float = 0.0
    last_multiplier_norm: float = 0.0
    step: int = 0
    report: StepReport | None = None
    artifacts: StepArtifacts | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.v.u)) or not np.all(np.isfinite(self.v.v)):
            raise ValueError("velocity must be finite")

    @property
    def flagged(self) -> bool:
        return self.report is not None and not self.report.converged


class NSStepFailure(RuntimeError):
    def __init__(self, message, trajectory=None, state=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.state = state


# ---------------------------------------------------------------------------
# Time step
# ---------------------------------------------------------------------------


class _Operators:
    """Grid-dependent matrices reused across steps."""

    _cache: dict = {}

    def __init__(self, grid):
        self.grid = grid
        self.A = (-laplacian_matrix(grid)).tocsr()
        self.C = curl_matrix(grid)
        self.I = sp.identity(grid.n_interior_faces, format="csr")
        self._blocks = {}

    @classmethod
    def get(cls, grid):
        ops = cls._cache.get(grid)
        if ops is None:
            if len(cls._cache) > 8:
                cls._cache.clear()
            ops = cls._cache[grid] = cls(grid)
        return ops

    def blocks(self, kind):
        if kind not in self._blocks:
            self._blocks[kind] = constraint_blocks(self.grid, kind)
        return self._blocks[kind]


def _system_matrix(ops, params, w):
    M = ops.I / params.dt + params.nu * ops.A
    if params.advection != "off" and w is not None:
        M = M + advection_matrix(w)
    return M.tocsr()


def _solve_newton(ops, M, b, kind, gamma, tol):
    solver = ConstrainedNewtonSolver(ops.C, ops.blocks(kind), M, tol=min(tol, 1e-10))
    sol = solver.solve(b, gamma.values.ravel())
    extra = (sol.reaction, sol.mu, sol.cells)
    return sol.x, sol.x_free, sol.report.converged, sol.report.iterations, max(
        sol.report.stationarity, sol.report.feasibility), extra


def _max_eigenvalue(A, iterations=200, seed=0):
    x = np.random.default_rng(seed).normal(size=A.shape[0])
    lam = 0.0
    for _ in range(iterations):
        y = A @ x
        lam_new = float(np.linalg.norm(y))
        x = y / lam_new
        if abs(lam_new - lam) <= 1e-8 * lam_new:
            break
        lam = lam_new
    return lam_new


def _solve_projected_gradient(ops, M, b, kind, gamma, x0, params):
    """Projected gradient ``x <- P_K(x - tau (M x - b))`` with a contraction step.

    ``M`` has symmetric part at least ``I/dt``; ``tau = alpha / L^2`` with
    ``alpha = 1/dt`` and ``L`` a norm bound makes the map a strict
    contraction, so the fixed point is the VI solution.
    """
    grid = ops.grid
    alpha = 1.0 / params.dt
    L = alpha + params.nu * _max_eigenvalue(ops.A)
    skew = M - (M + M.T) * 0.5
    if skew.nnz:
        L += _max_eigenvalue((skew.T @ skew).tocsr()) ** 0.5
    tau = alpha / L**2
    ctl = ProjectionControl(tolerance=1e-12, method="newton")
    x = x0.copy()
    x_free = spla.spsolve((ops.C.T @ M @ ops.C).tocsc(), ops.C.T @ b)
    x_free = ops.C @ x_free
    scale = max(1.0, float(np.abs(x).max()))
    res = np.inf
    for it in range(1, 100 * params.inner_max_iters + 1):
        y = x - tau * (M @ x - b)
        x_new = project_constraint_solenoidal(VectorField.from_interior(grid, y), kind, gamma,
                                              ctl).interior()
        res = float(np.abs(x_new - x).max()) / (tau * alpha) / scale
        x = x_new
        if res <= params.inner_tolerance:
            break
    # the reaction is whatever balances the momentum equation
    extra = (b - M @ x, None, None)
    return x, x_free, res <= params.inner_tolerance, it, res, extra


def vi_time_step(state: NSState, params: NSParams, kind, gamma: ObstacleField) -> NSState:
    """One backward-Euler step of the constrained momentum inequality.

    ``gamma`` is the obstacle at the new time level.  The returned state
    carries a :class:`StepReport`; on inner non-convergence it is flagged
    rather than raised.
    """
    kind = ConstraintKind.parse(kind)
    grid = state.v.grid
    if kind is ConstraintKind.GRADIENT_BOUND and (gamma.values <= 0).any():
        raise UnsupportedDegenerateK2("gradient bounds require a positive obstacle")
    ops = _Operators.get(grid)
    t_new = state.t + params.dt
    g = params.force_at(grid, t_new)
    b = state.v.interior() / params.dt + g.interior()

    def inner(w, x0):
        M = _system_matrix(ops, params, w)
        if params.method == "newton":
            out = _solve_newton(ops, M, b, kind, gamma, params.inner_tolerance)
        else:
            out = _solve_projected_gradient(ops, M, b, kind, gamma, x0, params)
        return out + (M,)

    x, x_free, ok, its, res, extra, M = inner(state.v, state.v.interior())
    picard = 0
    if params.advection == "full":
        for picard in range(1, params.inner_max_iters + 1):
            x_prev = x
            x, x_free, ok, n, res, extra, M = inner(VectorField.from_interior(grid, x), x)
            its += n
            change = float(np.abs(x - x_prev).max()) / max(1.0, float(np.abs(x).max()))
            if change <= params.inner_tolerance:
                break
        else:
            ok = False
            log.warning("Picard iteration for nonlinear advection did not converge")
    v_new = VectorField.from_interior(grid, x)
    v_pre = VectorField.from_interior(grid, x_free)
    mult = (v_pre - v_new).norm() / params.dt
    viol = violation_report(v_new, kind, gamma)
    report = StepReport(bool(ok), int(its), float(res), float(mult), viol.max_violation,
                        viol.active_fraction, picard)
    if not ok:
        log.warning("step %d: inner solve flagged (residual %.2e)", state.step + 1, res)
    reaction, mu, cells = extra
    artifacts = StepArtifacts(v_pre, M @ x - b + reaction, mu, cells, params.dt)
    return NSState(v_new, t_new, float(mult), state.step + 1, report, artifacts)


# ---------------------------------------------------------------------------
# Trajectories and energy bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    time: float
    kinetic_energy: float          # |v+|^2
    previous_energy: float         # |v^n|^2
    dissipation: float             # nu dt |grad v+|^2
    source_work: float             # dt <g, v+>
    force_norm_sq: float           # dt |g|^2
    max_violation: float
    active_fraction: float
    multiplier_norm: float
    inner_iterations: int

    @property
    def energy_residual(self) -> float:
        """``|v+|^2 - |v^n|^2 + 2 nu dt |grad v+|^2 - 2 dt <g, v+>`` (should be <= 0)."""
        return (self.kinetic_energy - self.previous_energy + 2.0 * self.dissipation
                - 2.0 * self.source_work)


@dataclass
class Trajectory:
    states: list = field(default_factory=list)     # snapshots (includes the initial state)
    records: list = field(default_factory=list)    # one StepRecord per step
    final: NSState | None = None
    nu: float = 0.0

    @property
    def v0(self) -> VectorField:
        return self.states[0].v


def step_record(prev: NSState, new: NSState, params: NSParams) -> StepRecord:
    grid = new.v.grid
    g = params.force_at(grid, new.t)
    rep = new.report
    return StepRecord(
        step=new.step, time=new.t,
        kinetic_energy=new.v.dot(new.v), previous_energy=prev.v.dot(prev.v),
        dissipation=params.nu * params.dt * dirichlet_energy(new.v),
        source_work=params.dt * g.dot(new.v),
        force_norm_sq=params.dt * g.dot(g),
        max_violation=rep.max_violation if rep else 0.0,
        active_fraction=rep.active_fraction if rep else 0.0,
        multiplier_norm=new.last_multiplier_norm,
        inner_iterations=rep.inner_iterations if rep else 0,
    )


def _gamma_at(gamma_of_t, t):
    return gamma_of_t(t) if callable(gamma_of_t) else gamma_of_t


def run_ns(v0: VectorField, params: NSParams, kind, gamma_of_t, t_end: float,
           snapshot_every: int = 1, callback=None) -> Trajectory:
    """Integrate from ``v0`` to ``t_end`` (the last step is shortened to land on it).

    ``gamma_of_t`` is an :class:`ObstacleField` or a callable of time.  A
    flagged step raises :class:`NSStepFailure` carrying the partial trajectory.
    """
    kind = ConstraintKind.parse(kind)
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    state = NSState(v0, 0.0)
    traj = Trajectory(states=[state], nu=params.nu)
    n_steps = int(np.ceil(t_end / params.dt - 1e-12))
    for n in range(n_steps):
        dt = min(params.dt, t_end - state.t)
        p = params if dt == params.dt else replace(params, dt=dt)
        new = vi_time_step(state, p, kind, _gamma_at(gamma_of_t, state.t + dt))
        traj.records.append(step_record(state, new, p))
        if new.flagged:
            traj.final = new
            raise NSStepFailure(f"step {new.step} failed to converge", traj, new)
        state = new
        if (snapshot_every and state.step % snapshot_every == 0) or n == n_steps - 1:
            traj.states.append(state)
        if callback is not None:
            callback(state, traj.records[-1])
    traj.final = state
    return traj


def poincare_constant(grid: StaggeredGrid, tol: float = 1e-12, max_iter: int = 500) -> float:
    """``C0 = 1/sqrt(lambda_min)`` of the Dirichlet vector Laplacian, by inverse iteration.

    Then ``|z| <= C0 |grad z|`` for every discrete no-slip field ``z``.
    """
    A = (-laplacian_matrix(grid)).tocsc()
    lu = spla.splu(A)
    x = np.random.default_rng(1).normal(size=A.shape[0])
    x /= np.linalg.norm(x)
    lam = np.inf
    for _ in range(max_iter):
        y = lu.solve(x)
        y /= np.linalg.norm(y)
        lam_new = float(y @ (A @ y))
        x = y
        if abs(lam_new - lam) <= tol * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return 1.0 / np.sqrt(lam)


@dataclass
class EnergyLedger:
    times: np.ndarray
    kinetic: np.ndarray             # |v^k|^2, k = 0..n
    dissipation: np.ndarray         # nu dt |grad v^k|^2, k = 1..n
    cumulative_dissipation: np.ndarray
    energy_residuals: np.ndarray    # per-step energy inequality residuals
    C0: float
    M0: float

    @property
    def sup_kinetic(self) -> float:
        return float(self.kinetic.max())

    @property
    def total_dissipation(self) -> float:
        return float(self.cumulative_dissipation[-1]) if self.cumulative_dissipation.size else 0.0

    @property
    def combined(self) -> np.ndarray:
        """``|v^k|^2 + nu sum_{j<=k} dt |grad v^j|^2`` for k = 0..n."""
        return self.kinetic + np.concatenate([[0.0], self.cumulative_dissipation])

    def within_bound(self, rtol: float = 1e-9) -> bool:
        return bool(self.combined.max() <= self.M0 * (1 + rtol) + rtol)


def energy_report(traj: Trajectory, C0: float | None = None) -> EnergyLedger:
    """Energy and dissipation ledger with the a-priori bound
    ``M0 = |v0|^2 + (C0^2 / nu) sum dt |g|^2``.
    """
    if not traj.states:
        raise ValueError("empty trajectory")
    v0 = traj.v0
    grid = v0.grid
    if C0 is None:
        C0 = poincare_constant(grid)
    recs = getattr(traj, "flow_records", traj.records)
    kinetic = np.array([v0.dot(v0)] + [r.kinetic_energy for r in recs])
    diss = np.array([r.dissipation for r in recs])
    force = sum(r.force_norm_sq for r in recs)
    M0 = float(kinetic[0] + C0**2 / traj.nu * force) if traj.nu else float(kinetic[0])
    return EnergyLedger(
        times=np.array([0.0] + [r.time for r in recs]),
        kinetic=kinetic,
        dissipation=diss,
        cumulative_dissipation=np.cumsum(diss),
        energy_residuals=np.array([r.energy_residual for r in recs]),
        C0=float(C0),
        M0=M0,
    )
