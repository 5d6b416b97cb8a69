"""Enthalpy formulation of the Stefan problem with convection.

The unknown is the enthalpy ``w`` at cell centres; temperature is
``beta(w)``, flat on the mushy interval ``[0, 1]``.  One implicit step solves

    (w - w^n)/dt + L beta_delta(w) + U(v) w = h

where ``L`` is the negative Laplacian closed by the Robin condition
``d beta/dn + n0 beta = 0`` and ``U(v)`` is first-order upwind transport in
flux form.  The Jacobian ``I/dt + L diag(beta') + U`` is an M-matrix, which
gives the discrete comparison principle and the sup-norm bound.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import ScalarField, StaggeredGrid, VectorField

log = logging.getLogger(__name__)

SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class BetaSpec:
    """``beta(r) = a r`` for ``r < 0``, ``0`` on ``[0, 1]``, ``b (r - 1)`` for ``r > 1``.

    ``delta`` adds ``delta * r`` (the strictly monotone regularisation).
    """
    slope_neg: float = 1.0
    slope_pos: float = 1.0
    delta: float = 1e-6

    def __post_init__(self):
        if not (self.slope_neg > 0 and self.slope_pos > 0):
            raise ValueError("beta slopes must be positive")
        if not self.delta >= 0:
            raise ValueError("delta must be non-negative")

    @property
    def lipschitz(self) -> float:
        return max(self.slope_neg, self.slope_pos) + self.delta


def beta_eval(spec: BetaSpec, r, regularized: bool = True):
    r = np.asarray(r, dtype=float)
    out = np.where(r < 0, spec.slope_neg * r, np.where(r > 1, spec.slope_pos * (r - 1), 0.0))
    if regularized:
        out = out + spec.delta * r
    return out if out.ndim else float(out)


def beta_prime(spec: BetaSpec, r, regularized: bool = True):
    """Slope of the piece containing ``r`` (the plateau slope at the kinks)."""
    r = np.asarray(r, dtype=float)
    out = np.where(r < 0, spec.slope_neg, np.where(r > 1, spec.slope_pos, 0.0))
    if regularized:
        out = out + spec.delta
    return out if out.ndim else float(out)


def beta_hat(spec: BetaSpec, r, regularized: bool = True):
    """Primitive ``int_0^r beta``: convex, non-negative, zero on ``[0, 1]`` when ``delta = 0``."""
    r = np.asarray(r, dtype=float)
    out = np.where(r < 0, 0.5 * spec.slope_neg * r**2,
                   np.where(r > 1, 0.5 * spec.slope_pos * (r - 1) ** 2, 0.0))
    if regularized:
        out = out + 0.5 * spec.delta * r**2
    return out if out.ndim else float(out)


Source = Callable[[float], ScalarField]


@dataclass(frozen=True)
class StefanParams:
    n0: float
    dt: float
    source: ScalarField | Source | None = None
    newton_tolerance: float = 1e-12
    newton_max_iters: int = 50
    insulated_sides: tuple = ()
    neumann_test_mode: bool = False     # all sides insulated; total enthalpy is conserved

    def __post_init__(self):
        bad = set(self.insulated_sides) - set(SIDES)
        if bad:
            raise ValueError(f"unknown sides {sorted(bad)}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.newton_tolerance > 0 or self.newton_max_iters < 1:
            raise ValueError("Newton tolerance and iteration limit must be positive")
        if self.robin_sides and not self.n0 > 0:
            raise ValueError("n0 must be positive")

    @property
    def robin_sides(self) -> tuple:
        if self.neumann_test_mode:
            return ()
        return tuple(s for s in SIDES if s not in self.insulated_sides)

    def source_at(self, grid: StaggeredGrid, t: float) -> ScalarField:
        h = self.source
        if h is None:
            return ScalarField.zeros(grid)
        if isinstance(h, ScalarField):
            return h
        return h(t)


@dataclass(frozen=True)
class StefanStepReport:
    converged: bool
    newton_iterations: int
    relaxation_iterations: int
    residual: float


@dataclass(frozen=True)
class EnthalpyState:
    w: ScalarField
    t: float = 0.0
    step: int = 0
    report: StefanStepReport | None = None


class StefanStepFailure(RuntimeError):
    def __init__(self, message, state=None, residual=None, trajectory=None):
        super().__init__(message)
        self.state = state
        self.residual = residual
        self.trajectory = trajectory


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------


def robin_laplacian(grid: StaggeredGrid, n0: float, robin_sides=SIDES) -> sp.csr_matrix:
    """Negative 5-point Laplacian with a two-point Robin closure.

    The boundary value solves ``(b_wall - b_c)/(h/2) + n0 b_wall = 0``, which
    adds ``kappa = n0 / (1 + n0 h / 2) / h`` to the diagonal of each boundary
    cell on a Robin side.  Insulated sides add nothing.
    """
    nx, ny, hx, hy = grid.nx, grid.ny, grid.hx, grid.hy

    def lap1d(m, h):
        e = np.ones(m)
        T = sp.diags([-e[:-1], 2 * e, -e[:-1]], [-1, 0, 1]).tolil()
        T[0, 0] = T[-1, -1] = 1.0
        return T.tocsr() / h**2

    L = sp.kron(lap1d(nx, hx), sp.identity(ny)) + sp.kron(sp.identity(nx), lap1d(ny, hy))
    extra = np.zeros((nx, ny))
    kx = n0 / (1 + 0.5 * n0 * hx) / hx
    ky = n0 / (1 + 0.5 * n0 * hy) / hy
    if "left" in robin_sides:
        extra[0, :] += kx
    if "right" in robin_sides:
        extra[-1, :] += kx
    if "bottom" in robin_sides:
        extra[:, 0] += ky
    if "top" in robin_sides:
        extra[:, -1] += ky
    return (L + sp.diags(extra.ravel())).tocsr()


def upwind_matrix(v: VectorField) -> sp.csr_matrix:
    """First-order upwind ``div(w v)`` using interior-face velocities.

    Off-diagonals are non-positive and column sums vanish, so ``I/dt + U`` is
    an M-matrix for any velocity.
    """
    g = v.grid
    nx, ny = g.nx, g.ny
    cell = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, vals = [], [], []

    def faces(vel, left, right, h):
        vel, left, right = vel.ravel(), left.ravel(), right.ravel()
        pos = np.maximum(vel, 0.0) / h
        neg = np.minimum(vel, 0.0) / h
        # outflow to the right: w_left leaves left cell, enters right cell
        rows.extend([left, right, left, right])
        cols.extend([left, left, right, right])
        vals.extend([pos, -pos, neg, -neg])

    faces(v.u[1:-1, :], cell[:-1, :], cell[1:, :], g.hx)
    faces(v.v[:, 1:-1], cell[:, :-1], cell[:, 1:], g.hy)
    n = nx * ny
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


class StefanOperators:
    def __init__(self, grid: StaggeredGrid, params: StefanParams):
        self.grid = grid
        self.L = robin_laplacian(grid, params.n0, params.robin_sides)
        self.I = sp.identity(grid.n_cells, format="csr")


_OPS_CACHE: dict = {}


def _operators(grid, params):
    key = (grid, params.n0, params.robin_sides)
    ops = _OPS_CACHE.get(key)
    if ops is None:
        if len(_OPS_CACHE) > 16:
            _OPS_CACHE.clear()
        ops = _OPS_CACHE[key] = StefanOperators(grid, params)
    return ops


def stefan_residual(w, w_old, U, ops, params, spec, h):
    return (w - w_old) / params.dt + ops.L @ beta_eval(spec, w) + U @ w - h


def _clip_at_kinks(w, w_new, eps=1e-12):
    """Limit ``w -> w_new`` so no cell passes more than one kink of beta."""
    out = w_new.copy()
    for k in (0.0, 1.0):
        up = (w < k) & (w_new > k)
        down = (w > k) & (w_new < k)
        out[up] = np.minimum(out[up], k + eps)
        out[down] = np.maximum(out[down], k - eps)
    return out


def stefan_step(state: EnthalpyState, v: VectorField | None, params: StefanParams,
                spec: BetaSpec) -> EnthalpyState:
    """One implicit enthalpy step with velocity ``v`` (``None`` means at rest).

    Semismooth Newton with a residual line search; if it stalls, a
    relaxation iteration with the constant matrix ``I/dt + L_beta L + U``
    takes over.  Raises :class:`StefanStepFailure` if both fail.
    """
    grid = state.w.grid
    ops = _operators(grid, params)
    U = upwind_matrix(v) if v is not None else sp.csr_matrix((grid.n_cells, grid.n_cells))
    t_new = state.t + params.dt
    h = params.source_at(grid, t_new).values.ravel()
    w_old = state.w.values.ravel()
    base = ops.I / params.dt + U

    def resid(w):
        return stefan_residual(w, w_old, U, ops, params, spec, h)

    def small(R, w):
        return np.abs(R).max() * params.dt <= params.newton_tolerance * max(1.0, np.abs(w).max())

    w = w_old.copy()
    R = resid(w)
    its = 0
    converged = small(R, w)
    while not converged and its < params.newton_max_iters:
        its += 1
        J = (base + ops.L @ sp.diags(beta_prime(spec, w))).tocsc()
        dw = spla.spsolve(J, -R)
        rn = np.linalg.norm(R)
        # a Newton step on a piecewise-linear beta that jumps over a kink
        # tends to cycle; stop each crossing cell just past its first kink
        w_t = _clip_at_kinks(w, w + dw)
        R_t = resid(w_t)
        step = 1.0
        while np.linalg.norm(R_t) >= rn and step > 1e-6:
            step *= 0.5
            w_t = _clip_at_kinks(w, w + step * dw)
            R_t = resid(w_t)
        w, R = w_t, R_t
        converged = small(R, w)
    relax = 0
    if not converged:
        log.info("Newton stalled at step %d; switching to relaxation", state.step + 1)
        lu = spla.splu((base + spec.lipschitz * ops.L).tocsc())
        for relax in range(1, 20 * params.newton_max_iters + 1):
            w = w - lu.solve(R)
            R = resid(w)
            if small(R, w):
                converged = True
                break
    res = float(np.abs(R).max() * params.dt)
    report = StefanStepReport(converged, its, relax, res)
    new = EnthalpyState(ScalarField(grid, w.reshape(grid.shape)), t_new, state.step + 1, report)
    if not converged:
        raise StefanStepFailure(f"enthalpy step {state.step + 1} did not converge "
                                f"(residual {res:.2e})", new, res)
    return new


# ---------------------------------------------------------------------------
# Trajectories and estimates
# ---------------------------------------------------------------------------


@dataclass
class StefanRecord:
    step: int
    time: float
    w_linf: float
    l2_sq: float            # |w|^2
    v_seminorm_sq: float    # <L w, w>
    beta_hat_int: float     # int beta_hat_delta(w)
    beta_seminorm_sq: float  # <L b, b>, b = beta_delta(w)
    source_sq: float        # dt |h|^2
    source_linf: float
    total_enthalpy: float


@dataclass
class StefanTrajectory:
    states: list = field(default_factory=list)
    records: list = field(default_factory=list)
    params: StefanParams | None = None
    spec: BetaSpec | None = None


def _record(state, params, spec, ops, h=None):
    grid = state.w.grid
    a = grid.cell_area
    w = state.w.values.ravel()
    b = beta_eval(spec, w)
    hv = np.zeros_like(w) if h is None else h.values.ravel()
    return StefanRecord(
        step=state.step, time=state.t,
        w_linf=float(np.abs(w).max()),
        l2_sq=a * float(w @ w),
        v_seminorm_sq=a * float(w @ (ops.L @ w)),
        beta_hat_int=a * float(beta_hat(spec, w).sum()),
        beta_seminorm_sq=a * float(b @ (ops.L @ b)),
        source_sq=(params.dt * a * float(hv @ hv)) if h is not None else 0.0,
        source_linf=float(np.abs(hv).max()),
        total_enthalpy=a * float(w.sum()),
    )


def _velocity_at(v_traj, t):
    if v_traj is None or isinstance(v_traj, VectorField):
        return v_traj
    return v_traj(t)


def run_stefan(w0: ScalarField, v_traj, params: StefanParams, spec: BetaSpec,
               t_end: float, snapshot_every: int = 1) -> StefanTrajectory:
    """March to ``t_end``.  ``v_traj`` is ``None``, a field, or a callable of time
    (evaluated at the start of each step)."""
    ops = _operators(w0.grid, params)
    state = EnthalpyState(w0, 0.0)
    traj = StefanTrajectory(states=[state], params=params, spec=spec)
    traj.records.append(_record(state, params, spec, ops))
    n_steps = int(np.ceil(t_end / params.dt - 1e-12))
    for n in range(n_steps):
        dt = min(params.dt, t_end - state.t)
        p = params if dt == params.dt else replace(params, dt=dt)
        try:
            state = stefan_step(state, _velocity_at(v_traj, state.t), p, spec)
        except StefanStepFailure as exc:
            exc.trajectory = traj
            raise
        traj.records.append(_record(state, p, spec, ops, p.source_at(w0.grid, state.t)))
        if (snapshot_every and state.step % snapshot_every == 0) or n == n_steps - 1:
            traj.states.append(state)
    return traj


def robin_poincare_constant(grid: StaggeredGrid, params: StefanParams) -> float:
    """``C2`` with ``|z| <= C2 |z|_V`` where ``|z|_V^2 = <L z, z>`` (Robin form)."""
    if not params.robin_sides:
        raise ValueError("the pure Neumann form has no Poincare constant")
    L = robin_laplacian(grid, params.n0, params.robin_sides).tocsc()
    lam = spla.eigsh(L, k=1, sigma=0, which="LM", return_eigenvectors=False)[0]
    return float(1.0 / np.sqrt(lam))


@dataclass
class StefanLedger:
    times: np.ndarray
    w_linf: np.ndarray
    R1: float
    C2: float
    delta: float
    l2_lhs: np.ndarray        # |w^k|^2 + delta sum dt |w|_V^2
    l2_rhs: float             # |w0|^2 + C2^2/delta sum dt |h|^2
    beta_lhs: np.ndarray      # int beta_hat_delta(w^k) + 1/2 sum dt |beta_delta(w)|_V^2
    beta_rhs: float           # int beta_hat(w0) + |w0|^2 + C2^2/2 sum dt |h|^2

    def linf_envelope(self) -> np.ndarray:
        return self.R1 * (1.0 + self.times)

    def linf_ok(self, tol=1e-10) -> bool:
        return bool(np.all(self.w_linf <= self.linf_envelope() + tol))

    def l2_ok(self, rtol=1e-9) -> bool:
        return bool(self.l2_lhs.max() <= self.l2_rhs * (1 + rtol) + rtol)

    def beta_ok(self, rtol=1e-9) -> bool:
        return bool(self.beta_lhs.max() <= self.beta_rhs * (1 + rtol) + rtol)


def stefan_energy_report(traj: StefanTrajectory, R1: float | None = None) -> StefanLedger:
    """Discrete sup-norm, L2 and beta-energy estimates of a trajectory.

    ``R1`` defaults to ``max(|w0|_inf, sup |h|_inf)``.
    """
    recs = traj.records
    params, spec = traj.params, traj.spec
    grid = traj.states[0].w.grid
    if R1 is None:
        R1 = max(recs[0].w_linf, max((r.source_linf for r in recs), default=0.0))
    C2 = robin_poincare_constant(grid, params) if params.robin_sides else np.inf
    dt = np.diff([r.time for r in recs])
    vs = np.array([r.v_seminorm_sq for r in recs[1:]])
    bs = np.array([r.beta_seminorm_sq for r in recs[1:]])
    force = sum(r.source_sq for r in recs[1:])
    l2 = np.array([r.l2_sq for r in recs])
    d = spec.delta
    l2_lhs = l2 + d * np.concatenate([[0.0], np.cumsum(dt * vs)])
    w0 = traj.states[0].w.values
    bh0 = grid.cell_area * float(beta_hat(spec, w0, regularized=False).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        l2_rhs = l2[0] + (C2**2 / d * force if force > 0 else 0.0)
    beta_lhs = np.array([r.beta_hat_int for r in recs]) + 0.5 * np.concatenate(
        [[0.0], np.cumsum(dt * bs)])
    beta_rhs = bh0 + l2[0] + (0.5 * C2**2 * force if force > 0 else 0.0)
    return StefanLedger(np.array([r.time for r in recs]), np.array([r.w_linf for r in recs]),
                        float(R1), float(C2), d, l2_lhs, float(l2_rhs), beta_lhs, float(beta_rhs))
