"""Phase-dependent velocity constraints: the enthalpy field sets the obstacle.

A coupled step advances the enthalpy with the current velocity, mollifies
it, maps the smoothed phase to an obstacle through a :class:`GammaProfile`,
and then takes a constrained momentum step under that obstacle.  Optional
inner Picard sweeps repeat the pair with a relaxed convecting velocity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .constraints import (ConstraintKind, RegularizationParams, constrained_quantity,
                          violation_report)
from .grid import ObstacleField, ScalarField, VectorField
from .navier_stokes import (NSParams, NSState, NSStepFailure, StepRecord, step_record,
                            vi_time_step)
from .stefan import (BetaSpec, EnthalpyState, StefanParams, StefanStepFailure,
                     stefan_step)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Mollifier
# ---------------------------------------------------------------------------


class MollifierResolutionError(ValueError):
    pass


def bump(s):
    """``exp(-1 / (1 - s^2))`` for ``|s| < 1``, zero outside."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True)
class MollifierSpec:
    epsilon0: float
    kernel: str = "bump"

    def __post_init__(self):
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")
        if self.kernel != "bump":
            raise ValueError(f"unknown kernel {self.kernel!r}")

    @classmethod
    def cells(cls, grid, n_cells: float = 4.0) -> "MollifierSpec":
        return cls(n_cells * max(grid.hx, grid.hy))

    def weights(self, grid) -> np.ndarray:
        """Discrete kernel on the cell lattice, normalised to unit sum."""
        if self.epsilon0 < 2 * max(grid.hx, grid.hy):
            raise MollifierResolutionError(
                f"epsilon0 = {self.epsilon0:g} resolves fewer than 2 cells; use "
                f"epsilon0 >= {2 * max(grid.hx, grid.hy):g} or refine the grid")
        mx = int(np.ceil(self.epsilon0 / grid.hx))
        my = int(np.ceil(self.epsilon0 / grid.hy))
        dx = np.arange(-mx, mx + 1) * grid.hx
        dy = np.arange(-my, my + 1) * grid.hy
        r = np.hypot(dx[:, None], dy[None, :]) / self.epsilon0
        k = bump(r)
        return k / k.sum()


def mollify(w: ScalarField, spec: MollifierSpec) -> ScalarField:
    """Average ``w`` against the kernel over the domain only (zero extension).

    Cells closer than ``epsilon0`` to the boundary lose the kernel mass that
    falls outside; no renormalisation is applied.
    """
    k = spec.weights(w.grid)
    out = ndimage.correlate(w.values, k, mode="constant", cval=0.0)
    return ScalarField(w.grid, out)


# ---------------------------------------------------------------------------
# Obstacle profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaProfile:
    """``gamma(r) = floor + c r / (1 - r)`` on ``(0, 1)``, ``inf`` for ``r >= 1``.

    The degenerate regime has ``floor = 0`` and ``gamma = 0`` for ``r <= 0``;
    the non-degenerate one has ``floor = c_star > 0`` and ``gamma = c_star``
    for ``r <= 0``.
    """
    regime: str = "degenerate"
    c: float = 1.0
    c_star: float = 0.0

    def __post_init__(self):
        if self.regime not in ("degenerate", "nondegenerate"):
            raise ValueError("regime must be 'degenerate' or 'nondegenerate'")
        if not self.c > 0:
            raise ValueError("profile scale c must be positive")
        if self.regime == "nondegenerate" and not self.c_star > 0:
            raise ValueError("non-degenerate profile needs c_star > 0")
        if self.regime == "degenerate" and self.c_star != 0:
            raise ValueError("degenerate profile has no floor")

    @property
    def degenerate(self) -> bool:
        return self.regime == "degenerate"

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        floor = 0.0 if self.degenerate else self.c_star
        with np.errstate(divide="ignore", invalid="ignore"):
            mid = floor + self.c * r / (1.0 - r)
        out = np.where(r <= 0, floor, np.where(r >= 1, np.inf, mid))
        return out if out.ndim else float(out)

    def inverse(self, gamma):
        """Phase value with ``gamma(r) = gamma`` for gamma above the floor."""
        floor = 0.0 if self.degenerate else self.c_star
        s = (np.asarray(gamma, dtype=float) - floor) / self.c
        return s / (1.0 + s)


def gamma_of_phase(wmoll: ScalarField, profile: GammaProfile) -> ObstacleField:
    return ObstacleField(wmoll.grid, profile(wmoll.values))


def effective_gamma(gamma: ObstacleField, profile: GammaProfile,
                    reg: RegularizationParams) -> ObstacleField:
    """Obstacle passed to the momentum step: capped at ``N`` always, floored
    at ``delta`` only for non-degenerate profiles."""
    vals = np.minimum(gamma.values, reg.cap_N)
    if not profile.degenerate:
        vals = np.maximum(vals, reg.delta)
    return ObstacleField(gamma.grid, vals)


# ---------------------------------------------------------------------------
# Coupled stepping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingControl:
    inner_picard_iters: int = 1
    picard_tolerance: float = 1e-8
    relaxation: float = 1.0

    def __post_init__(self):
        if self.inner_picard_iters < 1:
            raise ValueError("inner_picard_iters must be >= 1")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")
        if not self.picard_tolerance > 0:
            raise ValueError("picard_tolerance must be positive")


@dataclass(frozen=True)
class CouplingSetup:
    """Everything a coupled step needs besides the state."""
    ns: NSParams
    stefan: StefanParams
    beta: BetaSpec
    profile: GammaProfile
    kind: ConstraintKind
    mollifier: MollifierSpec
    regularization: RegularizationParams
    control: CouplingControl = CouplingControl()

    def __post_init__(self):
        object.__setattr__(self, "kind", ConstraintKind.parse(self.kind))
        if self.profile.degenerate and self.kind is ConstraintKind.GRADIENT_BOUND:
            raise ValueError("degenerate profiles are only supported with velocity bounds")
        if abs(self.ns.dt - self.stefan.dt) > 1e-12 * self.ns.dt:
            raise ValueError("flow and enthalpy time steps must agree")

    def obstacle(self, w: ScalarField):
        """Raw obstacle ``gamma(w^eps)`` and the regularised one used by the solver."""
        raw = gamma_of_phase(mollify(w, self.mollifier), self.profile)
        return raw, effective_gamma(raw, self.profile, self.regularization)


@dataclass(frozen=True)
class CoupledState:
    w: ScalarField
    v: VectorField
    t: float = 0.0
    step: int = 0
    gamma: ObstacleField | None = None      # raw gamma(w^eps) at this time
    gamma_used: ObstacleField | None = None
    multiplier_norm: float = 0.0
    picard_residuals: tuple = ()
    picard_converged: bool = True
    ns_state: NSState | None = None


class CouplingPreconditionError(ValueError):
    pass


class CoupledStepFailure(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


def coupled_step(state: CoupledState, setup: CouplingSetup) -> CoupledState:
    """One staggered step: enthalpy with the convecting velocity, obstacle update,
    constrained momentum step; repeated with relaxation for inner Picard sweeps.

    The residual of sweep ``k`` is the L2 distance between the velocities of
    sweeps ``k`` and ``k - 1`` (sweep 0 is the incoming velocity).
    """
    ctl = setup.control
    ns_prev = NSState(state.v, state.t, state.multiplier_norm, state.step)
    e_prev = EnthalpyState(state.w, state.t, state.step)
    v_conv = state.v
    v_last = state.v
    residuals = []
    converged = False
    result = None
    for _ in range(ctl.inner_picard_iters):
        e_new = stefan_step(e_prev, v_conv, setup.stefan, setup.beta)
        raw, used = setup.obstacle(e_new.w)
        ns_new = vi_time_step(ns_prev, setup.ns, setup.kind, used)
        if ns_new.flagged:
            raise NSStepFailure(f"momentum step {ns_new.step} failed", state=ns_new)
        residuals.append((ns_new.v - v_last).norm())
        v_last = ns_new.v
        result = (e_new, raw, used, ns_new)
        if ctl.inner_picard_iters > 1 and residuals[-1] <= ctl.picard_tolerance:
            converged = True
            break
        v_conv = ns_new.v * ctl.relaxation + v_conv * (1.0 - ctl.relaxation)
    if ctl.inner_picard_iters == 1:
        converged = True
    elif not converged:
        log.info("inner Picard stopped after %d sweeps (residual %.2e)",
                 ctl.inner_picard_iters, residuals[-1])
    e_new, raw, used, ns_new = result
    return CoupledState(e_new.w, ns_new.v, e_new.t, state.step + 1, raw, used,
                        ns_new.last_multiplier_norm, tuple(residuals), converged, ns_new)


@dataclass
class CoupledRecord:
    flow: StepRecord
    w_linf: float
    linf_bound: float
    max_violation: float          # against the raw obstacle (inf cells unconstrained)
    low_gamma_speed: float        # max speed where raw gamma <= 0.01 (0 if none)
    picard_residuals: tuple
    picard_converged: bool

    @property
    def time(self):
        return self.flow.time


@dataclass
class CoupledTrajectory:
    states: list = field(default_factory=list)
    records: list = field(default_factory=list)
    setup: CouplingSetup | None = None
    R1: float = 0.0
    final: CoupledState | None = None

    @property
    def nu(self):
        return self.setup.ns.nu

    @property
    def v0(self) -> VectorField:
        return self.states[0].v

    @property
    def flow_records(self) -> list:
        return [r.flow for r in self.records]


def check_preconditions(w0: ScalarField, v0: VectorField, setup: CouplingSetup,
                        tol: float = 1e-8) -> tuple[ObstacleField, ObstacleField]:
    """Data hygiene before a coupled run; raises :class:`CouplingPreconditionError`."""
    problems = []
    if not np.all(np.isfinite(w0.values)):
        problems.append("initial enthalpy must be finite")
    raw, used = setup.obstacle(w0)
    speed = constrained_quantity(v0, setup.kind)
    excess = np.where(np.isfinite(used.values), speed - used.values, -np.inf)
    if excess.max() > tol:
        problems.append(f"initial velocity violates the obstacle by {excess.max():.3e}")
    if setup.profile.degenerate and np.any((raw.values <= 0) & (speed > tol)):
        problems.append("initial velocity must vanish where the obstacle is zero")
    if problems:
        raise CouplingPreconditionError("; ".join(problems))
    return raw, used


def _record(prev: CoupledState, new: CoupledState, setup: CouplingSetup, R1: float):
    flow = step_record(NSState(prev.v, prev.t), new.ns_state, setup.ns)
    speed = constrained_quantity(new.v, setup.kind)
    low = new.gamma.values <= 0.01
    return CoupledRecord(
        flow=flow,
        w_linf=float(np.abs(new.w.values).max()),
        linf_bound=R1 * (1.0 + new.t),
        max_violation=violation_report(new.v, setup.kind, new.gamma).max_violation,
        low_gamma_speed=float(speed[low].max()) if low.any() else 0.0,
        picard_residuals=new.picard_residuals,
        picard_converged=new.picard_converged,
    )


def source_linf(setup: CouplingSetup, grid, t_end: float) -> float:
    h = setup.stefan.source
    if h is None:
        return 0.0
    if isinstance(h, ScalarField):
        return float(np.abs(h.values).max())
    ts = np.arange(1, int(np.ceil(t_end / setup.stefan.dt - 1e-12)) + 1) * setup.stefan.dt
    return max((float(np.abs(h(t).values).max()) for t in ts), default=0.0)


def run_coupled(w0: ScalarField, v0: VectorField, setup: CouplingSetup, t_end: float,
                snapshot_every: int = 1, callback=None) -> CoupledTrajectory:
    """March the coupled system to ``t_end`` with per-step diagnostics.

    ``R1`` for the sup-norm envelope is ``max(|w0|_inf, sup |h|_inf)``.
    """
    raw, used = check_preconditions(w0, v0, setup)
    R1 = max(float(np.abs(w0.values).max()), source_linf(setup, w0.grid, t_end))
    state = CoupledState(w0, v0, 0.0, 0, raw, used)
    traj = CoupledTrajectory(states=[state], setup=setup, R1=R1)
    dt = setup.ns.dt
    n_steps = int(np.ceil(t_end / dt - 1e-12))
    for n in range(n_steps):
        step_dt = min(dt, t_end - state.t)
        s = setup
        if step_dt != dt:
            s = replace(setup, ns=replace(setup.ns, dt=step_dt),
                        stefan=replace(setup.stefan, dt=step_dt))
        try:
            new = coupled_step(state, s)
        except (NSStepFailure, StefanStepFailure) as exc:
            traj.final = state
            raise CoupledStepFailure(f"coupled step {state.step + 1} failed: {exc}", traj) from exc
        traj.records.append(_record(state, new, s, R1))
        state = new
        if (snapshot_every and state.step % snapshot_every == 0) or n == n_steps - 1:
            traj.states.append(state)
        if callback is not None:
            callback(state, traj.records[-1])
    traj.final = state
    return traj
