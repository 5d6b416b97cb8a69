"""Run diagnostics: a per-step ledger, bounded-variation pairings and
complementarity reports for constrained momentum steps.

The ledger is filled from run callbacks, one row per time step, so its
content does not depend on how often snapshots are stored.
"""
from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constraints import ConstraintKind, constraint_blocks, constrained_quantity
from .grid import (GridMismatchError, ObstacleField, StaggeredGrid, VectorField,
                   _check_same_grid, curl_matrix)
from .solenoidal import leray_project

BASE_COLUMNS = (
    "step", "time", "kinetic_energy", "dissipation_increment", "cumulative_dissipation",
    "source_work", "energy_residual", "max_violation", "active_fraction",
    "picard_residual", "w_linf", "linf_bound",
)


# ---------------------------------------------------------------------------
# Test functions for the bounded-variation pairing
# ---------------------------------------------------------------------------

TestFunction = Callable[[float], VectorField]


def constant_field(grid: StaggeredGrid, ex: float = 1.0, ey: float = 0.0) -> VectorField:
    """Constant vector ``(ex, ey)`` on interior faces, zero normal flux on walls."""
    return VectorField.from_functions(grid, lambda x, y: ex + 0 * x, lambda x, y: ey + 0 * x)


def solenoidal_mode(grid: StaggeredGrid, kx: int = 1, ky: int = 1) -> VectorField:
    """Discrete curl of ``sin(kx pi x / lx) sin(ky pi y / ly)`` sampled at nodes.

    Exactly divergence free on the grid and vanishing normal flux on walls.
    """
    lx, ly = grid.lengths
    xn = np.arange(1, grid.nx) * grid.hx
    yn = np.arange(1, grid.ny) * grid.hy
    X, Y = np.meshgrid(xn, yn, indexing="ij")
    psi = np.sin(kx * np.pi * X / lx) * np.sin(ky * np.pi * Y / ly)
    return VectorField.from_interior(grid, curl_matrix(grid) @ psi.ravel())


def time_modulated(xi: VectorField, omega: float = 2 * np.pi) -> TestFunction:
    """``t -> cos(omega t) xi``: smooth in time with bounded derivative."""
    return lambda t: xi * math.cos(omega * t)


def default_test_functions(grid: StaggeredGrid) -> dict[str, TestFunction]:
    """The built-in library; keys become ``bv_<name>`` ledger columns."""
    ex = constant_field(grid, 1.0, 0.0)
    ey = constant_field(grid, 0.0, 1.0)
    m11 = solenoidal_mode(grid, 1, 1)
    m21 = solenoidal_mode(grid, 2, 1)
    return {
        "const_x": lambda t: ex,
        "const_y": lambda t: ey,
        "mode_1_1": lambda t: m11,
        "mode_2_1": lambda t: m21,
        "mode_1_1_mod": time_modulated(m11),
    }


def bv_pairing(velocities: Sequence[VectorField], xi) -> float:
    """Discrete total variation of ``t -> (v(t), xi(t))`` over the samples.

    ``xi`` is either a sequence of fields sampled at the same times as
    ``velocities`` or a single field held fixed in time.
    """
    velocities = list(velocities)
    if isinstance(xi, VectorField):
        xi = [xi] * len(velocities)
    xi = list(xi)
    if len(xi) != len(velocities):
        raise ValueError("test function must be sampled at the same times as the trajectory")
    vals = []
    for v, z in zip(velocities, xi):
        _check_same_grid(v, z)
        p = v.dot(z)
        if not np.isfinite(p):
            raise ValueError("pairing is not finite; the test function must be smooth in time")
        vals.append(p)
    return float(np.abs(np.diff(vals)).sum()) if len(vals) > 1 else 0.0


def var_budget(M0: float, kappa: float, u0_norm: float) -> float:
    """Closed-form variation budget ``M0 + M0/kappa + |u0|^2 / (2 kappa)``.

    Reported next to measured pairings as a ratio; the continuum bound is on
    a dual-norm variation, so it is never asserted against sampled data.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if M0 < 0:
        raise ValueError("M0 must be non-negative")
    return M0 + M0 / kappa + u0_norm**2 / (2.0 * kappa)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerRow:
    step: int
    time: float
    kinetic_energy: float = 0.0
    dissipation_increment: float = 0.0
    cumulative_dissipation: float = 0.0
    source_work: float = 0.0
    energy_residual: float = 0.0
    max_violation: float = 0.0
    active_fraction: float = 0.0
    picard_residual: float = math.nan
    w_linf: float = math.nan
    linf_bound: float = math.nan
    bv: dict = field(default_factory=dict)   # name -> pairing increment

    def as_list(self, bv_names) -> list:
        return [getattr(self, c) for c in BASE_COLUMNS] + [self.bv.get(n, math.nan)
                                                           for n in bv_names]


class DiagnosticLedger:
    """Append-only per-step record with strictly increasing times.

    Use :meth:`start` with the initial velocity, then :meth:`record_flow`,
    :meth:`record_stefan` or :meth:`record_coupled` from a run callback.
    Readers can call :meth:`snapshot` while a run is appending.
    """

    def __init__(self, test_functions: dict[str, TestFunction] | None = None):
        self.test_functions = dict(test_functions or {})
        self._rows: list[LedgerRow] = []
        self._lock = threading.Lock()
        self._pairings: dict[str, float] = {}
        self._t0: float | None = None
        self._cum = 0.0

    @property
    def bv_names(self) -> list[str]:
        return sorted(self.test_functions)

    @property
    def header(self) -> list[str]:
        return list(BASE_COLUMNS) + [f"bv_{n}" for n in self.bv_names]

    def start(self, v0: VectorField | None, t0: float = 0.0):
        if self._rows:
            raise RuntimeError("ledger already has rows")
        self._t0 = t0
        self._pairings = self._pair(v0, t0)

    def _pair(self, v, t):
        if v is None:
            return {}
        return {n: v.dot(f(t)) for n, f in self.test_functions.items()}

    def _bv_increments(self, v, t):
        new = self._pair(v, t)
        inc = {n: abs(new[n] - self._pairings.get(n, new[n])) for n in new}
        self._pairings = new
        return inc

    def append(self, row: LedgerRow):
        with self._lock:
            last = self._rows[-1].time if self._rows else self._t0
            if last is not None and not row.time > last:
                raise ValueError(f"ledger times must increase strictly ({row.time} after {last})")
            if not math.isclose(row.cumulative_dissipation,
                                self._cum + row.dissipation_increment,
                                rel_tol=1e-12, abs_tol=1e-300):
                raise ValueError("cumulative dissipation does not match the increments")
            self._cum = row.cumulative_dissipation
            self._rows.append(row)

    def record_flow(self, state, record, **extra):
        """Row from a momentum step (``navier_stokes.StepRecord``)."""
        inc = record.dissipation
        self.append(LedgerRow(
            step=record.step, time=record.time,
            kinetic_energy=record.kinetic_energy,
            dissipation_increment=inc,
            cumulative_dissipation=self._cum + inc,
            source_work=record.source_work,
            energy_residual=record.energy_residual,
            max_violation=extra.pop("max_violation", record.max_violation),
            active_fraction=record.active_fraction,
            bv=self._bv_increments(state.v, record.time),
            **extra,
        ))

    def record_stefan(self, state, record, linf_bound: float):
        """Row from an enthalpy step (velocity-free columns stay zero)."""
        self.append(LedgerRow(step=record.step, time=record.time, w_linf=record.w_linf,
                              cumulative_dissipation=self._cum, linf_bound=linf_bound))

    def record_coupled(self, state, record):
        """Row from a coupled step (``coupling.CoupledRecord``)."""
        res = record.picard_residuals[-1] if record.picard_residuals else math.nan
        self.record_flow(state, record.flow, max_violation=record.max_violation,
                         picard_residual=res, w_linf=record.w_linf,
                         linf_bound=record.linf_bound)

    def snapshot(self) -> tuple[LedgerRow, ...]:
        with self._lock:
            return tuple(self._rows)

    def __len__(self):
        return len(self._rows)

    def column(self, name: str) -> np.ndarray:
        rows = self.snapshot()
        if name.startswith("bv_"):
            return np.array([r.bv.get(name[3:], math.nan) for r in rows])
        return np.array([getattr(r, name) for r in rows], dtype=float)

    def bv_totals(self) -> dict[str, float]:
        return {n: float(np.nansum(self.column(f"bv_{n}"))) for n in self.bv_names}

    def write_csv(self, path):
        names = self.bv_names
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(self.header)
            for row in self.snapshot():
                out.writerow([_fmt(x) for x in row.as_list(names)])


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and a float array of the rows of a ledger file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, len(rows[0]))


# ---------------------------------------------------------------------------
# Complementarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComplementarityReport:
    n_active: int
    n_inactive: int
    inactive_residual: float        # max over inactive cells, velocity units
    max_residual: float
    multiplier_alignment: float     # min cosine of multiplier vs constrained quantity
    displacement_alignment: float   # mean cosine of (v_pre - v) vs v on active cells (K1)
    active_speed_max: float


def complementarity_report(state, gamma: ObstacleField, kind, tol: float = 1e-8
                           ) -> ComplementarityReport:
    """Check the optimality structure of a finished momentum step.

    The momentum residual ``M v+ - b + A^T mu`` is Leray projected (the
    pressure absorbs its gradient part), scaled by ``dt`` and compared at
    cell centres.  On active cells the multiplier of each ball constraint
    must point along the constrained quantity; for velocity bounds the
    displacement ``v_pre - v+`` is also compared with ``v+``.
    """
    kind = ConstraintKind.parse(kind)
    art = state.artifacts
    if art is None:
        raise ValueError("state carries no step artifacts")
    v = state.v
    grid = v.grid
    _check_same_grid(v, gamma)
    g = gamma.values
    q = constrained_quantity(v, kind)
    active = np.isfinite(g) & (q >= g - tol)

    r = leray_project(VectorField.from_interior(grid, art.momentum_residual * art.dt))
    rc = _center_magnitude(r)
    scale = max(1.0, v.max_abs())
    inactive_res = float(rc[~active].max()) / scale if (~active).any() else 0.0

    mult_cos = 1.0
    if art.multipliers is not None and art.cells is not None and art.cells.size:
        blocks = constraint_blocks(grid, kind)
        x = v.interior()
        Y = np.stack([B[art.cells] @ x for B in blocks])
        mu = art.multipliers
        nm, ny = np.linalg.norm(mu, axis=0), np.linalg.norm(Y, axis=0)
        live = (nm > 1e-10 * max(nm.max(), 1e-300)) & (ny > tol)
        if live.any():
            cos = (mu[:, live] * Y[:, live]).sum(axis=0) / (nm[live] * ny[live])
            mult_cos = float(cos.min())

    disp_cos = math.nan
    if kind is ConstraintKind.VELOCITY_BOUND:
        d = art.v_pre - v
        dc = _center_vectors(d)
        vc = _center_vectors(v)
        sel = active & (q > tol) & (np.hypot(*dc) > tol)
        if sel.any():
            num = dc[0][sel] * vc[0][sel] + dc[1][sel] * vc[1][sel]
            disp_cos = float(np.mean(num / (np.hypot(*dc)[sel] * q[sel])))

    return ComplementarityReport(
        n_active=int(active.sum()), n_inactive=int((~active).sum()),
        inactive_residual=inactive_res, max_residual=float(rc.max()) / scale,
        multiplier_alignment=mult_cos, displacement_alignment=disp_cos,
        active_speed_max=float(q[active].max()) if active.any() else 0.0,
    )


def _center_vectors(vf: VectorField):
    return 0.5 * (vf.u[1:] + vf.u[:-1]), 0.5 * (vf.v[:, 1:] + vf.v[:, :-1])


def _center_magnitude(vf: VectorField) -> np.ndarray:
    return np.hypot(*_center_vectors(vf))


__all__ = [
    "BASE_COLUMNS", "ComplementarityReport", "DiagnosticLedger", "GridMismatchError",
    "LedgerRow", "bv_pairing", "complementarity_report", "constant_field",
    "default_test_functions", "read_csv", "solenoidal_mode", "time_modulated", "var_budget",
]
