import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from constrained_flow.config import build_scenario, preset_config
from constrained_flow.constraints import constrained_quantity
from constrained_flow.coupling import run_coupled
from constrained_flow.diagnostics import (BASE_COLUMNS, DiagnosticLedger, LedgerRow, bv_pairing,
                                          complementarity_report, constant_field,
                                          default_test_functions, read_csv, solenoidal_mode,
                                          time_modulated, var_budget)
from constrained_flow.grid import (GridMismatchError, ObstacleField, StaggeredGrid, VectorField,
                                   divergence)
from constrained_flow.navier_stokes import NSParams, NSState, run_ns, vi_time_step

from conftest import random_solenoidal, random_vector


# -- bounded-variation pairing -----------------------------------------------

def test_bv_constant_is_zero(grid16, rng):
    v = random_vector(grid16, rng)
    assert bv_pairing([v] * 6, random_vector(grid16, rng)) == 0.0


def test_bv_ramp_telescopes(grid16, rng):
    e = random_vector(grid16, rng)
    e = e / e.norm()
    ts = np.linspace(0, 1, 21)
    assert bv_pairing([e * t for t in ts], e) == pytest.approx(1.0, rel=1e-13)


def test_bv_matches_loop_oracle(grid16, rng):
    vs = [random_vector(grid16, rng) for _ in range(12)]
    xis = [random_vector(grid16, rng) for _ in range(12)]

    def pair(a, b):
        s = 0.0
        for arr_a, arr_b in ((a.u, b.u), (a.v, b.v)):
            for x, y in zip(arr_a.ravel(), arr_b.ravel()):
                s += x * y
        return s * grid16.cell_area

    ref = sum(abs(pair(vs[k + 1], xis[k + 1]) - pair(vs[k], xis[k])) for k in range(11))
    assert bv_pairing(vs, xis) == pytest.approx(ref, rel=1e-13)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 10), cut=st.integers(1, 9))
def test_bv_additive_over_adjacent_intervals(seed, n, cut):
    rng = np.random.default_rng(seed)
    g = StaggeredGrid.uniform(6, 5)
    vs = [random_vector(g, rng) for _ in range(n)]
    xi = random_vector(g, rng)
    k = min(cut, n - 1)
    whole = bv_pairing(vs, xi)
    parts = bv_pairing(vs[:k + 1], xi) + bv_pairing(vs[k:], xi)
    assert whole <= parts + 1e-12 * (1 + whole)
    assert whole == pytest.approx(parts, rel=1e-12, abs=1e-14)
    # dropping interior samples can only lower the variation
    assert bv_pairing(vs[::2] + [vs[-1]], xi) <= whole + 1e-12 * (1 + whole)


def test_bv_invariant_under_reparameterization(grid16):
    a, b = solenoidal_mode(grid16, 1, 1), solenoidal_mode(grid16, 2, 1)
    xi = time_modulated(a, omega=3.0)

    def v(t):
        return a * np.sin(2 * t) + b * t**2

    t = np.linspace(0, 1, 25)
    s = np.sqrt(t)                      # t = phi(s) = s^2, monotone
    direct = bv_pairing([v(tk) for tk in t], [xi(tk) for tk in t])
    reparam = bv_pairing([v(sk**2) for sk in s], [xi(sk**2) for sk in s])
    assert reparam == pytest.approx(direct, rel=1e-12)


def test_bv_rejects_bad_input(grid16, rng):
    v = random_vector(grid16, rng)
    with pytest.raises(ValueError, match="same times"):
        bv_pairing([v, v], [v])
    other = StaggeredGrid.uniform(8, 8)
    with pytest.raises(GridMismatchError):
        bv_pairing([v, v], random_vector(other, rng))
    with pytest.raises(ValueError, match="finite"), np.errstate(over="ignore"):
        bv_pairing([v, v * 1e200], v * 1e200)


def test_test_function_library(grid16):
    lib = default_test_functions(grid16)
    assert set(lib) == {"const_x", "const_y", "mode_1_1", "mode_2_1", "mode_1_1_mod"}
    for name in ("mode_1_1", "mode_2_1"):
        assert np.abs(divergence(lib[name](0.0)).values).max() <= 1e-12
    assert lib["mode_1_1_mod"](0.5).dot(lib["mode_1_1"](0.0)) < 0
    c = constant_field(grid16, 2.0, 0.0)
    assert np.all(c.u[1:-1] == 2.0) and np.all(c.u[[0, -1]] == 0.0)


# -- variation budget --------------------------------------------------------

@pytest.mark.parametrize("M0, kappa, u0, expected", [(0, 1, 0, 0), (1, 1, 0, 2), (2, 0.5, 1, 7)])
def test_var_budget_examples(M0, kappa, u0, expected):
    assert var_budget(M0, kappa, u0) == pytest.approx(expected)


def test_var_budget_rejects_bad_input():
    with pytest.raises(ValueError):
        var_budget(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        var_budget(-1.0, 1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(M0=st.floats(0, 1e3), dM=st.floats(1e-3, 1e3), kappa=st.floats(1e-3, 1e3),
       dk=st.floats(1e-3, 1e3), u0=st.floats(0, 1e3))
def test_var_budget_monotone(M0, dM, kappa, dk, u0):
    assert var_budget(M0 + dM, kappa, u0) > var_budget(M0, kappa, u0)
    assert var_budget(M0, kappa + dk, u0) <= var_budget(M0, kappa, u0)


# -- ledger ------------------------------------------------------------------

def _run_with_ledger(grid, rng, t_end=0.3):
    led = DiagnosticLedger(default_test_functions(grid))
    v0 = random_solenoidal(grid, rng, scale=0.5)
    led.start(v0)
    p = NSParams(0.05, 0.05, random_solenoidal(grid, rng, scale=5))
    traj = run_ns(v0, p, "velocity", ObstacleField.constant(grid, 0.5), t_end,
                  callback=lambda s, r: led.record_flow(s, r))
    return led, traj


def test_ledger_cumulative_dissipation(grid16, rng):
    led, traj = _run_with_ledger(grid16, rng)
    inc = led.column("dissipation_increment")
    assert len(led) == len(traj.records) == 6
    assert np.abs(led.column("cumulative_dissipation") - np.cumsum(inc)).max() <= 1e-12 * inc.sum()
    assert np.array_equal(inc, [r.dissipation for r in traj.records])


def test_ledger_rejects_out_of_order_rows():
    led = DiagnosticLedger()
    led.start(None, 0.0)
    led.append(LedgerRow(step=1, time=0.1))
    for t in (0.1, 0.05):
        with pytest.raises(ValueError, match="increase"):
            led.append(LedgerRow(step=2, time=t))
    with pytest.raises(ValueError, match="dissipation"):
        led.append(LedgerRow(step=2, time=0.2, dissipation_increment=1.0,
                             cumulative_dissipation=3.0))
    with pytest.raises(RuntimeError):
        led.start(None)
    assert len(led) == 1


def test_ledger_rows_are_immutable(grid16, rng):
    led, _ = _run_with_ledger(grid16, rng)
    rows = led.snapshot()
    with pytest.raises(AttributeError):
        rows[0].time = 5.0
    assert isinstance(rows, tuple)


def test_ledger_bv_columns_sum_to_pairing(grid16, rng):
    led, traj = _run_with_ledger(grid16, rng)
    lib = default_test_functions(grid16)
    # every step is stored, so the trajectory states are the full sample set
    vs = [traj.states[0].v] + [s.v for s in traj.states[1:]]
    ts = [0.0] + [s.t for s in traj.states[1:]]
    for name, f in lib.items():
        ref = bv_pairing(vs, [f(t) for t in ts])
        assert led.bv_totals()[name] == pytest.approx(ref, rel=1e-12)


def test_ledger_csv_round_trip(grid16, rng, tmp_path):
    led, _ = _run_with_ledger(grid16, rng)
    path = tmp_path / "ledger.csv"
    led.write_csv(path)
    header, data = read_csv(path)
    assert header == list(BASE_COLUMNS) + [f"bv_{n}" for n in sorted(default_test_functions(
        grid16))]
    assert data.shape == (6, len(header))
    assert np.array_equal(data[:, header.index("kinetic_energy")], led.column("kinetic_energy"))
    assert np.all(np.isnan(data[:, header.index("w_linf")]))


def test_ledger_concurrent_readers(grid16, rng):
    led = DiagnosticLedger()
    led.start(None)
    seen = []

    def reader():
        for _ in range(200):
            rows = led.snapshot()
            seen.append(all(a.time < b.time for a, b in zip(rows, rows[1:])))

    th = threading.Thread(target=reader)
    th.start()
    for k in range(1, 300):
        led.append(LedgerRow(step=k, time=0.01 * k))
    th.join()
    assert all(seen) and len(led) == 299


def test_stefan_rows_leave_flow_columns_empty(grid16):
    from constrained_flow.stefan import BetaSpec, StefanParams, run_stefan
    from constrained_flow.grid import ScalarField
    led = DiagnosticLedger(default_test_functions(grid16))
    led.start(None)
    traj = run_stefan(ScalarField(grid16, np.full(grid16.shape, 2.0)), None,
                      StefanParams(1.0, 0.1), BetaSpec(), 0.3)
    for st_, rec in zip(traj.states[1:], traj.records[1:]):
        led.record_stefan(st_, rec, 2.0 * (1 + rec.time))
    assert np.all(led.column("kinetic_energy") == 0)
    assert np.all(led.column("w_linf") <= led.column("linf_bound"))
    assert all(math.isnan(x) for x in led.column("bv_const_x"))


# -- complementarity ---------------------------------------------------------

def test_complementarity_unconstrained(grid16, rng):
    p = NSParams(0.05, 0.05, random_solenoidal(grid16, rng, scale=5))
    free = ObstacleField.constant(grid16, np.inf)
    s = vi_time_step(NSState(random_solenoidal(grid16, rng)), p, "velocity", free)
    rep = complementarity_report(s, free, "velocity")
    assert rep.n_active == 0 and rep.n_inactive == grid16.n_cells
    assert rep.inactive_residual <= p.inner_tolerance


def test_complementarity_fully_degenerate(grid16, rng):
    p = NSParams(0.05, 0.05, random_solenoidal(grid16, rng, scale=5))
    zero = ObstacleField.constant(grid16, 0.0)
    s = vi_time_step(NSState(VectorField.zeros(grid16)), p, "velocity", zero)
    rep = complementarity_report(s, zero, "velocity")
    assert rep.n_active == grid16.n_cells and rep.n_inactive == 0
    assert s.v.max_abs() == 0.0 and rep.active_speed_max == 0.0


def test_complementarity_requires_artifacts(grid16):
    with pytest.raises(ValueError):
        complementarity_report(NSState(VectorField.zeros(grid16)),
                               ObstacleField.constant(grid16, 1.0), "velocity")


def test_complementarity_on_shear_preset():
    cfg = preset_config("freezing-channel", ["grid.nx=32", "grid.ny=32", "flow.t_end=0.7"])
    sc = build_scenario(cfg)
    traj = run_coupled(sc.w0, sc.v0, sc.setup, cfg.flow.t_end)
    s = traj.final
    rep = complementarity_report(s.ns_state, s.gamma_used, "velocity")
    assert rep.n_active > 0
    assert rep.inactive_residual <= 10 * cfg.flow.inner_tolerance
    assert rep.multiplier_alignment >= 1 - 1e-9
    # the projection removes velocity along v: (v_pre - v) points with v
    assert rep.displacement_alignment > 0
    # active cells sit in the cooled band or in the wall layer, where the
    # mollified enthalpy loses kernel mass
    q = constrained_quantity(s.v, "velocity")
    active = q >= s.gamma_used.values - 1e-8
    _, yc = sc.grid.cell_centers()
    near_wall = sc.grid.boundary_distance() < sc.setup.mollifier.epsilon0
    assert np.all(near_wall[active] | (yc[active] < 0.35))
    assert rep.n_active < 0.5 * sc.grid.n_cells
