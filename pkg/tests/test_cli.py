import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from constrained_flow.cli import main
from constrained_flow.config import (PRESETS, ConfigError, SimulationConfig, build_scenario,
                                     load_config, parse_config, preset_config, serialize)
from constrained_flow.diagnostics import BASE_COLUMNS, read_csv
from constrained_flow.grid import StaggeredGrid
from constrained_flow.io import read_vtk, write_vtk

SMALL = ["grid.nx=12", "grid.ny=12"]


def run_cli(tmp_path, *args):
    return main(["run", "--output", str(tmp_path), *args])


def _overrides(*items):
    return [arg for o in items for arg in ("--override", o)]


# -- config ------------------------------------------------------------------

def test_minimal_file_gets_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[grid]\nnx = 32\n")
    cfg = load_config(path)
    assert cfg.grid.nx == 32
    assert cfg.grid.ny == SimulationConfig().grid.ny
    assert cfg.flow == SimulationConfig().flow


def test_empty_file_is_valid(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("")
    assert load_config(path) == SimulationConfig()


def test_nu_must_be_positive():
    with pytest.raises(ConfigError) as info:
        parse_config("[flow]\nnu = 0\n")
    assert "nu must be positive" in info.value.problems


def test_degenerate_gradient_bound_rejected():
    with pytest.raises(ConfigError, match="unsupported regime"):
        parse_config("[coupling]\nkind = gradient\nregime = degenerate\n")
    cfg = parse_config("[coupling]\nkind = gradient\nregime = nondegenerate\nc_star = 0.5\n")
    assert cfg.coupling.kind == "gradient"


def test_all_violations_reported():
    text = "[flow]\nnu = -1\ndt = 0\n[stefan]\nbeta_pos = 0\n[coupling]\nrelaxation = 2\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    msgs = info.value.problems
    assert len(msgs) == 4
    assert any("nu" in m for m in msgs) and any("dt" in m for m in msgs)
    assert any("beta_pos" in m for m in msgs) and any("relaxation" in m for m in msgs)


def test_unknown_keys_sections_and_types():
    with pytest.raises(ConfigError) as info:
        parse_config("[grid]\nnx = many\nspin = 3\n[physics]\nx = 1\n")
    text = str(info.value)
    assert "unknown section [physics]" in text
    assert "'spin'" in text and "grid.nx" in text


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[grid]\nnx = 8\nthis line is broken\n")
    with pytest.raises(ConfigError, match="line 3"):
        load_config(path)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.ini")


def test_overrides_and_presets():
    cfg = parse_config("[coupling]\npreset = melt-cavity\n", ["flow.nu=0.2"])
    assert cfg.flow.nu == 0.2
    assert cfg.stefan.block_value == -0.5
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_config("", ["coupling.preset=lava"])
    with pytest.raises(ConfigError, match="section.key=value"):
        parse_config("", ["nu=3"])


@settings(max_examples=50, deadline=None)
@given(nx=st.integers(4, 200), nu=st.floats(1e-4, 10), dt=st.floats(1e-4, 1),
       w0=st.floats(-5, 5), c=st.floats(0.01, 100), vtk=st.booleans(),
       preset=st.sampled_from([""] + sorted(PRESETS)), mode=st.sampled_from(["ns", "coupled"]))
def test_config_round_trip(nx, nu, dt, w0, c, vtk, preset, mode):
    overrides = [f"grid.nx={nx}", f"flow.nu={nu!r}", f"flow.dt={dt!r}", f"stefan.w0={w0!r}",
                 f"coupling.c={c!r}", f"output.vtk={vtk}", f"coupling.mode={mode}"]
    if preset:
        overrides.append(f"coupling.preset={preset}")
    cfg = parse_config("", overrides)
    assert parse_config(serialize(cfg)) == cfg


def test_scenario_force_is_solenoidal():
    from constrained_flow.grid import divergence
    sc = build_scenario(preset_config("freezing-channel", SMALL))
    assert np.abs(divergence(sc.ns.body_force).values).max() <= 1e-10
    assert sc.ns.body_force.max_abs() > 1


def test_random_initial_velocity_is_seeded():
    over = SMALL + ["flow.initial_velocity=random", "flow.velocity_amplitude=0.1",
                    "stefan.w0=2.0"]
    a = build_scenario(parse_config("", over + ["flow.seed=3"])).v0
    b = build_scenario(parse_config("", over + ["flow.seed=3"])).v0
    c = build_scenario(parse_config("", over + ["flow.seed=4"])).v0
    assert np.array_equal(a.u, b.u) and not np.array_equal(a.u, c.u)


# -- VTK ---------------------------------------------------------------------

def test_vtk_round_trip(tmp_path, rng):
    g = StaggeredGrid.uniform(5, 3, 1.0, 0.6)
    fields = {"w": rng.standard_normal((5, 3)), "gamma": np.full((5, 3), np.inf)}
    write_vtk(tmp_path / "f.vtk", g, fields, title="t")
    dims, spacing, back = read_vtk(tmp_path / "f.vtk")
    assert dims == (5, 3) and spacing == pytest.approx((0.2, 0.2))
    assert np.array_equal(back["w"], fields["w"])
    assert np.all(back["gamma"] == -1.0)
    text = (tmp_path / "f.vtk").read_text()
    assert text.startswith("# vtk DataFile Version 3.0") and "DATASET STRUCTURED_POINTS" in text


def test_vtk_rejects_wrong_shape(tmp_path):
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "f.vtk", StaggeredGrid.uniform(4, 4), {"w": np.zeros((3, 4))})


# -- commands ----------------------------------------------------------------

def test_presets_command(capsys):
    assert main(["presets"]) == 0
    assert capsys.readouterr().out.split() == list(PRESETS)
    assert main(["presets", "--show", "solid-start"]) == 0
    assert "preset = solid-start" in capsys.readouterr().out


def test_validate_command(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text("[flow]\nnu = 0.1\n")
    assert main(["validate", "--config", str(good)]) == 0
    assert "nu = 0.1" in capsys.readouterr().out
    bad = tmp_path / "bad.ini"
    bad.write_text("[flow]\nnu = 0\n")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "nu must be positive" in capsys.readouterr().err


def test_run_requires_config_or_preset(tmp_path, capsys):
    assert run_cli(tmp_path) == 2
    assert "--config or --preset" in capsys.readouterr().err


def test_solid_start_stays_at_rest(tmp_path):
    assert run_cli(tmp_path, "--preset", "solid-start",
                   *_overrides(*SMALL, "flow.t_end=0.2", "output.snapshot_every=2")) == 0
    snaps = sorted(tmp_path.glob("snapshot_*.vtk"))
    assert [p.name for p in snaps] == [f"snapshot_{k:05d}.vtk" for k in (0, 2, 4, 6, 8, 10)]
    for p in snaps:
        _, _, fields = read_vtk(p)
        assert set(fields) == {"w", "speed", "gamma", "active"}
        assert np.all(fields["speed"] == 0.0)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["steps"] == 10
    assert (tmp_path / "config.ini").exists()


def test_runs_are_deterministic(tmp_path):
    over = _overrides(*SMALL, "flow.t_end=0.2", "flow.initial_velocity=random",
                      "flow.velocity_amplitude=0.05", "flow.seed=11")
    for d in ("a", "b"):
        assert run_cli(tmp_path / d, "--preset", "melt-cavity", *over) == 0
    a = (tmp_path / "a" / "ledger.csv").read_bytes()
    assert a == (tmp_path / "b" / "ledger.csv").read_bytes()
    header, data = read_csv(tmp_path / "a" / "ledger.csv")
    assert header[:len(BASE_COLUMNS)] == list(BASE_COLUMNS)
    assert data.shape[0] == 10


def test_ledger_independent_of_cadence(tmp_path):
    base = _overrides(*SMALL, "flow.t_end=0.2")
    assert run_cli(tmp_path / "a", "--preset", "freezing-channel", *base,
                   *_overrides("output.snapshot_every=1")) == 0
    assert run_cli(tmp_path / "b", "--preset", "freezing-channel", *base,
                   *_overrides("output.snapshot_every=7")) == 0
    assert (tmp_path / "a" / "ledger.csv").read_bytes() == \
        (tmp_path / "b" / "ledger.csv").read_bytes()
    assert len(list((tmp_path / "a").glob("*.vtk"))) == 11
    assert len(list((tmp_path / "b").glob("*.vtk"))) == 3


@pytest.mark.parametrize("mode", ["ns", "stefan"])
def test_single_physics_modes(tmp_path, mode):
    assert run_cli(tmp_path, "--preset", "freezing-channel", "--mode", mode,
                   *_overrides(*SMALL, "flow.t_end=0.1")) == 0
    header, data = read_csv(tmp_path / "ledger.csv")
    assert data.shape[0] == 5
    w_linf = data[:, header.index("w_linf")]
    if mode == "stefan":
        assert np.all(w_linf <= data[:, header.index("linf_bound")] + 1e-10)
        assert np.all(data[:, header.index("kinetic_energy")] == 0)
    else:
        assert np.all(np.isnan(w_linf))
        assert data[-1, header.index("kinetic_energy")] > 0


def test_runtime_failure_writes_manifest(tmp_path, capsys):
    code = run_cli(tmp_path, "--preset", "freezing-channel",
                   *_overrides(*SMALL, "flow.t_end=0.2", "flow.method=projected_gradient",
                               "flow.inner_max_iters=1", "flow.inner_tolerance=1e-15"))
    assert code == 3
    fail = json.loads((tmp_path / "failure.json").read_text())
    assert fail["status"] == "failed" and fail["category"] == "runtime"
    assert "snapshot_00000.vtk" in fail["files"] and "ledger.csv" in fail["files"]
    assert not (tmp_path / "manifest.json").exists()
    assert "failure.json" in capsys.readouterr().err


def test_precondition_failure_exit_code(tmp_path):
    # a moving initial flow inside frozen material violates the data hygiene check
    code = run_cli(tmp_path, "--preset", "solid-start",
                   *_overrides(*SMALL, "flow.initial_velocity=mode",
                               "flow.velocity_amplitude=1.0"))
    assert code == 2
    fail = json.loads((tmp_path / "failure.json").read_text())
    assert fail["category"] == "precondition"
