"""Command line entry point.

    constrained-flow presets [--show NAME]
    constrained-flow validate --config PATH [--override section.key=value ...]
    constrained-flow run (--config PATH | --preset NAME) [--output DIR]
                         [--mode ns|stefan|coupled] [--override section.key=value ...]

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (MODES, PRESETS, ConfigError, SimulationConfig, build_scenario,
                     load_config, parse_config, serialize)
from .constraints import ConstraintKind, constrained_quantity
from .coupling import (CoupledStepFailure, CouplingPreconditionError, check_preconditions,
                       run_coupled)
from .diagnostics import DiagnosticLedger, default_test_functions
from .grid import center_speed
from .io import write_manifest, write_vtk
from .navier_stokes import NSStepFailure, run_ns
from .stefan import StefanStepFailure, run_stefan

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LEDGER_NAME = "ledger.csv"


class _Writer:
    """Snapshot and ledger bookkeeping for one run directory."""

    def __init__(self, cfg: SimulationConfig, out: Path, scenario):
        self.cfg = cfg
        self.out = out
        self.sc = scenario
        self.files: list[str] = []
        self.ledger = DiagnosticLedger(default_test_functions(scenario.grid))
        self.kind = ConstraintKind.parse(cfg.coupling.kind)
        self.last_step = 0
        self.last_time = 0.0

    def snapshot(self, step, t, w, v, gamma):
        self.last_step, self.last_time = step, t
        every = self.cfg.output.snapshot_every
        if not self.cfg.output.vtk:
            return
        final = t >= self.cfg.flow.t_end - 1e-12
        if not (step == 0 or final or (every and step % every == 0)):
            return
        g = gamma.values if gamma is not None else np.full(w.shape, np.inf)
        q = constrained_quantity(v, self.kind) if gamma is not None else np.zeros(w.shape)
        active = np.isfinite(g) & (q >= g - 1e-9)
        name = f"snapshot_{step:05d}.vtk"
        write_vtk(self.out / name, self.sc.grid,
                  {"w": w, "speed": center_speed(v), "gamma": g,
                   "active": active.astype(float)},
                  title=f"step {step} t={t!r}")
        self.files.append(name)

    def write_ledger(self):
        self.ledger.write_csv(self.out / LEDGER_NAME)
        if LEDGER_NAME not in self.files:
            self.files.append(LEDGER_NAME)


def execute(cfg: SimulationConfig, out: Path) -> int:
    """Run ``cfg`` writing into ``out``; returns an exit code."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize(cfg))
    sc = build_scenario(cfg)
    wr = _Writer(cfg, out, sc)
    mode = cfg.coupling.mode
    t_end = cfg.flow.t_end
    every = cfg.output.snapshot_every
    t0 = time.perf_counter()
    try:
        if mode == "coupled":
            raw, _ = check_preconditions(sc.w0, sc.v0, sc.setup)
            wr.ledger.start(sc.v0)
            wr.snapshot(0, 0.0, sc.w0.values, sc.v0, raw)

            def cb(state, rec):
                wr.ledger.record_coupled(state, rec)
                wr.snapshot(state.step, state.t, state.w.values, state.v, state.gamma)

            run_coupled(sc.w0, sc.v0, sc.setup, t_end, snapshot_every=every, callback=cb)
        elif mode == "ns":
            raw, used = sc.setup.obstacle(sc.w0)
            wr.ledger.start(sc.v0)
            wr.snapshot(0, 0.0, sc.w0.values, sc.v0, raw)

            def cb(state, rec):
                wr.ledger.record_flow(state, rec)
                wr.snapshot(state.step, state.t, sc.w0.values, state.v, raw)

            run_ns(sc.v0, sc.ns, sc.setup.kind, used, t_end, snapshot_every=every, callback=cb)
        else:
            _run_stefan(sc, wr, t_end)
    except CouplingPreconditionError as exc:
        _fail(wr, exc, "precondition", t0)
        return EXIT_CONFIG
    except (CoupledStepFailure, NSStepFailure, StefanStepFailure) as exc:
        _fail(wr, exc, "runtime", t0)
        return EXIT_RUNTIME
    wr.write_ledger()
    write_manifest(out / "manifest.json", {
        "status": "ok", "mode": mode, "steps": wr.last_step, "time": wr.last_time,
        "files": wr.files, "wall_seconds": round(time.perf_counter() - t0, 3)})
    return EXIT_OK


def _run_stefan(sc, wr, t_end):
    """Enthalpy-only run with the initial velocity frozen in time."""
    R1 = max(float(np.abs(sc.w0.values).max()), float(np.abs(sc.stefan.source.values).max()))
    v = sc.v0 if sc.v0.max_abs() > 0 else None
    wr.ledger.start(None)
    wr.snapshot(0, 0.0, sc.w0.values, sc.v0, None)
    traj = run_stefan(sc.w0, v, sc.stefan, sc.beta, t_end, snapshot_every=1)
    for state, rec in zip(traj.states[1:], traj.records[1:]):
        wr.ledger.record_stefan(state, rec, R1 * (1.0 + rec.time))
        wr.snapshot(state.step, state.t, state.w.values, sc.v0, None)


def _fail(wr, exc, category, t0):
    log.error("run failed: %s", exc)
    try:
        wr.write_ledger()
    except OSError:
        pass
    write_manifest(wr.out / "failure.json", {
        "status": "failed", "category": category, "error": str(exc),
        "error_type": type(exc).__name__, "last_step": wr.last_step,
        "last_time": wr.last_time, "files": wr.files,
        "wall_seconds": round(time.perf_counter() - t0, 3)})


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="constrained-flow",
                                 description="Constrained Navier-Stokes / Stefan simulations")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="INI config file")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--mode", choices=MODES, help="shortcut for coupling.mode")

    run = sub.add_parser("run", help="run a simulation")
    common(run)
    run.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    run.add_argument("--output", type=Path, help="output directory (overrides output.directory)")
    val = sub.add_parser("validate", help="check a config file and print the resolved config")
    common(val)
    val.add_argument("--preset", choices=sorted(PRESETS))
    pre = sub.add_parser("presets", help="list named presets")
    pre.add_argument("--show", choices=sorted(PRESETS), help="print the resolved preset config")
    return ap


def _load(args) -> SimulationConfig:
    overrides = list(args.override)
    if args.preset:
        overrides.insert(0, f"coupling.preset={args.preset}")
    if args.mode:
        overrides.append(f"coupling.mode={args.mode}")
    if args.config is not None:
        return load_config(args.config, overrides)
    if not args.preset:
        raise ConfigError(["either --config or --preset is required"])
    return parse_config("", overrides, source="<command line>")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        if args.show:
            sys.stdout.write(serialize(parse_config("", [f"coupling.preset={args.show}"])))
        else:
            for name in PRESETS:
                print(name)
        return EXIT_OK
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        sys.stdout.write(serialize(cfg))
        return EXIT_OK
    if args.output is not None:
        cfg = replace(cfg, output=replace(cfg.output, directory=str(args.output)))
    code = execute(cfg, Path(cfg.output.directory))
    if code == EXIT_CONFIG:
        print(f"run rejected; see {Path(cfg.output.directory) / 'failure.json'}", file=sys.stderr)
    elif code == EXIT_RUNTIME:
        print(f"run failed; see {Path(cfg.output.directory) / 'failure.json'}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
