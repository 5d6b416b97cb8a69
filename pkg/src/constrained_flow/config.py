"""Simulation configuration: INI-style text files, presets and scenario assembly.

A config file has the sections ``[grid]``, ``[flow]``, ``[stefan]``,
``[coupling]`` and ``[output]``.  Every key is optional; missing keys take the
documented defaults, or the values of the named preset when
``coupling.preset`` is set.  Loading validates everything at once and reports
all problems together.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

import numpy as np

SECTIONS = ("grid", "flow", "stefan", "coupling", "output")
MODES = ("ns", "stefan", "coupled")


class ConfigError(ValueError):
    """Parse or validation failure; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class GridConfig:
    nx: int = 64
    ny: int = 64
    lx: float = 1.0
    ly: float = 1.0


@dataclass(frozen=True)
class FlowConfig:
    nu: float = 0.05
    dt: float = 0.02
    t_end: float = 1.0
    advection: str = "frozen"
    method: str = "newton"
    inner_tolerance: float = 1e-10
    inner_max_iters: int = 50
    force_amplitude: float = 0.0      # Leray-projected shear force A sin(pi y / ly) e_x
    initial_velocity: str = "zero"    # zero | mode | random
    velocity_amplitude: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class StefanConfig:
    n0: float = 1.0
    beta_neg: float = 1.0
    beta_pos: float = 1.0
    beta_delta: float = 1e-6
    w0: float = 1.5
    block: str = ""                   # "x0,x1,y0,y1" region set to block_value
    block_value: float = 0.0
    source: float = 0.0
    source_ymax: float = -1.0         # source acts where y < source_ymax (< 0: everywhere)
    insulated: str = ""               # comma-separated sides
    newton_tolerance: float = 1e-12


@dataclass(frozen=True)
class CouplingConfig:
    mode: str = "coupled"
    preset: str = ""
    kind: str = "velocity"
    regime: str = "degenerate"
    c: float = 1.0
    c_star: float = 0.0
    epsilon0_cells: float = 4.0
    delta: float = 0.01
    cap_N: float = 100.0
    picard_iters: int = 1
    picard_tolerance: float = 1e-8
    relaxation: float = 1.0


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "output"
    snapshot_every: int = 10
    vtk: bool = True


@dataclass(frozen=True)
class SimulationConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    stefan: StefanConfig = field(default_factory=StefanConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _section_cls(name):
    return typing.get_type_hints(SimulationConfig)[name]


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESETS: dict[str, dict[str, dict[str, str]]] = {
    # warm liquid driven by a shear force, cooled along the bottom band
    "freezing-channel": {
        "flow": {"force_amplitude": "5.0", "t_end": "1.0"},
        "stefan": {"w0": "1.5", "source": "-3.0", "source_ymax": "0.25"},
        "coupling": {"mode": "coupled", "kind": "velocity", "regime": "degenerate"},
        "output": {"snapshot_every": "10"},
    },
    # a solid block melting in heated liquid
    "melt-cavity": {
        "flow": {"force_amplitude": "5.0", "t_end": "0.5"},
        "stefan": {"w0": "1.2", "block": "0.3,0.7,0.3,0.7", "block_value": "-0.5",
                   "source": "4.0"},
        "coupling": {"mode": "coupled", "kind": "velocity", "regime": "degenerate"},
        "output": {"snapshot_every": "5"},
    },
    # fully solid domain with no heating: the obstacle vanishes and the flow stays at rest
    "solid-start": {
        "flow": {"force_amplitude": "5.0", "t_end": "0.5"},
        "stefan": {"w0": "-0.5", "source": "0.0"},
        "coupling": {"mode": "coupled", "kind": "velocity", "regime": "degenerate"},
        "output": {"snapshot_every": "5"},
    },
}


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------


def _convert(raw: str, typ, where: str, problems: list):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(raw)
        if typ is float:
            val = float(raw)
            if not np.isfinite(val):
                raise ValueError
            return val
        return raw
    except ValueError:
        problems.append(f"{where}: expected {typ.__name__}, got {raw!r}")
        return None


def _read_parser(text: str, source: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError([f"{source}, line {exc.lineno}: entry before any [section] "
                           f"header: {exc.line.strip()!r}"]) from None
    except configparser.ParsingError as exc:
        raise ConfigError([f"{source}, line {ln}: cannot parse {line.strip()!r}"
                           for ln, line in exc.errors]) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError([f"{source}, line {exc.lineno}: {exc.message}"]) from None
    return parser


def parse_config(text: str, overrides=(), source: str = "<config>") -> SimulationConfig:
    """Build a validated config from INI text plus ``section.key=value`` overrides."""
    parser = _read_parser(text, source)
    problems = []
    entries: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for sec in parser.sections():
        if sec not in SECTIONS:
            problems.append(f"unknown section [{sec}]")
            continue
        entries[sec].update(parser[sec])
    for item in overrides:
        key, sep, value = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot:
            problems.append(f"override {item!r} is not of the form section.key=value")
        elif sec not in SECTIONS:
            problems.append(f"override {item!r}: unknown section [{sec}]")
        else:
            entries[sec][name] = value

    preset = entries["coupling"].get("preset", "").strip()
    base: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if preset:
        if preset not in PRESETS:
            problems.append(f"coupling.preset: unknown preset {preset!r} "
                            f"(choose from {', '.join(PRESETS)})")
        else:
            for sec, vals in PRESETS[preset].items():
                base[sec].update(vals)
    sections = {}
    for sec in SECTIONS:
        cls = _section_cls(sec)
        hints = typing.get_type_hints(cls)
        merged = {**base[sec], **entries[sec]}
        kwargs = {}
        for key, raw in merged.items():
            if key not in hints:
                problems.append(f"[{sec}] unknown key {key!r}")
                continue
            val = _convert(raw, hints[key], f"{sec}.{key}", problems)
            if val is not None:
                kwargs[key] = val
        sections[sec] = cls(**kwargs)
    cfg = SimulationConfig(**sections)
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, overrides=()) -> SimulationConfig:
    """Read and validate a config file; raises :class:`ConfigError` listing every problem."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from None
    return parse_config(text, overrides, source=str(path))


def validate(cfg: SimulationConfig) -> list[str]:
    """Every semantic violation of ``cfg`` (empty when valid)."""
    from .constraints import ConstraintKind
    from .stefan import SIDES

    p = []
    g, f, s, c, o = cfg.grid, cfg.flow, cfg.stefan, cfg.coupling, cfg.output

    def positive(name, value):
        if not value > 0:
            p.append(f"{name} must be positive")

    if g.nx < 4 or g.ny < 4:
        p.append("grid.nx and grid.ny must be at least 4")
    positive("lx", g.lx)
    positive("ly", g.ly)
    positive("nu", f.nu)
    positive("dt", f.dt)
    positive("t_end", f.t_end)
    positive("inner_tolerance", f.inner_tolerance)
    if f.inner_max_iters < 1:
        p.append("inner_max_iters must be at least 1")
    if f.advection not in ("frozen", "full", "off"):
        p.append(f"advection must be frozen, full or off (got {f.advection!r})")
    if f.method not in ("newton", "projected_gradient"):
        p.append(f"method must be newton or projected_gradient (got {f.method!r})")
    if f.initial_velocity not in ("zero", "mode", "random"):
        p.append(f"initial_velocity must be zero, mode or random (got {f.initial_velocity!r})")
    positive("beta_neg", s.beta_neg)
    positive("beta_pos", s.beta_pos)
    if not 0 < s.beta_delta < 1:
        p.append("beta_delta must lie in (0, 1)")
    positive("newton_tolerance", s.newton_tolerance)
    sides = [x.strip() for x in s.insulated.split(",") if x.strip()]
    bad = [x for x in sides if x not in SIDES]
    if bad:
        p.append(f"insulated: unknown sides {bad}")
    if len(set(sides) & set(SIDES)) < len(SIDES) and not s.n0 > 0:
        p.append("n0 must be positive when any side has the Robin condition")
    if s.block:
        try:
            box = [float(x) for x in s.block.split(",")]
            if len(box) != 4 or box[0] >= box[1] or box[2] >= box[3]:
                raise ValueError
        except ValueError:
            p.append(f"block must be 'x0,x1,y0,y1' with x0 < x1 and y0 < y1 (got {s.block!r})")
    if c.mode not in MODES:
        p.append(f"mode must be one of {', '.join(MODES)} (got {c.mode!r})")
    kind = None
    try:
        kind = ConstraintKind.parse(c.kind)
    except ValueError as exc:
        p.append(str(exc))
    if c.regime not in ("degenerate", "nondegenerate"):
        p.append(f"regime must be degenerate or nondegenerate (got {c.regime!r})")
    positive("profile scale c", c.c)
    if c.regime == "nondegenerate" and not c.c_star > 0:
        p.append("c_star must be positive for the nondegenerate regime")
    if c.regime == "degenerate" and c.c_star != 0:
        p.append("c_star must be 0 for the degenerate regime")
    if c.regime == "degenerate" and kind is ConstraintKind.GRADIENT_BOUND:
        p.append("unsupported regime: degenerate obstacle with a gradient bound")
    if c.epsilon0_cells < 2:
        p.append("epsilon0_cells must be at least 2 (the mollifier must resolve the kernel)")
    if not 0 < c.delta < 1:
        p.append("delta must lie in (0, 1)")
    if not c.cap_N >= 1:
        p.append("cap_N must be at least 1")
    if c.picard_iters < 1:
        p.append("picard_iters must be at least 1")
    positive("picard_tolerance", c.picard_tolerance)
    if not 0 < c.relaxation <= 1:
        p.append("relaxation must lie in (0, 1]")
    if o.snapshot_every < 0:
        p.append("snapshot_every must be non-negative")
    if not o.directory.strip():
        p.append("output directory must not be empty")
    return p


def serialize(cfg: SimulationConfig) -> str:
    """INI text that :func:`parse_config` turns back into an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        parser[sec] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def preset_config(name: str, overrides=()) -> SimulationConfig:
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r} (choose from {', '.join(PRESETS)})"])
    return parse_config(f"[coupling]\npreset = {name}\n", overrides, source=f"<preset {name}>")


# ---------------------------------------------------------------------------
# Scenario assembly
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """Solver objects built from a config."""
    config: SimulationConfig
    grid: object
    w0: object
    v0: object
    ns: object
    stefan: object
    beta: object
    setup: object       # CouplingSetup


def build_scenario(cfg: SimulationConfig) -> Scenario:
    from .constraints import RegularizationParams
    from .coupling import CouplingControl, CouplingSetup, GammaProfile, MollifierSpec
    from .diagnostics import solenoidal_mode
    from .grid import ScalarField, StaggeredGrid, VectorField
    from .navier_stokes import NSParams
    from .solenoidal import leray_project
    from .stefan import BetaSpec, StefanParams

    g, f, s, c = cfg.grid, cfg.flow, cfg.stefan, cfg.coupling
    grid = StaggeredGrid.uniform(g.nx, g.ny, g.lx, g.ly)
    xc, yc = grid.cell_centers()

    w0 = np.full(grid.shape, s.w0)
    if s.block:
        x0, x1, y0, y1 = (float(t) for t in s.block.split(","))
        w0[(xc >= x0) & (xc <= x1) & (yc >= y0) & (yc <= y1)] = s.block_value
    h = np.where(yc < s.source_ymax, s.source, 0.0) if s.source_ymax >= 0 else \
        np.full(grid.shape, s.source)

    force = None
    if f.force_amplitude:
        A, ly = f.force_amplitude, g.ly
        force = leray_project(VectorField.from_functions(
            grid, lambda x, y: A * np.sin(np.pi * y / ly) + 0 * x, lambda x, y: 0 * x))

    if f.initial_velocity == "mode":
        m = solenoidal_mode(grid, 1, 1)
        v0 = m * (f.velocity_amplitude / max(m.max_abs(), 1e-300))
    elif f.initial_velocity == "random":
        rng = np.random.default_rng(f.seed)
        raw = VectorField(grid, rng.standard_normal((g.nx + 1, g.ny)),
                          rng.standard_normal((g.nx, g.ny + 1))).with_no_slip()
        p = leray_project(raw)
        v0 = p * (f.velocity_amplitude / max(p.max_abs(), 1e-300))
    else:
        v0 = VectorField.zeros(grid)

    ns = NSParams(nu=f.nu, dt=f.dt, body_force=force, advection=f.advection,
                  inner_tolerance=f.inner_tolerance, inner_max_iters=f.inner_max_iters,
                  method=f.method)
    sides = tuple(x.strip() for x in s.insulated.split(",") if x.strip())
    st = StefanParams(n0=s.n0, dt=f.dt, source=ScalarField(grid, h),
                      newton_tolerance=s.newton_tolerance, insulated_sides=sides)
    beta = BetaSpec(s.beta_neg, s.beta_pos, s.beta_delta)
    profile = GammaProfile(c.regime, c.c, c.c_star)
    setup = CouplingSetup(ns, st, beta, profile, c.kind,
                          MollifierSpec.cells(grid, c.epsilon0_cells),
                          RegularizationParams(c.delta, c.cap_N),
                          CouplingControl(c.picard_iters, c.picard_tolerance, c.relaxation))
    return Scenario(cfg, grid, ScalarField(grid, w0), v0, ns, st, beta, setup)
