"""Run configuration: YAML file <-> typed dataclasses.

Unknown keys are rejected and every validation error names the offending
key together with its line in the source file.  ``dump_config`` followed
by ``parse_config`` reproduces the same :class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

import yaml

from ..assembly import FACES, BC_KINDS


class ConfigError(ValueError):
    """Invalid configuration; the message carries ``file:line: key``."""


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

@dataclass
class PathsConfig:
    image: str | None = None
    mask: str | None = None
    output_dir: str = "output"


@dataclass
class DiscretizationConfig:
    h: float = 1.25
    p: int = 3
    depth: int = 2
    basis: str = "bspline"
    alpha_fcm: float = 1.0e-6


@dataclass
class MaterialConfig:
    gc0: float = 7.0
    e0: float = 20000.0
    beta: float = 0.8
    nu: float = 0.3
    eta: float = 1.0e-5
    hu_slope: float | None = None
    hu_intercept: float | None = None
    fracture: bool = True


@dataclass
class ScheduleConfig:
    u_large: float = 0.04
    u_med: float = 0.002
    u_small: float = 0.001
    target: float = 2.0
    switch_energy: float = 0.5
    switch_phase: float = 0.9
    drop_fraction: float = 0.25
    max_steps: int = 2000


@dataclass
class SolverConfig:
    l0: float = 2.0
    eps_stag: float = 1.0e-5
    n_stag: int = 25
    rtol: float = 1.0e-8
    linear_solver: str = "auto"
    penalty_factor: float = 1000.0
    branch_iterations: int = 25
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


@dataclass
class ConditionConfig:
    name: str = ""
    kind: str = "fixed"
    face: str | None = None
    plane: list[float] | None = None
    surface: str | None = None
    bounds: list[list[float]] | None = None
    component: int | None = None
    value: float = 0.0
    scale: float = 0.0
    penalty: float | None = None
    physical_only: bool | None = None


@dataclass
class BoundaryConfig:
    load: str = "top"
    load_component: int = 2
    conditions: list[ConditionConfig] = field(default_factory=list)


@dataclass
class ProbeConfig:
    name: str = ""
    center: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 0.5


@dataclass
class PostprocConfig:
    probes: list[ProbeConfig] = field(default_factory=list)
    iso_low: float = 0.0
    iso_high: float = 0.03
    warp: float = 8.0
    sampling: int | None = None
    vtk: bool = True
    measured_values: str | None = None
    measured_points: str | None = None
    measured_force: float | None = None
    reference_curve: str | None = None
    reference_failure_load: float | None = None


@dataclass
class SweepConfig:
    parameter: str = "l0"
    values: list[float] = field(default_factory=list)
    reference_curve: str | None = None
    reference_failure_load: float | None = None
    metric: str = "failure_load"


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    sweep: SweepConfig | None = None
    base_dir: str = field(default=".", compare=False, repr=False)

    def path(self, p):
        """Resolve a config path relative to the config file's directory."""
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def output_dir(self, override=None):
        return override if override is not None else self.path(self.paths.output_dir)


SWEEP_PARAMETERS = ("l0", "beta", "gc0")
SWEEP_METRICS = ("failure_load", "curve_rmse")
PATH_KEYS = {
    ("paths", "image"), ("paths", "mask"),
    ("postproc", "measured_values"), ("postproc", "measured_points"), ("postproc", "reference_curve"),
    ("sweep", "reference_curve"),
}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _line_map(node, path=(), out=None):
    """Map key paths (tuples of str/int) to 1-based source lines."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
            out[key] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


class _Ctx:
    def __init__(self, source, lines):
        self.source = source
        self.lines = lines

    def line(self, path):
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        return self.lines.get(p)

    def error(self, path, msg):
        dotted = ".".join(str(x) if isinstance(x, str) else f"[{x}]" for x in path).replace(".[", "[")
        line = self.line(path)
        where = f"{self.source}:{line}" if line is not None else self.source
        return ConfigError(f"{where}: {dotted or '<root>'}: {msg}")


def _is_dataclass_type(t):
    return isinstance(t, type) and dataclasses.is_dataclass(t)


def _convert(value, tp, path, ctx):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], path, ctx)
    if _is_dataclass_type(tp):
        return _build(tp, value, path, ctx)
    if origin is list:
        if not isinstance(value, list):
            raise ctx.error(path, f"expected a list, got {type(value).__name__}")
        return [_convert(v, args[0], path + (i,), ctx) for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ctx.error(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ctx.error(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ctx.error(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ctx.error(path, f"expected a string, got {value!r}")
        return value
    raise ctx.error(path, f"unsupported type {tp}")


def _build(cls, data, path, ctx):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ctx.error(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.compare]
    for key in data:
        if key not in names:
            raise ctx.error(tuple(path) + (key,), f"unknown key (allowed: {', '.join(names)})")
    kwargs = {k: _convert(v, hints[k], tuple(path) + (k,), ctx) for k, v in data.items()}
    return cls(**kwargs)


def parse_config(text, source="<config>", base_dir=".", check_paths=True) -> RunConfig:
    """Parse YAML text, check structure and values, and (optionally) referenced paths."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    ctx = _Ctx(source, _line_map(node) if node is not None else {})
    cfg = _build(RunConfig, data, (), ctx)
    cfg.base_dir = base_dir
    validate(cfg, ctx, check_paths)
    return cfg


def load_config(path, check_paths=True) -> RunConfig:
    with open(path) as f:
        text = f.read()
    return parse_config(text, source=os.fspath(path), base_dir=os.path.dirname(os.path.abspath(path)),
                        check_paths=check_paths)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(cfg: RunConfig, ctx: _Ctx | None = None, check_paths=True):
    ctx = ctx or _Ctx("<config>", {})

    def need(cond, path, msg):
        if not cond:
            raise ctx.error(path, msg)

    d = cfg.discretization
    need(d.h > 0, ("discretization", "h"), "cell size must be positive")
    need(d.p >= 1, ("discretization", "p"), "polynomial order must be >= 1")
    need(d.depth >= 0, ("discretization", "depth"), "subdivision depth must be >= 0")
    need(d.basis in ("bspline", "legendre"), ("discretization", "basis"), "must be 'bspline' or 'legendre'")
    need(0 < d.alpha_fcm < 1, ("discretization", "alpha_fcm"), "must lie in (0, 1)")
    m = cfg.material
    need(m.gc0 > 0, ("material", "gc0"), "must be positive")
    need(m.e0 > 0, ("material", "e0"), "must be positive")
    need(m.beta > 0, ("material", "beta"), "must be positive")
    need(0 < m.nu < 0.5, ("material", "nu"), "Poisson ratio must lie in (0, 0.5)")
    need(0 < m.eta < 0.1, ("material", "eta"), "residual stiffness must satisfy 0 < eta << 1")
    need((m.hu_slope is None) == (m.hu_intercept is None), ("material", "hu_slope"),
         "hu_slope and hu_intercept must be given together")
    s = cfg.solver
    need(s.l0 > 0, ("solver", "l0"), "must be positive")
    need(s.eps_stag > 0, ("solver", "eps_stag"), "must be positive")
    need(s.n_stag >= 1, ("solver", "n_stag"), "must be >= 1")
    need(s.rtol > 0, ("solver", "rtol"), "must be positive")
    need(s.linear_solver in ("auto", "direct", "cg"), ("solver", "linear_solver"), "must be auto, direct or cg")
    need(s.penalty_factor > 0, ("solver", "penalty_factor"), "must be positive")
    need(s.branch_iterations >= 1, ("solver", "branch_iterations"), "must be >= 1")
    sc = s.schedule
    need(sc.u_large >= sc.u_med >= sc.u_small > 0, ("solver", "schedule", "u_large"),
         "steps must satisfy u_large >= u_med >= u_small > 0")
    need(sc.target > 0, ("solver", "schedule", "target"), "must be positive")
    need(0 <= sc.drop_fraction < 1, ("solver", "schedule", "drop_fraction"), "must lie in [0, 1)")
    need(sc.max_steps >= 1, ("solver", "schedule", "max_steps"), "must be >= 1")
    b = cfg.boundary
    names = []
    for i, c in enumerate(b.conditions):
        p = ("boundary", "conditions", i)
        need(c.name != "", p + ("name",), "every condition needs a name")
        need(c.name not in names, p + ("name",), f"duplicate condition name {c.name!r}")
        names.append(c.name)
        need(c.kind in BC_KINDS, p + ("kind",), f"must be one of {', '.join(BC_KINDS)}")
        regions = [k for k in ("face", "plane", "surface") if getattr(c, k) is not None]
        need(len(regions) == 1, p, "give exactly one of face, plane or surface")
        if c.face is not None:
            need(c.face in FACES, p + ("face",), f"must be one of {', '.join(FACES)}")
        if c.plane is not None:
            need(len(c.plane) == 2 and float(c.plane[0]).is_integer() and 0 <= c.plane[0] <= 2,
                 p + ("plane",), "must be [axis (0, 1 or 2), coordinate]")
        if c.bounds is not None:
            need(len(c.bounds) == 2 and all(len(x) == 3 for x in c.bounds), p + ("bounds",),
                 "must be [[xmin, ymin, zmin], [xmax, ymax, zmax]]")
        if c.kind == "displacement":
            need(c.component in (0, 1, 2), p + ("component",), "displacement conditions need component 0, 1 or 2")
        if c.kind == "seed":
            need(c.plane is not None, p + ("kind",), "crack seeds are defined on a plane (with optional bounds)")
            need(c.name != b.load, p + ("kind",), "the load condition cannot be a crack seed")
        if c.penalty is not None:
            need(c.penalty > 0, p + ("penalty",), "penalty must be positive")
        if check_paths and c.surface is not None:
            need(os.path.exists(cfg.path(c.surface)), p + ("surface",), f"file not found: {cfg.path(c.surface)}")
    if b.conditions:
        need(b.load in names, ("boundary", "load"), f"no condition named {b.load!r}")
    need(b.load_component in (0, 1, 2), ("boundary", "load_component"), "must be 0, 1 or 2")
    pp = cfg.postproc
    for i, pr in enumerate(pp.probes):
        need(len(pr.center) == 3, ("postproc", "probes", i, "center"), "must be a point [x, y, z]")
        need(pr.radius >= 0, ("postproc", "probes", i, "radius"), "must be >= 0")
    need(0 <= pp.iso_low < pp.iso_high <= 1, ("postproc", "iso_low"), "need 0 <= iso_low < iso_high <= 1")
    if pp.sampling is not None:
        need(pp.sampling >= 1, ("postproc", "sampling"), "must be >= 1")
    need((pp.measured_values is None) == (pp.measured_points is None), ("postproc", "measured_values"),
         "measured_values and measured_points must be given together")
    if cfg.sweep is not None:
        sw = cfg.sweep
        need(sw.parameter in SWEEP_PARAMETERS, ("sweep", "parameter"), f"must be one of {', '.join(SWEEP_PARAMETERS)}")
        need(len(sw.values) >= 1, ("sweep", "values"), "candidate list must not be empty")
        need(sw.metric in SWEEP_METRICS, ("sweep", "metric"), f"must be one of {', '.join(SWEEP_METRICS)}")
        need(sw.reference_curve is not None or sw.reference_failure_load is not None, ("sweep",),
             "give reference_curve or reference_failure_load")
        if sw.metric == "curve_rmse":
            need(sw.reference_curve is not None, ("sweep", "reference_curve"), "curve_rmse needs a reference curve")
        if sw.parameter == "l0":
            for i, v in enumerate(sw.values):
                need(v >= d.h, ("sweep", "values", i), f"l0={v} is below the cell size h={d.h}")
    if check_paths:
        for sec, key in sorted(PATH_KEYS):
            block = getattr(cfg, sec)
            if block is None:
                continue
            val = getattr(block, key)
            if val is not None:
                need(os.path.exists(cfg.path(val)), (sec, key), f"file not found: {cfg.path(val)}")


def require_image(cfg: RunConfig, source="<config>"):
    if cfg.paths.image is None:
        raise ConfigError(f"{source}: paths.image: required key is missing")


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        if not f.compare:
            continue
        v = getattr(cfg, f.name)
        if v is None:
            continue
        out[f.name] = dataclasses.asdict(v)
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def merge_blocks(base: dict, extra: dict) -> dict:
    """Recursive dict merge (``extra`` wins), used to build configs from phantom presets."""
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_blocks(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(data: dict, base_dir=".", check_paths=False) -> RunConfig:
    return parse_config(yaml.safe_dump(data, sort_keys=False), "<dict>", base_dir, check_paths)
