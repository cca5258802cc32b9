"""Scenario/experiment configuration files (YAML) with line-level diagnostics.

Top-level keys::

    name, seed, duration, frame_period
    lidar:       height, rings, inclination_deg [lo, hi], azimuth_step_deg, sweep_time, max_range
    error_model: epsilon
    latency_ms:  value, or {min, max} for uniform random latency
    generator:   layout, n_vehicles, n_agents, speed_range, agent_spacing, sync
    vehicles:    explicit list of {x, y, yaw_deg, l, w, h, vx, vy, yaw_rate}
    agents:      explicit list of {id, vehicle | pose: {x, y, yaw_deg}, phase}
    pipeline:    PipelineConfig fields
    sweep:       {epsilon: spec, latency_ms: spec}

Either ``generator`` or ``vehicles`` + ``agents`` describes the scene.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .augment import LidarModel
from .geometry import BBox, Pose
from .pipeline import VARIANTS, PipelineConfig
from .sim import Agent, ErrorModel, LatencyModel, Scenario, Vehicle, generate_scenario


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None, field_path: str | None = None) -> None:
        where = source if line is None else f"{source}:{line}"
        what = f" field '{field_path}':" if field_path else ""
        super().__init__(f"{where}:{what} {message}")
        self.message = message
        self.line = line
        self.field_path = field_path


class _MarkedDict(dict):
    line: int = 0
    key_lines: dict


class _MarkedList(list):
    line: int = 0
    item_lines: list


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: _Loader, node: yaml.MappingNode) -> _MarkedDict:
    loader.flatten_mapping(node)
    out = _MarkedDict()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", line=k_node.start_mark.line + 1)
        out[key] = loader.construct_object(v_node, deep=True)
        out.key_lines[key] = k_node.start_mark.line + 1
    return out


def _construct_sequence(loader: _Loader, node: yaml.SequenceNode) -> _MarkedList:
    out = _MarkedList(loader.construct_object(v, deep=True) for v in node.value)
    out.line = node.start_mark.line + 1
    out.item_lines = [v.start_mark.line + 1 for v in node.value]
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_sequence)


@dataclass(frozen=True)
class Sweep:
    epsilon: tuple[float, ...] = (0.0,)
    latency_ms: tuple[float, ...] = (0.0,)


@dataclass
class ExperimentConfig:
    name: str
    scenario: Scenario
    pipeline: PipelineConfig
    sweep: Sweep
    latency_range: tuple[float, float] | None
    resolved: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


class _Reader:
    """Typed field access that reports the source line of failures."""

    def __init__(self, source: str) -> None:
        self.source = source

    def fail(self, msg: str, container=None, key=None, path: str | None = None):
        line = None
        if isinstance(container, _MarkedDict):
            line = container.key_lines.get(key, container.line)
        elif isinstance(container, _MarkedList):
            line = container.item_lines[key] if isinstance(key, int) and key < len(container.item_lines) else container.line
        raise ConfigError(msg, self.source, line, path)

    def section(self, d: dict, key: str, path: str, required: bool = False) -> _MarkedDict:
        if key not in d:
            if required:
                self.fail("missing required section", d, key, path)
            empty = _MarkedDict()
            empty.line = getattr(d, "line", None)
            empty.key_lines = {}
            return empty
        v = d[key]
        if not isinstance(v, dict):
            self.fail("expected a mapping", d, key, path)
        return v

    def check_keys(self, d: dict, allowed: set[str], path: str) -> None:
        for k in d:
            if k not in allowed:
                self.fail(f"unknown key (allowed: {', '.join(sorted(allowed))})", d, k, f"{path}.{k}" if path else str(k))

    def number(self, d: dict, key: str, path: str, default=None, lo=None, hi=None, integer: bool = False):
        if key not in d:
            if default is None:
                self.fail("missing required field", d, key, path)
            return default
        v = d[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"expected a number, got {v!r}", d, key, path)
        if integer and not (isinstance(v, int) or float(v).is_integer()):
            self.fail(f"expected an integer, got {v!r}", d, key, path)
        if not math.isfinite(float(v)):
            self.fail("must be finite", d, key, path)
        if lo is not None and v < lo:
            self.fail(f"must be >= {lo}, got {v}", d, key, path)
        if hi is not None and v > hi:
            self.fail(f"must be <= {hi}, got {v}", d, key, path)
        return int(v) if integer else float(v)

    def boolean(self, d: dict, key: str, path: str, default: bool) -> bool:
        if key not in d:
            return default
        if not isinstance(d[key], bool):
            self.fail(f"expected true/false, got {d[key]!r}", d, key, path)
        return d[key]

    def string(self, d: dict, key: str, path: str, default: str | None = None, choices=None) -> str:
        if key not in d:
            if default is None:
                self.fail("missing required field", d, key, path)
            return default
        v = d[key]
        if not isinstance(v, str):
            self.fail(f"expected a string, got {v!r}", d, key, path)
        if choices is not None and v not in choices:
            self.fail(f"must be one of {', '.join(choices)}, got {v!r}", d, key, path)
        return v

    def numbers(self, d: dict, key: str, path: str, default, length: int | None = None) -> tuple[float, ...]:
        if key not in d:
            return tuple(default)
        v = d[key]
        if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            self.fail("expected a list of numbers", d, key, path)
        if length is not None and len(v) != length:
            self.fail(f"expected {length} numbers, got {len(v)}", d, key, path)
        return tuple(float(x) for x in v)


def parse_range_spec(spec: str | float | int, what: str = "value") -> tuple[float, ...]:
    """``v``, ``a:b:step`` (inclusive) or ``v1,v2,...``."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return (float(spec),)
    text = str(spec).strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            a, b, step = parts
            if step <= 0 or b < a:
                raise ValueError
            n = int(math.floor((b - a) / step + 1e-9)) + 1
            return tuple(round(a + i * step, 10) for i in range(n))
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise ValueError(f"invalid {what} spec {spec!r}: expected v, a:b:step or v1,v2") from None


TOP_KEYS = {"name", "seed", "duration", "frame_period", "lidar", "error_model", "latency_ms", "generator", "vehicles", "agents", "pipeline", "sweep"}
LIDAR_KEYS = {"height", "rings", "inclination_deg", "azimuth_step_deg", "sweep_time", "max_range"}
GEN_KEYS = {"layout", "n_vehicles", "n_agents", "speed_range", "agent_spacing", "sync"}
VEHICLE_KEYS = {"x", "y", "yaw_deg", "l", "w", "h", "vx", "vy", "yaw_rate"}
AGENT_KEYS = {"id", "vehicle", "pose", "phase"}
PIPELINE_KEYS = {
    "ego_id", "cpm_threshold", "sorting", "fsa", "fsa_spacing", "top_k", "feature_width", "grid_res", "knn",
    "variants", "iou_thresholds", "metrics", "eval_start_frame", "range_x", "range_y", "min_visible_points",
    "merge_radius", "size_thresholds", "grid_report",
}


def builtin_scenarios() -> list[str]:
    root = resources.files("sparsecoop") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_scenario_path(name_or_path: str) -> tuple[str, str]:
    """Return (source label, text) for a file path or a built-in scenario name."""
    p = Path(name_or_path)
    if p.exists():
        return str(p), p.read_text()
    stem = p.name[:-5] if p.name.endswith(".yaml") else p.name
    root = resources.files("sparsecoop") / "scenarios" / f"{stem}.yaml"
    if root.is_file():
        return f"<builtin:{stem}>", root.read_text()
    raise ConfigError(f"scenario file not found (built-ins: {', '.join(builtin_scenarios())})", name_or_path)


def load_experiment(path: str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    source, text = resolve_scenario_path(path)
    return parse_experiment(text, source, overrides)


def parse_experiment(text: str, source: str = "<config>", overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    overrides = overrides or {}
    try:
        doc = yaml.load(text, Loader=_Loader)
    except ConfigError as exc:
        raise ConfigError(exc.message, source, exc.line) from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source, None if mark is None else mark.line + 1) from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping", source, 1)
    r = _Reader(source)
    r.check_keys(doc, TOP_KEYS, "")

    name = r.string(doc, "name", "name", default=Path(source).stem.strip("<>").replace("builtin:", ""))
    seed = overrides.get("seed")
    if seed is None:
        seed = r.number(doc, "seed", "seed", lo=0, integer=True)
    if not 0 <= int(seed) < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", source, None, "seed")
    seed = int(seed)
    duration = r.number(doc, "duration", "duration", default=0.8, lo=1e-6)
    period = r.number(doc, "frame_period", "frame_period", default=0.1, lo=1e-6)

    ld = r.section(doc, "lidar", "lidar")
    r.check_keys(ld, LIDAR_KEYS, "lidar")
    incl = r.numbers(ld, "inclination_deg", "lidar.inclination_deg", (-24.8, 2.0), length=2)
    if incl[1] <= incl[0]:
        r.fail("upper inclination must exceed lower", ld, "inclination_deg", "lidar.inclination_deg")
    rings = r.number(ld, "rings", "lidar.rings", default=64, lo=2, integer=True)
    lidar = LidarModel(
        height_h=r.number(ld, "height", "lidar.height", default=1.9, lo=0.1),
        ring_inclinations=tuple(np.deg2rad(np.linspace(incl[0], incl[1], rings)).tolist()),
        azimuth_step=math.radians(r.number(ld, "azimuth_step_deg", "lidar.azimuth_step_deg", default=0.2, lo=0.01, hi=10)),
        sweep_time=r.number(ld, "sweep_time", "lidar.sweep_time", default=0.1, lo=1e-4),
        max_range=r.number(ld, "max_range", "lidar.max_range", default=150.0, lo=1.0),
    )

    em = r.section(doc, "error_model", "error_model")
    r.check_keys(em, {"epsilon"}, "error_model")
    eps = r.number(em, "epsilon", "error_model.epsilon", default=0.0, lo=0.0, hi=1.0)

    latency_range = None
    lat_fixed = 0.0
    if "latency_ms" in doc:
        lv = doc["latency_ms"]
        if isinstance(lv, dict):
            r.check_keys(lv, {"min", "max"}, "latency_ms")
            lo_ms = r.number(lv, "min", "latency_ms.min", lo=0)
            hi_ms = r.number(lv, "max", "latency_ms.max", lo=0)
            if hi_ms < lo_ms:
                r.fail("max must be >= min", lv, "max", "latency_ms.max")
            latency_range = (lo_ms, hi_ms)
        else:
            lat_fixed = r.number(doc, "latency_ms", "latency_ms", lo=0)

    has_gen = "generator" in doc
    has_explicit = "vehicles" in doc or "agents" in doc
    if has_gen == has_explicit:
        raise ConfigError("give either 'generator' or explicit 'vehicles' and 'agents'", source, doc.line)
    if has_gen:
        g = r.section(doc, "generator", "generator")
        r.check_keys(g, GEN_KEYS, "generator")
        speed = r.numbers(g, "speed_range", "generator.speed_range", (0.0, 12.0), length=2)
        spacing = r.numbers(g, "agent_spacing", "generator.agent_spacing", (15.0, 40.0), length=2)
        scene = generate_scenario(
            seed,
            n_vehicles=r.number(g, "n_vehicles", "generator.n_vehicles", default=30, lo=0, integer=True),
            n_agents=r.number(g, "n_agents", "generator.n_agents", default=2, lo=1, hi=8, integer=True),
            layout=r.string(g, "layout", "generator.layout", default="highway", choices=("highway", "intersection")),
            speed_range=speed,
            agent_spacing=spacing,
            duration=duration,
            frame_period=period,
            lidar=lidar,
            sync=r.boolean(g, "sync", "generator.sync", False),
        )
        scene = replace(scene, name=name)
    else:
        scene = _explicit_scene(doc, r, seed, duration, period, lidar, name)
    latency = LatencyModel(*latency_range) if latency_range else LatencyModel(lat_fixed, lat_fixed)
    scene = replace(scene, error_model=ErrorModel(eps), latency=latency)

    pcfg = _pipeline(doc, r, overrides)
    if not any(a.agent_id == pcfg.ego_id for a in scene.agents):
        raise ConfigError(f"ego_id {pcfg.ego_id} is not an agent", source, None, "pipeline.ego_id")

    sw = r.section(doc, "sweep", "sweep")
    r.check_keys(sw, {"epsilon", "latency_ms"}, "sweep")
    try:
        eps_values = parse_range_spec(sw["epsilon"], "epsilon") if "epsilon" in sw else (eps,)
        lat_values = parse_range_spec(sw["latency_ms"], "latency") if "latency_ms" in sw else (lat_fixed,)
        if overrides.get("epsilon") is not None:
            eps_values = parse_range_spec(overrides["epsilon"], "epsilon")
        if overrides.get("latency_ms") is not None:
            lat_values = parse_range_spec(overrides["latency_ms"], "latency")
    except ValueError as exc:
        raise ConfigError(str(exc), source, getattr(sw, "line", None), "sweep") from None
    if any(not 0 <= e <= 1 for e in eps_values):
        raise ConfigError("epsilon values must lie in [0, 1]", source, None, "epsilon")
    if any(v < 0 for v in lat_values):
        raise ConfigError("latency values must be non-negative", source, None, "latency_ms")
    if overrides.get("latency_ms") is not None:
        latency_range = None

    exp = ExperimentConfig(name, scene, pcfg, Sweep(eps_values, lat_values), latency_range)
    exp.resolved = {
        "name": name,
        "seed": seed,
        "duration": duration,
        "frame_period": period,
        "lidar": asdict(lidar),
        "vehicles": [[*asdict(v.box).values(), *v.velocity, v.yaw_rate] for v in scene.vehicles],
        "agents": [[a.agent_id, a.vehicle, None if a.pose is None else list(a.pose.as_tuple()), a.phase] for a in scene.agents],
        "latency_range": latency_range,
        "pipeline": _pipeline_dict(pcfg),
        "sweep": {"epsilon": list(eps_values), "latency_ms": list(lat_values)},
    }
    return exp


def _pipeline_dict(p: PipelineConfig) -> dict:
    d = asdict(p)
    return json.loads(json.dumps(d))


def _explicit_scene(doc, r: _Reader, seed, duration, period, lidar, name) -> Scenario:
    vlist = doc.get("vehicles", _MarkedList())
    if not isinstance(vlist, list):
        r.fail("expected a list", doc, "vehicles", "vehicles")
    vehicles = []
    for n, v in enumerate(vlist):
        path = f"vehicles[{n}]"
        if not isinstance(v, dict):
            r.fail("expected a mapping", vlist, n, path)
        r.check_keys(v, VEHICLE_KEYS, path)
        h = r.number(v, "h", f"{path}.h", default=1.6, lo=0.1)
        box = BBox(
            r.number(v, "x", f"{path}.x"),
            r.number(v, "y", f"{path}.y"),
            h / 2,
            r.number(v, "l", f"{path}.l", default=4.5, lo=0.1),
            r.number(v, "w", f"{path}.w", default=1.9, lo=0.1),
            h,
            math.radians(r.number(v, "yaw_deg", f"{path}.yaw_deg", default=0.0)),
        )
        vel = (r.number(v, "vx", f"{path}.vx", default=0.0), r.number(v, "vy", f"{path}.vy", default=0.0))
        vehicles.append(Vehicle(box, vel, r.number(v, "yaw_rate", f"{path}.yaw_rate", default=0.0)))
    alist = doc.get("agents")
    if not isinstance(alist, list) or not alist:
        raise ConfigError("expected a non-empty list of agents", r.source, getattr(doc, "key_lines", {}).get("agents", doc.line), "agents")
    agents = []
    for n, a in enumerate(alist):
        path = f"agents[{n}]"
        if not isinstance(a, dict):
            r.fail("expected a mapping", alist, n, path)
        r.check_keys(a, AGENT_KEYS, path)
        aid = r.number(a, "id", f"{path}.id", default=n, lo=0, integer=True)
        phase = r.number(a, "phase", f"{path}.phase", default=0.0, lo=0.0)
        if ("vehicle" in a) == ("pose" in a):
            r.fail("give exactly one of 'vehicle' or 'pose'", alist, n, path)
        if "vehicle" in a:
            vid = r.number(a, "vehicle", f"{path}.vehicle", lo=0, hi=max(len(vehicles) - 1, 0), integer=True)
            if not vehicles:
                r.fail("no vehicles defined", a, "vehicle", f"{path}.vehicle")
            agents.append(Agent(aid, lidar, vehicle=vid, phase=phase))
        else:
            pd = a["pose"]
            if not isinstance(pd, dict):
                r.fail("expected a mapping", a, "pose", f"{path}.pose")
            r.check_keys(pd, {"x", "y", "yaw_deg"}, f"{path}.pose")
            pose = Pose(
                r.number(pd, "x", f"{path}.pose.x"),
                r.number(pd, "y", f"{path}.pose.y"),
                lidar.height_h,
                math.radians(r.number(pd, "yaw_deg", f"{path}.pose.yaw_deg", default=0.0)),
            )
            agents.append(Agent(aid, lidar, pose=pose, phase=phase))
    try:
        return Scenario(seed, tuple(agents), tuple(vehicles), duration, period, name=name)
    except ValueError as exc:
        raise ConfigError(str(exc), r.source, getattr(doc, "key_lines", {}).get("agents"), "agents") from None


def _pipeline(doc, r: _Reader, overrides: dict) -> PipelineConfig:
    p = r.section(doc, "pipeline", "pipeline")
    r.check_keys(p, PIPELINE_KEYS, "pipeline")
    kw: dict[str, Any] = {}
    ints = {"ego_id": 0, "top_k": 1, "feature_width": 17, "knn": 1, "eval_start_frame": 0, "min_visible_points": 1}
    for key, lo in ints.items():
        if key in p:
            kw[key] = r.number(p, key, f"pipeline.{key}", lo=lo, integer=True)
    floats = {"cpm_threshold": (0.0, 1.0), "fsa_spacing": (0.05, None), "grid_res": (0.05, None), "merge_radius": (0.0, None)}
    for key, (lo, hi) in floats.items():
        if key in p:
            kw[key] = r.number(p, key, f"pipeline.{key}", lo=lo, hi=hi)
    for key in ("fsa", "grid_report"):
        if key in p:
            kw[key] = r.boolean(p, key, f"pipeline.{key}", True)
    if "sorting" in p:
        kw["sorting"] = r.string(p, "sorting", "pipeline.sorting", choices=("global", "local"))
    for key in ("range_x", "range_y"):
        if key in p:
            kw[key] = r.numbers(p, key, f"pipeline.{key}", (), length=2)
    for key in ("iou_thresholds", "size_thresholds"):
        if key in p:
            vals = r.numbers(p, key, f"pipeline.{key}", ())
            if not vals or any(not 0 < v <= 1 for v in vals if key == "iou_thresholds") or any(not 0 <= v <= 1 for v in vals):
                r.fail("values must lie in [0, 1] (IoU thresholds in (0, 1])", p, key, f"pipeline.{key}")
            kw[key] = vals
    for key, choices in (("variants", VARIANTS), ("metrics", ("bev", "3d"))):
        if key in p:
            v = p[key]
            if not isinstance(v, list) or not v or any(x not in choices for x in v):
                r.fail(f"expected a non-empty list drawn from {', '.join(choices)}", p, key, f"pipeline.{key}")
            kw[key] = tuple(v)
    if overrides.get("cpm_threshold") is not None:
        kw["cpm_threshold"] = float(overrides["cpm_threshold"])
        if not 0 <= kw["cpm_threshold"] <= 1:
            raise ConfigError("cpm threshold must lie in [0, 1]", r.source, None, "cpm_threshold")
    if overrides.get("sorting") is not None:
        kw["sorting"] = overrides["sorting"]
    try:
        return PipelineConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc), r.source, getattr(p, "line", None), "pipeline") from None
