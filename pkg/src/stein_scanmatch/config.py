"""Strict run configuration: YAML or JSON documents mapped onto dataclasses.

Unknown keys are rejected with their dotted path so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .fusion import FilterConfig
from .oracle_bench import OracleConfig
from .scenes import SceneSpec, TrajectorySpec, circle_waypoints, line_waypoints
from .stein_solver import SolverConfig


@dataclass(frozen=True)
class TrajectoryConfig:
    """A trajectory either from explicit waypoints or from a named shape."""

    shape: str = "line"  # line | circle | static | waypoints
    speed: float = 1.0
    duration: float = 4.0
    direction: tuple = (1.0, 0.0, 0.0)
    start: tuple = (0.0, 0.0, 0.0)
    radius: float = 5.0
    period: float = 20.0
    waypoints: tuple | None = None
    scan_rate: float = 2.0
    imu_rate: float = 200.0
    accel_noise_density: float = 0.02
    gyro_noise_density: float = 0.002
    accel_bias_walk: float = 0.0
    gyro_bias_walk: float = 0.0
    sensor_range: float = 10.0
    scan_density: float | None = None
    shared_sample: bool = False

    def __post_init__(self):
        if self.shape not in ("line", "circle", "static", "waypoints"):
            raise ConfigError(f"trajectory.shape must be line, circle, static or waypoints, got {self.shape!r}")
        if self.shape == "waypoints" and not self.waypoints:
            raise ConfigError("trajectory.waypoints required when shape is 'waypoints'")
        if self.duration <= 0:
            raise ConfigError("trajectory.duration must be positive")

    def to_spec(self, seed: int) -> TrajectorySpec:
        common = dict(
            scan_rate=self.scan_rate,
            imu_rate=self.imu_rate,
            accel_noise_density=self.accel_noise_density,
            gyro_noise_density=self.gyro_noise_density,
            accel_bias_walk=self.accel_bias_walk,
            gyro_bias_walk=self.gyro_bias_walk,
            sensor_range=self.sensor_range,
            scan_density=self.scan_density,
            shared_sample=self.shared_sample,
            seed=seed,
        )
        if self.shape == "line":
            return TrajectorySpec(waypoints=line_waypoints(self.speed, self.duration, self.direction, self.start), **common)
        if self.shape == "circle":
            return TrajectorySpec(waypoints=circle_waypoints(self.radius, self.period), **common)
        if self.shape == "static":
            wp = ((0.0, (0.0, 0.0, 0.0, *self.start)),)
            return TrajectorySpec(waypoints=wp, duration=self.duration, **common)
        wps = tuple((float(t), tuple(xi)) for t, xi in self.waypoints)
        return TrajectorySpec(waypoints=wps, **common)


@dataclass(frozen=True)
class AblationConfig:
    particle_counts: tuple = (1, 5, 30)
    seeds: tuple = (0, 1, 2, 3, 4)
    modes: tuple = ("svn", "svgd")


@dataclass(frozen=True)
class IOConfig:
    source: str | None = None
    target: str | None = None
    format: str | None = None
    voxel: float | None = None
    scan_dir: str | None = None
    imu: str | None = None
    out: str = "."


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    io: IOConfig = field(default_factory=IOConfig)


SECTIONS = {
    "solver": SolverConfig,
    "filter": FilterConfig,
    "scene": SceneSpec,
    "trajectory": TrajectoryConfig,
    "oracle": OracleConfig,
    "ablation": AblationConfig,
    "io": IOConfig,
}


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
    kwargs = {k: _tupled(v) for k, v in data.items()}
    if cls is SolverConfig and isinstance(kwargs.get("huber_delta"), str):
        if kwargs["huber_delta"].lower() != "none":
            raise ConfigError(f"{path}.huber_delta must be a number or 'none'")
        kwargs["huber_delta"] = None
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(doc: dict | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    for key in doc:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    parts = {name: _build(cls, doc.get(name), name) for name, cls in SECTIONS.items()}
    return RunConfig(seed=seed, **parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config({})
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    return parse_config(doc)


def resolved(cfg: RunConfig) -> dict:
    """Plain-data echo of every resolved setting."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Apply dotted overrides such as ``{"solver.mode": "svgd"}``; ``None`` values are skipped."""
    sections = {}
    top = {}
    for key, value in changes.items():
        if value is None:
            continue
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    new = {}
    for sec, vals in sections.items():
        try:
            new[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
        except ConfigError as exc:
            raise ConfigError(f"{sec}: {exc}") from None
    return dataclasses.replace(cfg, **new, **top)
