"""Synthetic scenes with exact ground truth: single scan pairs and timed trajectories with IMU."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .manifold import Pose, se3_exp, se3_log

GRAVITY = np.array([0.0, 0.0, -9.81])

KINDS = ("corridor", "plane", "tunnel", "box", "blobs")

# corridor cross-section: walls at y = +-1.5 from z = -1 to z = 2, floor at z = -1
_CORRIDOR_HALF_WIDTH = 1.5
_CORRIDOR_Z = (-1.0, 2.0)
_TUNNEL_RADIUS = 2.0
_BLOB_COUNT = 12


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "box"
    extent: float | None = None
    density: float = 100.0
    noise_sigma: float = 0.0
    offset: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    seed: int = 0
    resample_source: bool = True

    def __post_init__(self):
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scene kind {self.kind!r}; expected one of {KINDS}")
        if not self.density > 0:
            raise ConfigError(f"scene density must be > 0, got {self.density}")
        if self.extent is not None and not self.extent > 0:
            raise ConfigError(f"scene extent must be > 0, got {self.extent}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if len(self.offset) != 6:
            raise ConfigError("offset must be a 6-vector twist")

    @property
    def size(self) -> float:
        if self.extent is not None:
            return float(self.extent)
        return {"corridor": 40.0, "plane": 10.0, "tunnel": 20.0, "box": 4.0, "blobs": 8.0}[self.kind]

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ScenePair:
    source: np.ndarray
    target: np.ndarray
    gt: Pose
    source_clean: np.ndarray
    spec: SceneSpec
    target_clean: np.ndarray | None = None


# ------------------------------------------------------------ surfaces


def _rect(rng, n, origin, u, v):
    """n uniform samples on the parallelogram origin + s u + t v."""
    st = rng.random((n, 2))
    return origin + st[:, :1] * u + st[:, 1:] * v


def _count(area: float, density: float) -> int:
    return max(int(round(area * density)), 1)


def _blob_layout(spec: SceneSpec):
    # blob geometry depends only on the seed, never on the sampling stream
    rng = np.random.default_rng([spec.seed, 7])
    L = spec.size
    centers = (rng.random((_BLOB_COUNT, 3)) - 0.5) * L
    radii = 0.3 + 0.7 * rng.random(_BLOB_COUNT)
    return centers, radii


def sample_surface(spec: SceneSpec, rng: np.random.Generator, density: float | None = None) -> np.ndarray:
    """Noise-free points drawn uniformly (per area) from the scene geometry."""
    d = spec.density if density is None else density
    L = spec.size
    if spec.kind == "corridor":
        w, (z0, z1) = _CORRIDOR_HALF_WIDTH, _CORRIDOR_Z
        ex, ez, ey = np.array([L, 0, 0]), np.array([0, 0, z1 - z0]), np.array([0, 2 * w, 0])
        parts = [
            _rect(rng, _count(L * (z1 - z0), d), np.array([-L / 2, -w, z0]), ex, ez),
            _rect(rng, _count(L * (z1 - z0), d), np.array([-L / 2, w, z0]), ex, ez),
            _rect(rng, _count(L * 2 * w, d), np.array([-L / 2, -w, z0]), ex, ey),
        ]
        return np.vstack(parts)
    if spec.kind == "plane":
        return _rect(rng, _count(L * L, d), np.array([-L / 2, -L / 2, 0.0]), np.array([L, 0, 0]), np.array([0, L, 0]))
    if spec.kind == "tunnel":
        r = _TUNNEL_RADIUS
        n = _count(2 * np.pi * r * L, d)
        u = rng.random((n, 2))
        ang = 2 * np.pi * u[:, 1]
        return np.column_stack([(u[:, 0] - 0.5) * L, r * np.cos(ang), r * np.sin(ang)])
    if spec.kind == "box":
        # closed room, L x L floor plan, 0.75 L high, centred on the origin
        a, hz = L / 2, 0.375 * L
        X, Y, Z = np.array([L, 0, 0]), np.array([0, L, 0]), np.array([0, 0, 2 * hz])
        faces = [
            (np.array([-a, -a, -hz]), X, Y),
            (np.array([-a, -a, hz]), X, Y),
            (np.array([-a, -a, -hz]), X, Z),
            (np.array([-a, a, -hz]), X, Z),
            (np.array([-a, -a, -hz]), Y, Z),
            (np.array([a, -a, -hz]), Y, Z),
        ]
        return np.vstack([_rect(rng, _count(np.linalg.norm(np.cross(u, v)), d), o, u, v) for o, u, v in faces])
    # blobs
    centers, radii = _blob_layout(spec)
    parts = []
    for c, r in zip(centers, radii):
        n = _count(4 * np.pi * r * r, d)
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        parts.append(c + r * v)
    return np.vstack(parts)


def surface_distance(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Unsigned distance from world points to the scene surface."""
    P = np.atleast_2d(points)
    L = spec.size
    if spec.kind == "corridor":
        w, (z0, z1) = _CORRIDOR_HALF_WIDTH, _CORRIDOR_Z
        dx = np.maximum(np.abs(P[:, 0]) - L / 2, 0)
        dz_wall = np.maximum(np.maximum(z0 - P[:, 2], P[:, 2] - z1), 0)
        walls = [np.sqrt((P[:, 1] - s * w) ** 2 + dx**2 + dz_wall**2) for s in (-1, 1)]
        dy = np.maximum(np.abs(P[:, 1]) - w, 0)
        floor = np.sqrt((P[:, 2] - z0) ** 2 + dx**2 + dy**2)
        return np.minimum(np.minimum(walls[0], walls[1]), floor)
    if spec.kind == "plane":
        dx = np.maximum(np.abs(P[:, 0]) - L / 2, 0)
        dy = np.maximum(np.abs(P[:, 1]) - L / 2, 0)
        return np.sqrt(P[:, 2] ** 2 + dx**2 + dy**2)
    if spec.kind == "tunnel":
        rad = np.abs(np.hypot(P[:, 1], P[:, 2]) - _TUNNEL_RADIUS)
        dx = np.maximum(np.abs(P[:, 0]) - L / 2, 0)
        return np.hypot(rad, dx)
    if spec.kind == "box":
        half = np.array([L / 2, L / 2, 0.375 * L])
        q = np.abs(P) - half
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0)
        return np.abs(outside + inside)
    centers, radii = _blob_layout(spec)
    d = np.abs(np.linalg.norm(P[:, None, :] - centers[None], axis=2) - radii[None])
    return d.min(axis=1)


def generate_pair(spec: SceneSpec) -> ScenePair:
    """Target in the world frame; source (resampled independently by default) in the gt frame.

    ``gt`` maps source coordinates into target coordinates.
    """
    rng = np.random.default_rng(spec.seed)
    gt = se3_exp(np.asarray(spec.offset))
    target_clean = sample_surface(spec, rng)
    # without resampling the source is a rigid copy of the target sample
    source_world = sample_surface(spec, rng) if spec.resample_source else target_clean
    source_clean = gt.inverse().apply(source_world)
    s = spec.noise_sigma
    target = target_clean + s * rng.standard_normal(target_clean.shape) if s > 0 else target_clean
    source = source_clean + s * rng.standard_normal(source_clean.shape) if s > 0 else source_clean
    return ScenePair(source, target, gt, source_clean, spec, target_clean)


def corridor_axis() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0])


# ---------------------------------------------------------- trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    """Timed waypoints ``(t, twist)`` where ``se3_exp(twist)`` is the body pose in the world."""

    waypoints: tuple = ((0.0, (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)),)
    duration: float | None = None
    scan_rate: float = 10.0
    imu_rate: float = 200.0
    accel_noise_density: float = 0.0
    gyro_noise_density: float = 0.0
    accel_bias_walk: float = 0.0
    gyro_bias_walk: float = 0.0
    sensor_range: float = 12.0
    scan_density: float | None = None
    shared_sample: bool = False  # scans observe the map's own points instead of a fresh sample
    seed: int = 0

    def __post_init__(self):
        wps = tuple((float(t), tuple(float(v) for v in xi)) for t, xi in self.waypoints)
        object.__setattr__(self, "waypoints", wps)
        if not wps:
            raise ConfigError("trajectory needs at least one waypoint")
        times = [t for t, _ in wps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("waypoint timestamps must be strictly increasing")
        if len(wps) == 1 and self.duration is None:
            raise ConfigError("a single-waypoint trajectory needs an explicit duration")
        if self.scan_rate <= 0 or self.imu_rate <= 0:
            raise ConfigError("rates must be positive")
        if self.sensor_range <= 0:
            raise ConfigError("sensor_range must be positive")

    @property
    def t0(self) -> float:
        return self.waypoints[0][0]

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration if self.duration is not None else self.waypoints[-1][0]


class PoseSpline:
    """Piecewise constant-twist interpolation; the body twist is constant on each segment."""

    def __init__(self, spec: TrajectorySpec):
        self.times = np.array([t for t, _ in spec.waypoints])
        self.poses = [se3_exp(np.array(xi)) for _, xi in spec.waypoints]
        self.rates = []
        for i in range(len(self.poses) - 1):
            dt = self.times[i + 1] - self.times[i]
            xi = se3_log(self.poses[i].inverse() @ self.poses[i + 1])
            self.rates.append(xi / dt)

    def _segment(self, t: float) -> int:
        if len(self.poses) == 1:
            return 0
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(i, 0), len(self.poses) - 2)

    def body_twist(self, t: float) -> np.ndarray:
        """[omega_body, v_body] (constant within a segment; zero beyond the ends)."""
        if len(self.poses) == 1 or t < self.times[0] or t > self.times[-1]:
            return np.zeros(6)
        return self.rates[self._segment(t)]

    def pose(self, t: float) -> Pose:
        if len(self.poses) == 1 or t <= self.times[0]:
            return self.poses[0]
        if t >= self.times[-1]:
            return self.poses[-1]
        i = self._segment(t)
        return self.poses[i] @ se3_exp(self.rates[i] * (t - self.times[i]))

    def velocity(self, t: float) -> np.ndarray:
        tw = self.body_twist(t)
        return self.pose(t).rotation @ tw[3:]


@dataclass
class TrajectoryData:
    scan_times: np.ndarray
    scans: list
    gt_poses: list
    imu: np.ndarray  # rows t, ax, ay, az, gx, gy, gz
    world_map: np.ndarray
    gt_velocity0: np.ndarray
    imu_bias: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))


def synthesize_imu(spline: PoseSpline, times: np.ndarray, spec: TrajectorySpec, rng) -> tuple[np.ndarray, np.ndarray]:
    n = len(times)
    rate = spec.imu_rate
    acc = np.empty((n, 3))
    gyr = np.empty((n, 3))
    for j, t in enumerate(times):
        tw = spline.body_twist(t)
        w, v = tw[:3], tw[3:]
        R = spline.pose(t).rotation
        gyr[j] = w
        # body-frame specific force: d/dt(R v) = R (w x v) for constant body twist
        acc[j] = np.cross(w, v) - R.T @ GRAVITY
    bias = np.zeros((n, 6))
    if spec.accel_bias_walk > 0 or spec.gyro_bias_walk > 0:
        steps = rng.standard_normal((n, 6)) / np.sqrt(rate)
        steps[:, :3] *= spec.accel_bias_walk
        steps[:, 3:] *= spec.gyro_bias_walk
        steps[0] = 0.0
        bias = np.cumsum(steps, axis=0)
    noise = rng.standard_normal((n, 6)) * np.sqrt(rate)
    noise[:, :3] *= spec.accel_noise_density
    noise[:, 3:] *= spec.gyro_noise_density
    acc = acc + bias[:, :3] + noise[:, :3]
    gyr = gyr + bias[:, 3:] + noise[:, 3:]
    return np.column_stack([times, acc, gyr]), bias


def _pose_rng(T: Pose, *seeds: int) -> np.random.Generator:
    key = hashlib.sha256((np.round(T.matrix(), 9) + 0.0).tobytes()).digest()
    return np.random.default_rng([*seeds, *np.frombuffer(key[:16], dtype=np.uint32).tolist()])


def generate_trajectory(spec: TrajectorySpec, scene: SceneSpec) -> TrajectoryData:
    """Scans (body frame), an IMU stream and ground-truth poses, all deterministic per seed.

    Each scan draws its own surface sample from a generator seeded by the scan pose,
    so scans taken from different poses hit different surface points (as a moving
    sensor does) while a static platform sees identical scans when the scene noise
    is zero. With ``shared_sample`` every scan observes the map's own points.
    """
    rng = np.random.default_rng([spec.seed, scene.seed])
    spline = PoseSpline(spec)
    world_map = sample_surface(scene, rng)
    scan_density = spec.scan_density if spec.scan_density is not None else scene.density

    n_scans = int(np.floor((spec.t_end - spec.t0) * spec.scan_rate + 1e-9)) + 1
    scan_times = spec.t0 + np.arange(n_scans) / spec.scan_rate
    scans, gts = [], []
    for t in scan_times:
        T = spline.pose(t)
        if spec.shared_sample:
            observed = world_map
        else:
            observed = sample_surface(scene, _pose_rng(T, spec.seed, scene.seed), scan_density)
        near = np.linalg.norm(observed - T.translation, axis=1) <= spec.sensor_range
        body = T.inverse().apply(observed[near])
        if scene.noise_sigma > 0:
            body = body + scene.noise_sigma * rng.standard_normal(body.shape)
        scans.append(body)
        gts.append(T)

    n_imu = int(np.floor((spec.t_end - spec.t0) * spec.imu_rate + 1e-9)) + 1
    imu_times = spec.t0 + np.arange(n_imu) / spec.imu_rate
    imu, bias = synthesize_imu(spline, imu_times, spec, rng)
    return TrajectoryData(scan_times, scans, gts, imu, world_map, spline.velocity(spec.t0), bias)


def line_waypoints(speed: float, duration: float, direction=(1.0, 0.0, 0.0), start=(0.0, 0.0, 0.0)) -> tuple:
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    p0 = np.asarray(start, dtype=float)
    return (
        (0.0, (0.0, 0.0, 0.0, *p0)),
        (float(duration), tuple(se3_log(Pose(np.eye(3), p0 + speed * duration * d)))),
    )


def circle_waypoints(radius: float, period: float, loops: int = 1) -> tuple:
    """Quarter-turn waypoints of a planar circle about the origin, heading tangent to it."""
    out = []
    for i in range(4 * loops + 1):
        ang = 0.5 * np.pi * i
        R = np.array([[np.cos(ang), -np.sin(ang), 0.0], [np.sin(ang), np.cos(ang), 0.0], [0.0, 0.0, 1.0]])
        p = np.array([radius * np.sin(ang), radius * (1.0 - np.cos(ang)), 0.0])
        xi = se3_log(Pose(R, p))
        out.append((period * i / 4.0, tuple(xi)))
    return tuple(out)
