"""Loosely coupled error-state Kalman filter fed by the particle scan matcher.

Error state (15): ``[dp, dv, dtheta, db_acc, db_gyro]`` with position and velocity errors
in the world frame and the attitude error on the right, ``R_true = R exp(dtheta)``.
The pose measurement observes ``[dp, dtheta]``; the scan matcher reports ``[theta, rho]``
twists, converted by :func:`twist_to_measurement`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, SingularSystemError, StreamOrderError
from .manifold import Pose, adjoint, skew, so3_exp, so3_left_jacobian, so3_left_jacobian_inv
from .pointcloud import KDTree, PointCloud
from .scenes import GRAVITY
from .stein_solver import PoseWithCovariance, SolverConfig, solve_icp

log = logging.getLogger(__name__)

P, V, TH, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))


@dataclass(frozen=True)
class NavState:
    pose: Pose
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("velocity", "bias_acc", "bias_gyro"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class FilterConfig:
    noise_mode: str = "adaptive"
    propagation: str = "imu"
    fixed_rot_var: float = 1e-5
    fixed_trans_var: float = 1e-4
    accel_noise_density: float = 0.02
    gyro_noise_density: float = 0.002
    accel_bias_walk: float = 1e-4
    gyro_bias_walk: float = 1e-5
    cv_accel_sigma: float = 0.5
    cv_gyro_sigma: float = 0.1
    init_pos_sigma: float = 0.01
    init_vel_sigma: float = 0.05
    init_rot_sigma: float = 0.005
    init_bias_acc_sigma: float = 0.01
    init_bias_gyro_sigma: float = 0.001
    align_gravity: bool = True
    gravity_samples: int = 50

    def __post_init__(self):
        if self.noise_mode not in ("adaptive", "fixed"):
            raise ConfigError(f"noise_mode must be 'adaptive' or 'fixed', got {self.noise_mode!r}")
        if self.propagation not in ("imu", "constant-velocity"):
            raise ConfigError(f"propagation must be 'imu' or 'constant-velocity', got {self.propagation!r}")
        if self.fixed_rot_var <= 0 or self.fixed_trans_var <= 0:
            raise ConfigError("fixed noise variances must be positive")
        if self.gravity_samples < 1:
            raise ConfigError("gravity_samples must be >= 1")

    def initial_covariance(self) -> np.ndarray:
        sig = np.concatenate([
            np.full(3, self.init_pos_sigma),
            np.full(3, self.init_vel_sigma),
            np.full(3, self.init_rot_sigma),
            np.full(3, self.init_bias_acc_sigma),
            np.full(3, self.init_bias_gyro_sigma),
        ])
        return np.diag(sig**2)

    def fixed_covariance(self) -> np.ndarray:
        """The fixed measurement covariance in the matcher's [theta, rho] layout."""
        return np.diag([self.fixed_rot_var] * 3 + [self.fixed_trans_var] * 3)


def observation_matrix() -> np.ndarray:
    """6x15 selector of ``[dp, dtheta]``."""
    C = np.zeros((6, 15))
    C[0:3, P] = np.eye(3)
    C[3:6, TH] = np.eye(3)
    return C


# ------------------------------------------------------- layout adapters


def _twist_to_measurement_jacobian(R: np.ndarray) -> np.ndarray:
    M = np.zeros((6, 6))
    M[0:3, 3:6] = R
    M[3:6, 0:3] = np.eye(3)
    return M


def twist_to_measurement(xi: np.ndarray, cov: np.ndarray, R_prior: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right twist ``[theta, rho]`` of the prior pose -> ``([dp_world, dtheta], covariance)``."""
    xi = np.asarray(xi, dtype=float)
    z = np.concatenate([R_prior @ so3_left_jacobian(xi[:3]) @ xi[3:], xi[:3]])
    M = _twist_to_measurement_jacobian(R_prior)
    S = M @ cov @ M.T
    return z, 0.5 * (S + S.T)


def measurement_to_twist(z: np.ndarray, cov: np.ndarray, R_prior: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    theta = z[3:]
    rho = so3_left_jacobian_inv(theta) @ R_prior.T @ z[:3]
    Minv = np.linalg.inv(_twist_to_measurement_jacobian(R_prior))
    S = Minv @ cov @ Minv.T
    return np.concatenate([theta, rho]), 0.5 * (S + S.T)


def prior_for_solver(state: NavState, cov15: np.ndarray) -> PoseWithCovariance:
    """Project the filter covariance to a 6x6 world-frame pose covariance for the matcher."""
    C = observation_matrix()
    _, body = measurement_to_twist(np.zeros(6), C @ cov15 @ C.T, state.pose.rotation)
    Ad = adjoint(state.pose)
    glob = Ad @ body @ Ad.T
    return PoseWithCovariance(state.pose, 0.5 * (glob + glob.T))


# ----------------------------------------------------------- propagation


def _check_increasing(times: np.ndarray):
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        bad = int(np.nonzero(np.diff(times) <= 0)[0][0]) + 1
        raise StreamOrderError(f"IMU timestamps not strictly increasing at sample {bad}")


def _interp(imu: np.ndarray, t) -> np.ndarray:
    """Linearly interpolated readings at time(s) ``t``, clamped at the stream ends."""
    times = imu[:, 0]
    t = np.atleast_1d(np.asarray(t, dtype=float))
    j = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
    j1 = np.minimum(j + 1, len(times) - 1)
    span = times[j1] - times[j]
    a = np.where(span > 0, (np.clip(t, times[0], times[-1]) - times[j]) / np.where(span > 0, span, 1.0), 0.0)
    out = imu[j, 1:] * (1.0 - a)[:, None] + imu[j1, 1:] * a[:, None]
    return out if out.shape[0] > 1 else out[0]


_I3 = np.eye(3)
_I15 = np.eye(15)


def imu_step(
    state: NavState, cov: np.ndarray, m0: np.ndarray, m1: np.ndarray, dt: float, cfg: FilterConfig, t_next: float | None = None
):
    """One trapezoidal step between IMU readings ``m0`` and ``m1`` (``[ax ay az gx gy gz]``)."""
    R, p, v = state.pose.rotation, state.pose.translation, state.velocity
    ba, bg = state.bias_acc, state.bias_gyro
    w = 0.5 * (m0[3:] + m1[3:]) - bg
    dR = so3_exp(w * dt)
    R1 = R @ dR
    f0, f1 = m0[:3] - ba, m1[:3] - ba
    a_w = 0.5 * (R @ f0 + R1 @ f1) + GRAVITY
    p1 = p + v * dt + 0.5 * a_w * dt * dt
    v1 = v + a_w * dt

    f_mid = 0.5 * (f0 + f1)
    F = _I15.copy()
    F[P, V] = _I3 * dt
    F[V, TH] = -R @ skew(f_mid) * dt
    F[V, BA] = -R * dt
    F[TH, TH] = dR.T
    F[TH, BG] = -_I3 * dt
    q = np.repeat([cfg.accel_noise_density**2, cfg.gyro_noise_density**2, cfg.accel_bias_walk**2, cfg.gyro_bias_walk**2], 3) * dt
    cov1 = F @ cov @ F.T
    cov1[3:, 3:] += np.diag(q)
    t1 = state.timestamp + dt if t_next is None else float(t_next)
    new = NavState(Pose(R1, p1), v1, ba, bg, t1)
    return new, 0.5 * (cov1 + cov1.T)


def propagate_imu(state: NavState, cov: np.ndarray, imu: np.ndarray, t_end: float, cfg: FilterConfig):
    """Integrate from ``state.timestamp`` to ``t_end`` over every IMU knot in between."""
    imu = np.asarray(imu, dtype=float)
    if imu.ndim != 2 or imu.shape[1] != 7 or len(imu) == 0:
        raise ValueError("IMU stream must be an (M, 7) array of t, ax, ay, az, gx, gy, gz")
    _check_increasing(imu[:, 0])
    t0 = state.timestamp
    if t_end < t0:
        raise StreamOrderError(f"cannot propagate backwards from t={t0} to t={t_end}")
    inner = imu[(imu[:, 0] > t0) & (imu[:, 0] < t_end), 0]
    knots = np.concatenate([[t0], inner, [t_end]])
    meas = np.atleast_2d(_interp(imu, knots))
    for i in range(len(knots) - 1):
        dt = knots[i + 1] - knots[i]
        if dt <= 0:
            continue
        state, cov = imu_step(state, cov, meas[i], meas[i + 1], dt, cfg, knots[i + 1])
    return state, cov


def propagate_constant_velocity(state: NavState, cov: np.ndarray, dt: float, cfg: FilterConfig):
    if dt < 0:
        raise StreamOrderError(f"negative propagation interval {dt}")
    p1 = state.pose.translation + state.velocity * dt
    F = np.eye(15)
    F[P, V] = np.eye(3) * dt
    Q = np.zeros((15, 15))
    Q[P, P] = np.eye(3) * (cfg.cv_accel_sigma**2) * dt**3 / 3.0
    Q[V, V] = np.eye(3) * cfg.cv_accel_sigma**2 * dt
    Q[TH, TH] = np.eye(3) * cfg.cv_gyro_sigma**2 * dt
    cov1 = F @ cov @ F.T + Q
    new = replace(state, pose=Pose(state.pose.rotation, p1), timestamp=state.timestamp + dt)
    return new, 0.5 * (cov1 + cov1.T)


def propagate(state: NavState, cov: np.ndarray, cfg: FilterConfig, t_end: float, imu: np.ndarray | None = None):
    if cfg.propagation == "imu" and imu is not None:
        return propagate_imu(state, cov, imu, t_end, cfg)
    return propagate_constant_velocity(state, cov, t_end - state.timestamp, cfg)


def align_gravity(accel: np.ndarray, yaw: float = 0.0) -> np.ndarray:
    """Roll and pitch from the mean specific force of a stationary platform."""
    f = np.mean(np.atleast_2d(accel), axis=0)
    roll = np.arctan2(f[1], f[2])
    pitch = np.arctan2(-f[0], np.hypot(f[1], f[2]))
    return Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()


# ---------------------------------------------------------------- update


@dataclass(frozen=True)
class UpdateResult:
    state: NavState
    covariance: np.ndarray
    gain: np.ndarray
    correction: np.ndarray


def kalman_update(state: NavState, cov: np.ndarray, z: np.ndarray, Sz: np.ndarray) -> UpdateResult:
    """Correct with a ``[dp, dtheta]`` measurement of the error state; Joseph-form covariance."""
    C = observation_matrix()
    S = C @ cov @ C.T + Sz
    S = 0.5 * (S + S.T)
    try:
        Kg = np.linalg.solve(S, C @ cov).T
    except np.linalg.LinAlgError:
        raise SingularSystemError("innovation covariance is singular") from None
    if not np.all(np.isfinite(Kg)):
        raise SingularSystemError("innovation covariance is singular")
    dx = Kg @ z
    IKC = np.eye(15) - Kg @ C
    cov1 = IKC @ cov @ IKC.T + Kg @ Sz @ Kg.T
    cov1 = 0.5 * (cov1 + cov1.T)
    pose = Pose(state.pose.rotation @ so3_exp(dx[TH]), state.pose.translation + dx[P])
    new = replace(
        state,
        pose=pose,
        velocity=state.velocity + dx[V],
        bias_acc=state.bias_acc + dx[BA],
        bias_gyro=state.bias_gyro + dx[BG],
    )
    return UpdateResult(new, cov1, Kg, dx)


def measurement_update(
    state: NavState, cov: np.ndarray, result: PoseWithCovariance, cfg: FilterConfig
) -> UpdateResult:
    """Fuse a matcher result obtained with ``state.pose`` as prior."""
    icp_cov = cfg.fixed_covariance() if cfg.noise_mode == "fixed" else result.icp_covariance
    z, Sz = twist_to_measurement(result.mean_twist, icp_cov, state.pose.rotation)
    return kalman_update(state, cov, z, Sz)


# ------------------------------------------------------------- pipeline


@dataclass
class FusionResult:
    times: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    covariances: list = field(default_factory=list)  # 6x6 pose blocks, [theta, p] order
    gain_norms: list = field(default_factory=list)
    gain_diagonals: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    states: list = field(default_factory=list)


def pose_covariance(cov15: np.ndarray) -> np.ndarray:
    """Pose block of the filter covariance as ``[dtheta, dp]``."""
    idx = np.r_[6:9, 0:3]
    return cov15[np.ix_(idx, idx)]


def run_fusion(
    scans: list,
    world_map: PointCloud,
    initial: NavState,
    solver_cfg: SolverConfig,
    filter_cfg: FilterConfig,
    imu: np.ndarray | None = None,
    seed: int = 0,
    initial_cov: np.ndarray | None = None,
) -> FusionResult:
    """Process ``scans`` (a list of ``PointCloud`` with timestamps) in order.

    Each scan is matched against ``world_map`` from the propagated state and fused.
    """
    times = [s.timestamp for s in scans]
    if any(t is None for t in times):
        raise ValueError("every scan needs a timestamp")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise StreamOrderError("scan timestamps must be strictly increasing")
    if filter_cfg.propagation == "imu" and imu is None:
        raise ConfigError("IMU propagation selected but no IMU stream given")
    use_imu = filter_cfg.propagation == "imu"
    if use_imu:
        imu = np.asarray(imu, dtype=float)
        _check_increasing(imu[:, 0])
        if times[0] < imu[0, 0] or times[-1] > imu[-1, 0]:
            raise StreamOrderError("scan timestamps fall outside the IMU span")

    state = initial
    if use_imu and filter_cfg.align_gravity:
        yaw = Rotation.from_matrix(state.pose.rotation).as_euler("ZYX")[0]
        R0 = align_gravity(imu[: filter_cfg.gravity_samples, 1:4], yaw)
        state = replace(state, pose=Pose(R0, state.pose.translation))
    cov = filter_cfg.initial_covariance() if initial_cov is None else np.array(initial_cov, dtype=float)
    tree = KDTree(world_map.points)
    out = FusionResult()
    for i, scan in enumerate(scans):
        if scan.timestamp < state.timestamp:
            raise StreamOrderError(f"scan {i} at t={scan.timestamp} precedes filter time {state.timestamp}")
        if scan.timestamp > state.timestamp:
            state, cov = propagate(state, cov, filter_cfg, scan.timestamp, imu if use_imu else None)
        prior = prior_for_solver(state, cov)
        result = solve_icp(prior, scan, world_map, solver_cfg, seed=seed + i, target_tree=tree)
        upd = measurement_update(state, cov, result, filter_cfg)
        state, cov = upd.state, upd.covariance
        out.times.append(scan.timestamp)
        out.poses.append(state.pose)
        out.covariances.append(pose_covariance(cov))
        out.gain_norms.append(float(np.linalg.norm(upd.gain)))
        out.gain_diagonals.append(np.diag(observation_matrix() @ upd.gain))
        out.iterations.append(result.iterations)
        out.states.append(state)
        log.debug("scan %d t=%.3f iterations=%d |K|=%.3g", i, scan.timestamp, result.iterations, out.gain_norms[-1])
    return out


def initial_state(pose: Pose | None = None, velocity=None, t0: float = 0.0) -> NavState:
    return NavState(pose or Pose.identity(), np.zeros(3) if velocity is None else velocity, timestamp=t0)


