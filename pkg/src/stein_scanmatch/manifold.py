"""SO(3)/SE(3) primitives.

Twists are ordered rotation-first, ``xi = [theta_x, theta_y, theta_z, x, y, z]``,
and pose updates compose on the right: ``T <- T @ exp(xi)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8
_NEAR_PI_TRACE = -1.0 + 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix ``[v]x``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula. Norms above pi are accepted and wrap naturally."""
    omega = np.asarray(omega, dtype=float)
    angle = float(np.linalg.norm(omega))
    W = skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    s = np.sin(angle) / angle
    # 1 - cos(a) written as 2 sin^2(a/2) to avoid cancellation
    c = 2.0 * np.sin(0.5 * angle) ** 2 / angle**2
    return np.eye(3) + s * W + c * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal axis-angle vector of a rotation matrix (norm in [0, pi])."""
    R = np.asarray(R, dtype=float)
    tr = float(np.trace(R))
    w = vee(R - R.T)  # = 2 sin(a) * axis
    sin_a = 0.5 * float(np.linalg.norm(w))
    cos_a = 0.5 * (tr - 1.0)
    angle = float(np.arctan2(sin_a, cos_a))

    if tr < _NEAR_PI_TRACE:
        # Rodrigues inversion is singular here; take the axis from the
        # symmetric part B = cos(a) I + (1 - cos(a)) a a^T.
        B = 0.5 * (R + R.T)
        aat = (B - cos_a * np.eye(3)) / (1.0 - cos_a)
        i = int(np.argmax(np.diag(aat)))
        axis = aat[:, i] / np.sqrt(max(aat[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if float(axis @ w) < 0.0:
            axis = -axis
        return angle * axis

    if angle < _SMALL_ANGLE:
        return 0.5 * w
    return (angle / (2.0 * sin_a)) * w


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    angle = float(np.linalg.norm(omega))
    W = skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    a2 = angle * angle
    c1 = 2.0 * np.sin(0.5 * angle) ** 2 / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * W + c2 * (W @ W)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    angle = float(np.linalg.norm(omega))
    W = skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    half = 0.5 * angle
    coef = (1.0 - half / np.tan(half)) / (angle * angle)
    return np.eye(3) - 0.5 * W + coef * (W @ W)


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project onto SO(3) via SVD. Not used inside solver loops."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + p``. Arrays are stored read-only."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        p = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(p))):
            raise ValueError("pose contains non-finite values")
        R.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", p)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or a stack of points (N, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(np.linalg.norm(R.T @ R - np.eye(3)))


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float)
    theta, rho = xi[:3], xi[3:]
    return Pose(so3_exp(theta), so3_left_jacobian(theta) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    theta = so3_log(pose.rotation)
    rho = so3_left_jacobian_inv(theta) @ pose.translation
    return np.concatenate([theta, rho])


def pose_boxplus(base: Pose, delta: np.ndarray) -> Pose:
    """Right-multiplicative update ``base @ exp(delta)``."""
    return base @ se3_exp(delta)


def twist_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``log(exp(a) exp(b))``."""
    return se3_log(se3_exp(a) @ se3_exp(b))


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint in [theta, p] ordering: ``T exp(xi) T^-1 = exp(Ad xi)``."""
    R, p = pose.rotation, pose.translation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(p) @ R
    return Ad


def se3_hat(xi: np.ndarray) -> np.ndarray:
    """4x4 Lie-algebra matrix of a twist."""
    X = np.zeros((4, 4))
    X[:3, :3] = skew(xi[:3])
    X[:3, 3] = xi[3:]
    return X


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    if q[3] < 0:
        q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()
