import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from stein_scanmatch.manifold import (
    Pose,
    adjoint,
    normalize_rotation,
    pose_boxplus,
    quaternion_to_rotation,
    rotation_to_quaternion,
    se3_exp,
    se3_hat,
    se3_log,
    skew,
    so3_exp,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    twist_compose,
    vee,
)

from conftest import random_pose, random_twist

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
vec6 = arrays(np.float64, 6, elements=finite)


def _in_ball(v, r):
    n = np.linalg.norm(v)
    return v if n < r else v * (r / n)


def test_skew_vee_roundtrip_and_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(skew(a) @ b, np.cross(a, b))
    assert np.allclose(vee(skew(a)), a)


def test_so3_exp_identity_and_quarter_turn():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))
    R = so3_exp(np.array([0.0, 0.0, np.pi / 2]))
    assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_so3_exp_matches_power_series(rng):
    w = rng.normal(size=3)
    w *= 0.3 / np.linalg.norm(w)
    W = skew(w)
    series, term = np.eye(3), np.eye(3)
    for k in range(1, 21):
        term = term @ W / k
        series = series + term
    assert np.abs(so3_exp(w) - series).max() < 1e-12


def test_so3_exp_frozen_value():
    # rotation-vector map from an independent library
    expected = np.array(
        [
            [0.9788428062071254, -0.05951997349376389, -0.1957655063893064],
            [0.03960732051223487, 0.9937772959432721, -0.10410545725138101],
            [0.20074366963468865, 0.09414913076061651, 0.9751091837730886],
        ]
    )
    assert np.abs(so3_exp(np.array([0.1, -0.2, 0.05])) - expected).max() < 1e-14


def test_so3_log_identity_and_roundtrip():
    assert np.array_equal(so3_log(np.eye(3)), np.zeros(3))
    w = np.array([0.1, -0.2, 0.05])
    assert np.abs(so3_log(so3_exp(w)) - w).max() < 1e-10


def test_so3_log_half_turn_branch():
    Rz = np.diag([-1.0, -1.0, 1.0])
    w = so3_log(Rz)
    assert np.isclose(abs(w[2]), np.pi) and np.allclose(w[:2], 0.0)
    # just inside the branch switch
    for axis in (np.array([1.0, 2.0, -0.5]), np.array([0.0, 0.0, 1.0])):
        a = axis / np.linalg.norm(axis)
        w = (np.pi - 1e-7) * a
        assert np.abs(so3_exp(so3_log(so3_exp(w))) - so3_exp(w)).max() < 1e-9


def test_small_angle_paths_are_continuous():
    for s in (1e-12, 1e-9, 1e-8, 1e-7):
        w = s * np.array([0.3, -0.4, 0.5])
        assert np.allclose(so3_log(so3_exp(w)), w, rtol=1e-6, atol=1e-20)
        assert np.allclose(so3_left_jacobian(w) @ so3_left_jacobian_inv(w), np.eye(3), atol=1e-14)


def test_se3_exp_trivial_cases():
    T = se3_exp(np.zeros(6))
    assert np.array_equal(T.matrix(), np.eye(4))
    T = se3_exp(np.array([0, 0, 0, 1.0, 2.0, 3.0]))
    assert np.array_equal(T.rotation, np.eye(3)) and np.array_equal(T.translation, [1.0, 2.0, 3.0])


def test_se3_exp_frozen_matrix_exponential():
    # 4x4 matrix exponential of the twist, from an independent implementation
    expected = np.array(
        [
            [0.9752903089530457, -0.21019170595074285, -0.06803131640494, 1.1795879925821509],
            [0.18054007669439773, 0.9357548032779189, -0.3029327134026371, -1.938879455058955],
            [0.12733457491763028, 0.28316496056507373, 0.9505806179060915, 0.26117828359729617],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    xi = np.array([0.3, -0.1, 0.2, 1.0, -2.0, 0.5])
    assert np.abs(se3_exp(xi).matrix() - expected).max() < 1e-12


def test_se3_exp_matches_expm(rng):
    for _ in range(50):
        xi = random_twist(rng)
        assert np.abs(se3_exp(xi).matrix() - expm(se3_hat(xi))).max() < 1e-9


@settings(max_examples=200, deadline=None)
@given(vec6)
def test_se3_log_roundtrip(xi):
    xi = np.concatenate([_in_ball(xi[:3], np.pi - 0.01), xi[3:]])
    assert np.abs(se3_log(se3_exp(xi)) - xi).max() < 1e-8


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_so3_exp_is_orthonormal(w):
    R = so3_exp(w)
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_boxplus(rng):
    T = random_pose(rng)
    assert np.array_equal(pose_boxplus(T, np.zeros(6)).matrix(), T.matrix())
    xi = random_twist(rng)
    assert np.allclose(pose_boxplus(Pose.identity(), xi).matrix(), se3_exp(xi).matrix(), atol=1e-15)
    assert np.abs(pose_boxplus(T, xi).matrix() - T.matrix() @ se3_exp(xi).matrix()).max() < 1e-12
    x = rng.normal(size=(10, 3))
    assert np.allclose(pose_boxplus(T, xi).apply(x), T.apply(se3_exp(xi).apply(x)))


def test_pose_inverse_and_compose(rng):
    A, B = random_pose(rng), random_pose(rng)
    assert np.allclose((A @ A.inverse()).matrix(), np.eye(4), atol=1e-14)
    assert np.allclose((A @ B).matrix(), A.matrix() @ B.matrix(), atol=1e-14)
    assert np.allclose(Pose.from_matrix(A.matrix()).matrix(), A.matrix())


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        Pose(np.eye(3), [np.nan, 0, 0])


def test_adjoint_trivial_cases(rng):
    assert np.array_equal(adjoint(Pose.identity()), np.eye(6))
    R = so3_exp(rng.normal(size=3))
    Ad = adjoint(Pose(R, np.zeros(3)))
    assert np.array_equal(Ad[:3, :3], R) and np.array_equal(Ad[3:, 3:], R)
    assert np.array_equal(Ad[:3, 3:], np.zeros((3, 3))) and np.array_equal(Ad[3:, :3], np.zeros((3, 3)))


def test_adjoint_conjugation(rng):
    T, xi = random_pose(rng), random_twist(rng, 0.5, 0.5)
    lhs = (T @ se3_exp(xi) @ T.inverse()).matrix()
    assert np.allclose(lhs, se3_exp(adjoint(T) @ xi).matrix(), atol=1e-12)


def test_twist_compose(rng):
    a, b = random_twist(rng, 0.4), random_twist(rng, 0.4)
    assert np.allclose(se3_exp(twist_compose(a, b)).matrix(), (se3_exp(a) @ se3_exp(b)).matrix(), atol=1e-12)


def test_group_closure_without_renormalization(rng):
    T = Pose.identity()
    for _ in range(10_000):
        T = T @ se3_exp(random_twist(rng, 0.5, 0.5))
    assert T.orthonormality_error() < 1e-7
    assert np.linalg.norm(normalize_rotation(T.rotation).T @ normalize_rotation(T.rotation) - np.eye(3)) < 1e-14


def test_quaternion_roundtrip(rng):
    R = so3_exp(rng.normal(size=3))
    q = rotation_to_quaternion(R)
    assert q[3] >= 0 and np.isclose(np.linalg.norm(q), 1.0)
    assert np.allclose(quaternion_to_rotation(q), R)
