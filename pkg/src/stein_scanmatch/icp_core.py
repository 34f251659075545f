"""Residuals, Jacobians, gradients and Gauss-Newton Hessians of the point-to-point loss.

Conventions: residual ``e = R p + t - q``; perturbation on the right,
``T exp(xi)`` with ``xi = [theta, rho]``. Per point,

    J = [-R [p]x, R],   b = -J^T e,   H = J^T J.

``b`` is a descent direction, so a Gauss-Newton step solves ``H dxi = b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import SingularSystemError, UnderConstrainedError
from .manifold import Pose, skew

MIN_CORRESPONDENCES = 6
_SINGULAR_EIG = 1e-12


@dataclass(frozen=True)
class PointTerms:
    residual: np.ndarray
    jacobian: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray


@dataclass(frozen=True)
class CloudTerms:
    loss: float
    gradient: np.ndarray
    hessian: np.ndarray
    n_matched: int
    score_cov: np.ndarray | None = None  # sum of w^2 (J^T e)(J^T e)^T, when requested


def point_terms(R: np.ndarray, p_src: np.ndarray, q_tgt: np.ndarray, translation=None) -> PointTerms:
    R = np.asarray(R, dtype=float)
    p = np.asarray(p_src, dtype=float)
    t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
    e = R @ p + t - np.asarray(q_tgt, dtype=float)
    J = np.hstack([-R @ skew(p), R])
    return PointTerms(e, J, -J.T @ e, J.T @ J)


def huber_weights(norms: np.ndarray, delta: float | None) -> np.ndarray:
    """IRLS weight min(1, delta/|e|). ``None`` or ``inf`` gives exactly 1."""
    if delta is None or math.isinf(delta):
        return np.ones_like(norms)
    w = np.ones_like(norms)
    big = norms > delta
    w[big] = delta / norms[big]
    return w


def _huber_loss(norms: np.ndarray, delta: float | None) -> np.ndarray:
    # twice the Huber penalty, so the unweighted case is the plain squared norm
    if delta is None or math.isinf(delta):
        return norms * norms
    return np.where(norms <= delta, norms * norms, 2.0 * delta * norms - delta * delta)


def stacked_terms(pose: Pose, src: np.ndarray, tgt: np.ndarray):
    """Residuals (N,3) and Jacobians (N,3,6) for matched point arrays."""
    R = pose.rotation
    e = src @ R.T + pose.translation - tgt
    n = src.shape[0]
    J = np.empty((n, 3, 6))
    px = np.zeros((n, 3, 3))
    px[:, 0, 1] = -src[:, 2]
    px[:, 0, 2] = src[:, 1]
    px[:, 1, 0] = src[:, 2]
    px[:, 1, 2] = -src[:, 0]
    px[:, 2, 0] = -src[:, 1]
    px[:, 2, 1] = src[:, 0]
    J[:, :, :3] = -np.einsum("ij,njk->nik", R, px)
    J[:, :, 3:] = R
    return e, J


def cloud_terms(
    pose: Pose,
    source: np.ndarray,
    target: np.ndarray,
    huber_delta: float | None = None,
    max_corr_dist: float | None = None,
    with_score_cov: bool = False,
) -> CloudTerms:
    """Sum per-point terms over matched rows ``source[i] <-> target[i]``.

    Pairs whose residual exceeds ``max_corr_dist`` are dropped first. With
    ``with_score_cov`` the outer-product sum of per-point gradients is also returned,
    the middle factor of a sandwich covariance.
    """
    src = np.asarray(getattr(source, "points", source), dtype=float)
    tgt = np.asarray(getattr(target, "points", target), dtype=float)
    if src.shape != tgt.shape:
        raise ValueError(f"matched arrays differ in shape: {src.shape} vs {tgt.shape}")
    R = pose.rotation
    e = src @ R.T + pose.translation - tgt
    norms = np.sqrt(np.einsum("ni,ni->n", e, e))
    if max_corr_dist is not None:
        keep = norms <= max_corr_dist
        if not np.all(keep):
            src, e, norms = src[keep], e[keep], norms[keep]
    n = e.shape[0]
    if n < MIN_CORRESPONDENCES:
        raise UnderConstrainedError(f"{n} correspondences, need at least {MIN_CORRESPONDENCES}")
    w = huber_weights(norms, huber_delta)

    # J^T e = [p x (R^T e), R^T e] and J^T J = [[|p|^2 I - p p^T, [p]x], [-[p]x, I]],
    # so both sums reduce to weighted moments of the source points.
    eb = e @ R
    pxe = np.cross(src, eb)
    b = np.empty(6)
    b[:3] = -(w @ pxe)
    b[3:] = -(w @ eb)
    score = None
    if with_score_cov:
        g = np.hstack([pxe, eb]) * w[:, None]
        score = g.T @ g
    ws = src * w[:, None]
    s0 = float(np.sum(w))
    s1 = ws.sum(axis=0)
    s2 = ws.T @ src
    H = np.empty((6, 6))
    H[:3, :3] = np.trace(s2) * np.eye(3) - s2
    H[:3, 3:] = skew(s1)
    H[3:, :3] = -skew(s1)
    H[3:, 3:] = s0 * np.eye(3)
    loss = float(np.sum(_huber_loss(norms, huber_delta)))
    return CloudTerms(loss, b, H, n, score)


def cloud_terms_from_pairs(pose, source, target, correspondences, huber_delta=None, max_corr_dist=None):
    """Same as ``cloud_terms`` with an explicit list of (src_index, tgt_index) pairs."""
    pairs = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
    src = np.asarray(getattr(source, "points", source))[pairs[:, 0]]
    tgt = np.asarray(getattr(target, "points", target))[pairs[:, 1]]
    return cloud_terms(pose, src, tgt, huber_delta, max_corr_dist)


def solve_spd(H: np.ndarray, b: np.ndarray, damping: float = 0.0) -> np.ndarray:
    A = np.asarray(H, dtype=float) + damping * np.eye(H.shape[0])
    A = 0.5 * (A + A.T)
    if not np.all(np.isfinite(A)) or np.linalg.eigvalsh(A)[0] < _SINGULAR_EIG:
        raise SingularSystemError("damped Hessian is singular")
    return cho_solve(cho_factor(A, lower=True), np.asarray(b, dtype=float))


def newton_step(terms: CloudTerms, damping: float = 0.0) -> np.ndarray:
    """``(H + damping I)^-1 b`` through a Cholesky factorization."""
    return solve_spd(terms.hessian, terms.gradient, damping)
