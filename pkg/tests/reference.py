"""Independent reference implementations used as test oracles."""

import numpy as np

from stein_scanmatch.icp_core import cloud_terms, newton_step
from stein_scanmatch.manifold import se3_exp, twist_compose
from stein_scanmatch.pointcloud import KDTree, PointCloud, build_sub_targets, nearest_in_subtarget


def fd_jacobian(pose, p, q, h=1e-6):
    """Central differences of ``(T exp(d)) p - q`` in the six twist directions."""
    J = np.zeros((3, 6))
    for j in range(6):
        d = np.zeros(6)
        d[j] = h
        ep = (pose @ se3_exp(d)).apply(p) - q
        em = (pose @ se3_exp(-d)).apply(p) - q
        J[:, j] = (ep - em) / (2 * h)
    return J


def gauss_newton_reference(prior, src, tgt, m, n_iter, huber, max_corr):
    """Plain Gauss-Newton ICP with the same restricted correspondence search; returns twist per iteration."""
    tree = KDTree(tgt)
    sub = build_sub_targets(PointCloud(src), tree, m, prior)
    xi = np.zeros(6)
    out = []
    for _ in range(n_iter):
        pose = prior @ se3_exp(xi)
        moved = pose.apply(src)
        idx = [nearest_in_subtarget(p, nb, PointCloud(tgt))[0] for p, nb in zip(moved, sub.neighbors)]
        step = newton_step(cloud_terms(pose, src, tgt[idx], huber, max_corr))
        xi = twist_compose(xi, step)
        out.append(xi)
    return np.array(out)
