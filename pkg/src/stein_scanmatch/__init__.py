"""Particle-based point-to-point scan matching on SE(3) with calibrated covariances."""

from .manifold import Pose, adjoint, pose_boxplus, se3_exp, se3_log, so3_exp, so3_log
from .pointcloud import PointCloud, build_kdtree, build_sub_targets, load_cloud, save_cloud, voxel_downsample
from .stein_solver import PoseWithCovariance, SolverConfig, solve_icp

__all__ = [
    "Pose",
    "PointCloud",
    "PoseWithCovariance",
    "SolverConfig",
    "adjoint",
    "build_kdtree",
    "build_sub_targets",
    "load_cloud",
    "pose_boxplus",
    "save_cloud",
    "se3_exp",
    "se3_log",
    "so3_exp",
    "so3_log",
    "solve_icp",
    "voxel_downsample",
]

__version__ = "0.1.0"
