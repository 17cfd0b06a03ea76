"""Point-cluster lidar bundle adjustment."""

__version__ = "0.1.0"

from .ba_problem import (BAProblem, DerivativeBundle, Feature, aggregate_world_cluster,
                         assemble, feature_cost, feature_derivatives, total_cost)
from .core_geom import EigenDecomp3, Pose, boxplus, skew, so3_exp, so3_log, sym_eig3
from .point_cluster import (ClusterNoise, PointCluster, cluster_from_points,
                            cluster_noise_from_points, merge, scatter, transform)
from .simulator import build_preset, scene_to_problem
from .solver import SolveReport, SolverOptions, effective_iterations, gauge_reduce, solve
from .uncertainty import (PoseCovariance, align_to_first, nees, normalized_nees,
                          pose_covariance, pose_error)

__all__ = [
    "BAProblem", "ClusterNoise", "DerivativeBundle", "EigenDecomp3", "Feature",
    "PointCluster", "Pose", "PoseCovariance", "SolveReport", "SolverOptions",
    "aggregate_world_cluster", "align_to_first", "assemble", "boxplus", "build_preset",
    "cluster_from_points", "cluster_noise_from_points", "effective_iterations",
    "feature_cost", "feature_derivatives", "gauge_reduce", "merge", "nees", "normalized_nees",
    "pose_covariance", "pose_error", "scatter", "scene_to_problem", "skew", "so3_exp",
    "so3_log", "solve", "sym_eig3", "total_cost", "transform",
]
