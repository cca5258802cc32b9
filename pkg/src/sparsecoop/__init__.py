"""Sparse cooperative 3D detection toolkit: geometry, sparse coordinates,
pose/temporal/spatial alignment, message format, simulation and evaluation."""

from .geometry import BBox, Pose, TimedPointCloud, bev_iou, compose_pose, invert_pose, iou_3d, relative_pose

__all__ = ["BBox", "Pose", "TimedPointCloud", "bev_iou", "compose_pose", "invert_pose", "iou_3d", "relative_pose"]
