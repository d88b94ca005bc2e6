"""Uniform-yaw virtual viewpoints over the map and their renders."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config
from .core import LabeledPointCloud, Pose, yaw_rotation
from .projection import RangeImage, SemanticImage, estimate_normals, project_spherical


@dataclass(frozen=True)
class ViewpointSet:
    anchor: Pose
    poses: list          # n_viewpoints Poses sharing the anchor translation
    yaw_step: float      # radians


def make_viewpoints(anchor: Pose, cfg: Config) -> ViewpointSet:
    """Compose the anchor with yaw rotations k*2pi/N about its own position."""
    n = cfg.n_viewpoints
    step = 2.0 * math.pi / n
    # rotate about the world vertical axis through the anchor position
    poses = [Pose(yaw_rotation(k * step) @ anchor.rotation, anchor.translation)
             for k in range(n)]
    return ViewpointSet(anchor, poses, step)


def crop_to_radius(cloud: LabeledPointCloud, center: np.ndarray,
                   radius: float) -> LabeledPointCloud:
    if not cloud.count:
        return cloud
    keep = np.linalg.norm(cloud.points - center, axis=1) <= radius
    inten = cloud.intensities[keep] if cloud.intensities.size else cloud.intensities
    return LabeledPointCloud(cloud.points[keep], cloud.labels[keep], inten)


def render_viewpoint(map_cloud: LabeledPointCloud, pose: Pose,
                     cfg: Config) -> tuple[RangeImage, SemanticImage]:
    """Crop the map around the pose, project, and fill in normals."""
    cropped = crop_to_radius(map_cloud, pose.translation, cfg.max_range_m)
    rng_img, sem_img = project_spherical(cropped, pose, cfg)
    return estimate_normals(rng_img), sem_img
