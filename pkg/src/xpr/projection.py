"""Spherical projection of labeled clouds into range/semantic images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import Config
from .core import LabeledPointCloud, Pose


@dataclass(frozen=True)
class RangeImage:
    depth: np.ndarray            # (H, W) meters, 0 = empty cell
    normals: np.ndarray          # (H, W, 3) unit vectors, zero where empty
    vfov_up: float               # degrees
    vfov_down: float

    @property
    def rows(self) -> int:
        return self.depth.shape[0]

    @property
    def cols(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class SemanticImage:
    labels: np.ndarray           # (H, W) uint16 class ids, 0 where empty

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]


def _cell_angles(rows: int, cols: int, vfov_up: float, vfov_down: float):
    """Azimuth per column and elevation per row at cell centers, radians."""
    az = -math.pi + (np.arange(cols) + 0.5) * (2.0 * math.pi / cols)
    up = math.radians(vfov_up)
    down = math.radians(vfov_down)
    el = up - (np.arange(rows) + 0.5) * ((up - down) / rows)
    return az, el


def project_spherical(cloud: LabeledPointCloud, sensor_pose: Pose,
                      cfg: Config) -> tuple[RangeImage, SemanticImage]:
    """Project a cloud onto the 360-degree grid; nearest point wins each cell.

    Azimuth [-pi, pi) maps linearly to columns with azimuth 0 at the image
    center; elevation [vfov_down, vfov_up] maps linearly to rows (top row =
    vfov_up). Points outside the vertical FOV are dropped. Ties on range are
    broken by the lower point index.
    """
    h, w = cfg.range_rows, cfg.range_cols
    depth = np.zeros((h, w), dtype=np.float64)
    labels = np.zeros((h, w), dtype=np.uint16)
    if cloud.count:
        pts = sensor_pose.inverse().transform(cloud.points)
        rng = np.linalg.norm(pts, axis=1)
        keep = rng > 0.0
        pts, rng = pts[keep], rng[keep]
        lab = cloud.labels[keep]

        az = np.arctan2(pts[:, 1], pts[:, 0])
        el = np.arcsin(np.clip(pts[:, 2] / rng, -1.0, 1.0))
        up = math.radians(cfg.vfov_up)
        down = math.radians(cfg.vfov_down)
        keep = (el >= down) & (el <= up)
        az, el, rng, lab = az[keep], el[keep], rng[keep], lab[keep]

        cols = np.floor((az + math.pi) / (2.0 * math.pi) * w).astype(np.int64) % w
        rows = np.minimum(np.floor((up - el) / (up - down) * h).astype(np.int64), h - 1)
        depth, labels = kernels.fill_grid(
            rows.astype(np.int64), cols, np.ascontiguousarray(rng),
            np.ascontiguousarray(lab), h, w)

    img = RangeImage(depth, np.zeros((h, w, 3)), cfg.vfov_up, cfg.vfov_down)
    return img, SemanticImage(labels)


def estimate_normals(img: RangeImage) -> RangeImage:
    """Per-cell surface normal from right/down neighbor differences.

    Missing neighbor, image edge, or a degenerate cross product falls back to
    the unit direction from the point back toward the sensor. Normals are
    oriented to face the sensor.
    """
    az, el = _cell_angles(img.rows, img.cols, img.vfov_up, img.vfov_down)
    normals = kernels.compute_normals(
        img.depth, np.cos(az), np.sin(az), np.cos(el), np.sin(el))
    return RangeImage(img.depth, normals, img.vfov_up, img.vfov_down)


def unproject(img: RangeImage) -> np.ndarray:
    """Sensor-frame 3D point per cell (zero where empty), (H, W, 3)."""
    az, el = _cell_angles(img.rows, img.cols, img.vfov_up, img.vfov_down)
    x = (img.depth * np.cos(el)[:, None]) * np.cos(az)[None, :]
    y = (img.depth * np.cos(el)[:, None]) * np.sin(az)[None, :]
    z = img.depth * np.sin(el)[:, None]
    return np.stack([x, y, z], axis=-1)


def frustum_window(cols: int) -> tuple[int, int]:
    """Central column window covering the camera's 90-degree frontal view.

    Returns (first column, width); azimuth 0 sits at the image center, so
    the frustum is the middle quarter of a 360-degree image.
    """
    width = max(cols // 4, 1)
    return (cols - width) // 2, width


def semantic_histogram(sem: SemanticImage, cfg: Config) -> np.ndarray:
    """Class-frequency vector over non-void cells; uniform if all void."""
    counts = np.bincount(sem.labels.ravel(), minlength=cfg.n_classes).astype(np.float64)
    counts[0] = 0.0
    total = counts.sum()
    if total == 0.0:
        hist = np.full(cfg.n_classes, 1.0 / (cfg.n_classes - 1))
        hist[0] = 0.0
        return hist
    return counts / total
