"""Shared domain records: labeled point clouds and rigid poses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config

ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class LabeledPointCloud:
    """Points in the sensor frame with one semantic class id per point.

    points: (N, 3) float64 meters, intensities: (N,) in [0, 1] (may be
    empty), labels: (N,) uint16 class ids in [0, n_classes).
    """
    points: np.ndarray
    labels: np.ndarray
    intensities: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.float64))

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.uint16).reshape(-1))
        object.__setattr__(self, "intensities", np.asarray(self.intensities, dtype=np.float64).reshape(-1))

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def validate(self, cfg: Config) -> "LabeledPointCloud":
        n = self.count
        if self.labels.shape[0] != n:
            raise ValueError(f"labels length {self.labels.shape[0]} != point count {n}")
        if self.intensities.size and self.intensities.shape[0] != n:
            raise ValueError(f"intensities length {self.intensities.shape[0]} != point count {n}")
        if n and not np.isfinite(self.points).all():
            raise ValueError("non-finite point coordinates")
        if n and int(self.labels.max(initial=0)) >= cfg.n_classes:
            raise ValueError(f"label >= n_classes ({cfg.n_classes})")
        return self


def empty_cloud() -> LabeledPointCloud:
    return LabeledPointCloud(np.empty((0, 3)), np.empty(0, dtype=np.uint16))


@dataclass(frozen=True)
class Pose:
    """Rigid transform sensor->world: x_world = rotation @ x_sensor + translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def validate(self) -> "Pose":
        r = self.rotation
        if not np.isfinite(r).all() or not np.isfinite(self.translation).all():
            raise ValueError("non-finite pose")
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        return self

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply other first, then self."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def yaw(self) -> float:
        """Heading about the world vertical axis, in (-pi, pi]."""
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def yaw_rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_pose(theta: float, translation=(0.0, 0.0, 0.0)) -> Pose:
    return Pose(yaw_rotation(theta), np.asarray(translation, dtype=np.float64))


def canonical_heading(h: float) -> float:
    """Wrap a heading into [0, 2*pi)."""
    two_pi = 2.0 * math.pi
    h = h - two_pi * math.floor(h / two_pi)
    if h >= two_pi or abs(h - two_pi) < 1e-12:
        h = 0.0
    return h
