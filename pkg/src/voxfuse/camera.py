"""Pinhole camera with a rigid world-from-camera pose.

Conventions: x right, y down, z forward (OpenCV style). Continuous pixel
coordinates put the center of pixel (col, row) at (col + 0.5, row + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # camera->world
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # camera center

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise DomainError("image size must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise DomainError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @classmethod
    def from_matrix(cls, fx, fy, cx, cy, width, height, world_from_camera) -> "Camera":
        m = np.asarray(world_from_camera, dtype=np.float64).reshape(4, 4)
        return cls(fx, fy, cx, cy, width, height, m[:3, :3], m[:3, 3])

    def world_from_camera_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def look_at(cls, fx, fy, cx, cy, width, height, eye, target, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        n = np.linalg.norm(forward)
        if n == 0:
            raise DomainError("look_at eye and target coincide")
        forward = forward / n
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=1)  # columns = camera axes
        return cls(fx, fy, cx, cy, width, height, rot, eye)

    # -- projection ----------------------------------------------------------

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (points - self.translation[None, :]) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (uv (N,2) continuous pixel coords, z (N,) camera depth)."""
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def pixel_rays(self) -> np.ndarray:
        """Unit world-space directions for all pixel centers, shape (H*W, 3)."""
        cols, rows = np.meshgrid(
            np.arange(self.width), np.arange(self.height), indexing="xy"
        )
        u = cols.ravel() + 0.5
        v = rows.ravel() + 0.5
        return self.rays_for_pixels(u, v)

    def rays_for_pixels(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        d = np.stack(
            [
                (np.asarray(u, dtype=np.float64) - self.cx) / self.fx,
                (np.asarray(v, dtype=np.float64) - self.cy) / self.fy,
                np.ones_like(np.asarray(u, dtype=np.float64)),
            ],
            axis=1,
        )
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.rotation.T

    def ray(self, col: int, row: int) -> tuple[np.ndarray, np.ndarray]:
        """(origin, unit direction) of the ray through pixel center (col, row)."""
        d = self.rays_for_pixels(
            np.array([col + 0.5]), np.array([row + 0.5])
        )[0]
        return self.translation.copy(), d
