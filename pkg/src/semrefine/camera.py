"""Pinhole camera: intrinsics, world-to-camera pose, projection and rays.

Pixel convention: the continuous image coordinate (u, v) of the projection
formula relates to the pixel grid so that pixel (ix, iy) covers
[ix, ix+1) x [iy, iy+1) and is sampled at its center (ix + 0.5, iy + 0.5).
v grows downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DataError

# Depth below this is treated as behind the camera.
DEPTH_EPS = 1e-9


@dataclass
class Camera:
    """Pinhole camera with world-to-camera rotation R and translation t.

    A world point p maps to camera frame as R @ p + t; the camera looks
    along +z of its own frame.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise DataError("rotation must be 3x3")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise DataError(f"rotation is not a proper rotation (orthonormality error {err:g})")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DataError("image dimensions must be >= 1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project_many(self, points: np.ndarray):
        """Vectorized projection: returns (pixels (n,2), depths (n,))."""
        pc = np.atleast_2d(points) @ self.rotation.T + self.translation
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def ray_direction(self, point: np.ndarray) -> np.ndarray:
        """Unit vector from the camera center to a world point."""
        d = np.asarray(point, dtype=np.float64) - self.center
        return d / np.linalg.norm(d)

    def backproject(self, u: float, v: float, depth: float) -> np.ndarray:
        """World point at continuous pixel (u, v) and camera-frame depth."""
        xc = (u - self.cx) / self.fx * depth
        yc = (v - self.cy) / self.fy * depth
        return self.rotation.T @ (np.array([xc, yc, depth]) - self.translation)

    def projection_jacobian(self, point: np.ndarray) -> np.ndarray:
        """2x3 Jacobian of the projection at a world point."""
        pc = self.rotation @ np.asarray(point, dtype=np.float64) + self.translation
        x, y, z = pc
        j = np.array(
            [
                [self.fx / z, 0.0, -self.fx * x / (z * z)],
                [0.0, self.fy / z, -self.fy * y / (z * z)],
            ]
        )
        return j @ self.rotation


def project(camera: Camera, point: np.ndarray):
    """Project one world point; returns (pixel (2,), depth).

    Raises BehindCamera when the camera-frame depth is <= DEPTH_EPS.
    """
    pc = camera.rotation @ np.asarray(point, dtype=np.float64) + camera.translation
    z = float(pc[2])
    if z <= DEPTH_EPS:
        raise BehindCamera(z)
    u = camera.fx * pc[0] / z + camera.cx
    v = camera.fy * pc[1] / z + camera.cy
    return np.array([u, v]), z


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at `eye` looking at `target`.

    The camera +y axis (image v, downward) is aligned with the world `up`
    projected orthogonally to the view direction.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise DataError("look_at: view direction parallel to up hint")
    right /= nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=0)


def make_camera(eye, target, fx, fy, width, height, up=(0.0, 1.0, 0.0)) -> Camera:
    r = look_at(eye, target, up)
    t = -r @ np.asarray(eye, dtype=np.float64)
    return Camera(fx, fy, width / 2.0, height / 2.0, r, t, width, height)
