"""Pinhole camera model: ray generation for pixels and sub-pixels, and
projection between posed views.

Conventions (fixed, see README): pixel (i, j) spans [i, i+1) x [j, j+1) in
continuous image coordinates with center (i+0.5, j+0.5); image y grows
downward; the camera looks along -z in camera space with x right and y up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Intrinsics",
    "CameraPose",
    "Ray",
    "BehindCameraError",
    "subpixel_grid",
    "ray_for_point",
    "rays_for_points",
    "project",
    "project_points",
    "look_at_pose",
]

_ORTHO_TOL = 1e-9


class BehindCameraError(ValueError):
    """Projection target has nonpositive depth along the optical axis."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    def scaled(self, s: float) -> "Intrinsics":
        """Intrinsics of the same camera at s-times the resolution."""
        return Intrinsics(self.focal * s, self.cx * s, self.cy * s,
                          int(round(self.width * s)), int(round(self.height * s)))


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera-to-world transform (4x4, orthonormal rotation)."""

    cam_to_world: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"cam_to_world must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=_ORTHO_TOL):
            raise ValueError("last row of cam_to_world must be [0,0,0,1]")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-8):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "cam_to_world", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction and scene bounds along it."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > _ORTHO_TOL:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be below t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def subpixel_grid(pixel: tuple[int, int], s: int) -> np.ndarray:
    """Continuous image coordinates of the s x s sub-pixel centers of a pixel.

    Built as pixel center plus symmetric offsets (2k+1-s)/(2s) so the grid
    centroid cancels to the pixel center exactly in floating point. Returns
    an (s*s, 2) array in row-major (y-outer) order; s=1 degenerates to the
    pixel center.
    """
    if s < 1:
        raise ValueError(f"scale factor must be >= 1, got {s}")
    i, j = pixel
    offsets = (2.0 * np.arange(s) + 1.0 - s) / (2.0 * s)
    xs = (i + 0.5) + offsets
    ys = (j + 0.5) + offsets
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)


def _camera_dirs(points: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Unnormalized camera-space directions for continuous image points."""
    x = (points[..., 0] - intr.cx) / intr.focal
    y = -(points[..., 1] - intr.cy) / intr.focal  # image y down, camera y up
    z = -np.ones_like(x)  # camera looks along -z
    return np.stack([x, y, z], axis=-1)


def rays_for_points(pose: CameraPose, intr: Intrinsics, points: np.ndarray,
                    t_near: float, t_far: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched back-projection: (N, 2) image points -> origins, unit dirs.

    Points must lie inside the image rectangle [0, W] x [0, H].
    """
    points = np.asarray(points, dtype=np.float64)
    if np.any(points[..., 0] < 0) or np.any(points[..., 0] > intr.width) \
            or np.any(points[..., 1] < 0) or np.any(points[..., 1] > intr.height):
        raise ValueError("image point outside the image rectangle")
    if not t_near < t_far:
        raise ValueError("t_near must be below t_far")
    dirs_cam = _camera_dirs(points, intr)
    dirs = dirs_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, dirs


def ray_for_point(pose: CameraPose, intr: Intrinsics, p: tuple[float, float],
                  t_near: float, t_far: float) -> Ray:
    """Ray from the camera center through one continuous image point."""
    origins, dirs = rays_for_points(pose, intr, np.asarray([p]), t_near, t_far)
    return Ray(origins[0], dirs[0], t_near, t_far)


def project_points(x_world: np.ndarray, pose: CameraPose, intr: Intrinsics
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Batched pinhole projection of (N, 3) world points.

    Returns ((N, 2) continuous image coordinates, (N,) depth along the
    optical axis). Depth <= 0 means the point is behind the camera; the
    coordinates for those rows are not meaningful and callers must mask
    on depth.
    """
    x_world = np.asarray(x_world, dtype=np.float64)
    x_cam = (x_world - pose.center) @ pose.rotation  # R^T (x - c), rows
    depth = -x_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.cx + intr.focal * x_cam[..., 0] / depth
        v = intr.cy - intr.focal * x_cam[..., 1] / depth
    return np.stack([u, v], axis=-1), depth


def project(x_world: np.ndarray, pose: CameraPose, intr: Intrinsics
            ) -> tuple[tuple[float, float], float]:
    """Project a single world point; raises BehindCameraError if depth <= 0."""
    uv, depth = project_points(np.asarray(x_world, dtype=np.float64)[None], pose, intr)
    d = float(depth[0])
    if d <= 0.0:
        raise BehindCameraError(f"point has nonpositive depth {d}")
    return (float(uv[0, 0]), float(uv[0, 1])), d


def look_at_pose(eye: np.ndarray, target: np.ndarray,
                 up: np.ndarray = (0.0, 0.0, 1.0)) -> CameraPose:
    """Camera at ``eye`` looking at ``target`` (the -z axis points there)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z_axis = eye - target
    nz = np.linalg.norm(z_axis)
    if nz == 0:
        raise ValueError("eye and target coincide")
    z_axis = z_axis / nz
    x_axis = np.cross(up, z_axis)
    nx = np.linalg.norm(x_axis)
    if nx < 1e-12:
        raise ValueError("up direction is parallel to the view direction")
    x_axis = x_axis / nx
    y_axis = np.cross(z_axis, x_axis)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x_axis, y_axis, z_axis, eye
    return CameraPose(m)
