"""Equirectangular geometry: pixel/angle maps, spherical/cartesian, reprojection.

Conventions used throughout the package:
  * World and camera frames are right-handed with x forward, y up, z right.
  * theta is the azimuth in [-pi, pi], counterclockwise when seen from +y,
    measured from +x (theta = +pi/2 looks along -z).
  * phi is the elevation in [-pi/2, pi/2], positive toward +y.
  * Pixel (i, j) covers the angular cell centered at
        theta = pi - 2*pi*(i + 0.5)/width
        phi   = pi/2 - pi*(j + 0.5)/height
    so column 0 is just under +pi and row 0 just under +pi/2.
  * Angle-to-pixel wraps horizontally (modulo width) and clamps vertically
    to [-0.5, height - 0.5].

All geometry math is float64; callers convert to raster dtypes at the edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

ROTATION_TOL = 1e-9


class ImageDims(NamedTuple):
    """Panorama raster size in pixels; equirect requires width == 2 * height."""

    width: int
    height: int


def validate_dims(dims: ImageDims) -> ImageDims:
    w, h = int(dims[0]), int(dims[1])
    if w <= 0 or h <= 0:
        raise ValueError(f"image dims must be positive, got {w}x{h}")
    if w != 2 * h:
        raise ValueError(f"equirect panorama requires width == 2*height, got {w}x{h}")
    return ImageDims(w, h)


@dataclass(frozen=True)
class Pose:
    """Rigid camera pose: local-to-world rotation and world position (meters)."""

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("pose position must be finite")
        if not np.all(np.isfinite(rot)):
            raise ValueError("pose rotation must be finite")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"pose rotation is not orthonormal (max error {err:.3g})")
        if np.linalg.det(rot) < 0:
            raise ValueError("pose rotation must be proper (det +1)")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)
        self.position.setflags(write=False)
        self.rotation.setflags(write=False)

    @staticmethod
    def identity(position=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(np.asarray(position, dtype=np.float64), np.eye(3))


def rotation_yaw_pitch_roll(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation from yaw (about +y), pitch (about +z), roll (about +x), applied
    in R = Ry(yaw) @ Rz(pitch) @ Rx(roll) order. Angles in radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return ry @ rz @ rx


def pixel_to_angles(i, j, dims: ImageDims):
    """Angles at the center of pixel (i, j). Accepts scalars or arrays;
    continuous coordinates are allowed within [0, width) horizontally and
    [-0.5, height - 0.5] vertically (the band where latitude is valid)."""
    w, h = validate_dims(dims)
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    if np.any(i < 0) or np.any(i >= w) or np.any(j < -0.5) or np.any(j > h - 0.5):
        raise ValueError("pixel index outside raster")
    theta = np.pi - 2.0 * np.pi * (i + 0.5) / w
    phi = 0.5 * np.pi - np.pi * (j + 0.5) / h
    return theta, phi


def angles_to_pixel(theta, phi, dims: ImageDims):
    """Continuous pixel coordinates for (theta, phi); the horizontal coordinate
    wraps modulo width, the vertical clamps to [-0.5, height - 0.5]."""
    w, h = validate_dims(dims)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        raise ValueError("angles must be finite")
    i = ((np.pi - theta) * w / (2.0 * np.pi) - 0.5) % w
    j = (0.5 * np.pi - phi) * h / np.pi - 0.5
    j = np.clip(j, -0.5, h - 0.5)
    return i, j


def spherical_to_cartesian(theta, phi, d) -> np.ndarray:
    """Point at distance d along (theta, phi): stacked (..., 3) float64."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("distance must be finite and positive")
    cp = np.cos(phi)
    x = d * cp * np.cos(theta)
    y = d * np.sin(phi)
    z = -d * cp * np.sin(theta)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def cartesian_to_spherical(v: np.ndarray):
    """Inverse of spherical_to_cartesian; v is (..., 3). Raises on zero vectors."""
    v = np.asarray(v, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    d = np.sqrt(x * x + y * y + z * z)
    if np.any(d == 0):
        raise ValueError("cannot convert zero vector to spherical")
    theta = np.arctan2(-z, x)
    phi = np.arcsin(np.clip(y / d, -1.0, 1.0))
    return theta, phi, d


def _reproject_raw(theta, phi, d, src: Pose, dst: Pose):
    """Reprojection without the degeneracy check: returns (x, y, z) in dst's
    local frame plus the distance. d_rep == 0 marks a point at dst's center."""
    v = spherical_to_cartesian(theta, phi, d)
    world = v @ src.rotation.T + src.position
    local = (world - dst.position) @ dst.rotation
    d_rep = np.linalg.norm(local, axis=-1)
    return local, d_rep


def reproject(theta, phi, d, src: Pose, dst: Pose):
    """Express a point seen by src at (theta, phi, d) in dst's panorama:
    returns (theta_rep, phi_rep, d_rep). Raises if the point coincides with
    dst's center (no direction is defined there)."""
    local, d_rep = _reproject_raw(theta, phi, d, src, dst)
    if np.any(d_rep == 0):
        raise ValueError("point reprojects onto the destination center")
    theta_rep = np.arctan2(-local[..., 2], local[..., 0])
    phi_rep = np.arcsin(np.clip(local[..., 1] / d_rep, -1.0, 1.0))
    return theta_rep, phi_rep, d_rep


def reproject_to_pixels(depth: np.ndarray, src: Pose, dst: Pose, dims: ImageDims):
    """Reproject every pixel of a depth raster into dst's panorama.

    Returns (i_rep, j_rep, d_rep) float64 rasters; entries where depth is
    missing (NaN) or the point degenerates onto dst's center are NaN/0.
    """
    w, h = validate_dims(dims)
    rays = unit_ray_grid(ImageDims(w, h))
    d = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    v = rays * np.where(valid, d, 1.0)[..., None]
    world = v @ src.rotation.T + src.position
    local = (world - dst.position) @ dst.rotation
    d_rep = np.linalg.norm(local, axis=-1)
    ok = valid & (d_rep > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arctan2(-local[..., 2], local[..., 0])
        phi = np.arcsin(np.clip(np.where(d_rep > 0, local[..., 1] / np.where(d_rep > 0, d_rep, 1.0), 0.0), -1.0, 1.0))
    i = ((np.pi - theta) * w / (2.0 * np.pi) - 0.5) % w
    j = np.clip((0.5 * np.pi - phi) * h / np.pi - 0.5, -0.5, h - 0.5)
    i = np.where(ok, i, np.nan)
    j = np.where(ok, j, np.nan)
    d_rep = np.where(valid, d_rep, np.nan)
    return i, j, d_rep


@lru_cache(maxsize=8)
def _ray_grid_cached(width: int, height: int) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    theta, phi = pixel_to_angles(ii, jj, ImageDims(width, height))
    rays = spherical_to_cartesian(theta, phi, 1.0)
    rays.setflags(write=False)
    return rays


def unit_ray_grid(dims: ImageDims) -> np.ndarray:
    """(H, W, 3) unit ray directions through every pixel center (read-only)."""
    w, h = validate_dims(dims)
    return _ray_grid_cached(w, h)
