"""Panorama raster helpers: validation, luma, sampling, missing-value rules.

Rasters are numpy arrays: RGB panoramas are (H, W, 3) float32 in [0, 1],
depth panoramas (H, W) float32 meters with NaN as the missing sentinel.
Horizontal sampling wraps at the equirect seam; vertical sampling clamps.
"""

from __future__ import annotations

import numpy as np

from .geometry import ImageDims, validate_dims


def dims_of(arr: np.ndarray) -> ImageDims:
    h, w = arr.shape[0], arr.shape[1]
    return validate_dims(ImageDims(w, h))


def validate_rgb(arr: np.ndarray) -> np.ndarray:
    """Check an RGB panorama raster; returns it unchanged."""
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"rgb panorama must be (H, W, 3), got {arr.shape}")
    dims_of(arr)
    if arr.dtype != np.float32:
        raise ValueError(f"rgb panorama must be float32, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("rgb panorama must be finite")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("rgb channels must lie in [0, 1]")
    return arr


def validate_depth(arr: np.ndarray) -> np.ndarray:
    """Check a depth panorama raster (NaN marks missing); returns it unchanged."""
    if arr.ndim != 2:
        raise ValueError(f"depth panorama must be (H, W), got {arr.shape}")
    dims_of(arr)
    if arr.dtype != np.float32:
        raise ValueError(f"depth panorama must be float32, got {arr.dtype}")
    finite = arr[np.isfinite(arr)]
    if finite.size and finite.min() <= 0.0:
        raise ValueError("finite depth values must be positive")
    return arr


def missing_mask(depth: np.ndarray) -> np.ndarray:
    return ~np.isfinite(depth)


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma, float32 (H, W)."""
    r = rgb[..., 0].astype(np.float32)
    g = rgb[..., 1].astype(np.float32)
    b = rgb[..., 2].astype(np.float32)
    return 0.299 * r + 0.587 * g + 0.114 * b


def _wrap_clamp_indices(i, j, width: int, height: int):
    ii = np.mod(i, width).astype(np.int64)
    jj = np.clip(j, 0, height - 1).astype(np.int64)
    return ii, jj


def nearest_sample(img: np.ndarray, i, j):
    """Sample at continuous pixel coords rounding half up; wraps x, clamps y."""
    h, w = img.shape[0], img.shape[1]
    i0 = np.floor(np.asarray(i, dtype=np.float64) + 0.5)
    j0 = np.floor(np.asarray(j, dtype=np.float64) + 0.5)
    ii, jj = _wrap_clamp_indices(i0, j0, w, h)
    return img[jj, ii]


def bilinear_sample(img: np.ndarray, i, j):
    """Bilinear sample at continuous pixel coords; wraps x, clamps y.

    img is (H, W) or (H, W, C). Depth rasters should use nearest_sample
    instead (interpolating across depth edges invents surfaces).
    """
    h, w = img.shape[0], img.shape[1]
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    i0 = np.floor(i)
    j0 = np.floor(j)
    fi = (i - i0)[..., None] if img.ndim == 3 else (i - i0)
    fj = (j - j0)[..., None] if img.ndim == 3 else (j - j0)
    i0w, j0c = _wrap_clamp_indices(i0, j0, w, h)
    i1w, j1c = _wrap_clamp_indices(i0 + 1, j0 + 1, w, h)
    v00 = img[j0c, i0w]
    v01 = img[j0c, i1w]
    v10 = img[j1c, i0w]
    v11 = img[j1c, i1w]
    top = v00 * (1.0 - fi) + v01 * fi
    bot = v10 * (1.0 - fi) + v11 * fi
    out = top * (1.0 - fj) + bot * fj
    return out.astype(img.dtype) if img.dtype == np.float32 else out
