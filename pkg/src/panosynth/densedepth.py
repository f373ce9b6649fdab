"""Sphere-sweep dense depth: ad-census cost, guided-filter aggregation, WTA.

For every depth hypothesis, each reference pixel is lifted to a world point
and reprojected into the neighbor panoramas; color agreement there scores the
hypothesis. Census descriptors are computed once per neighbor panorama and
sampled nearest-neighbor at the reprojected coordinates (the classical
ad-census construction on rectified pairs compares per-image descriptors at
shifted coordinates; re-censusing every warped slice would cost ~60x more
for the same comparison). Colors are sampled bilinearly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import ImageDims, Pose, unit_ray_grid, validate_dims
from .parallel import run_partitioned
from .rasters import bilinear_sample, dims_of, luma, nearest_sample

log = logging.getLogger(__name__)

MAX_COST = np.float32(2.0)


@dataclass(frozen=True)
class DepthHypotheses:
    """Strictly increasing candidate depths (meters)."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("hypotheses must be a 1-D non-empty array")
        if vals[0] <= 0 or np.any(np.diff(vals) <= 0):
            raise ValueError("hypotheses must be positive and strictly increasing")
        object.__setattr__(self, "values", vals)
        self.values.setflags(write=False)

    @property
    def count(self) -> int:
        return int(self.values.size)


def inverse_depth_hypotheses(d_min: float, d_max: float, count: int = 64) -> DepthHypotheses:
    """Hypotheses uniform in inverse depth: parallax varies linearly across them."""
    if not (0 < d_min < d_max):
        raise ValueError("need 0 < d_min < d_max")
    inv = np.linspace(1.0 / d_max, 1.0 / d_min, count)
    return DepthHypotheses(values=np.sort(1.0 / inv))


@dataclass(frozen=True)
class AdCensusParams:
    census_window: tuple[int, int] = (9, 7)  # (width, height), both odd
    lambda_ad: float = 10.0 / 255.0
    lambda_census: float = 30.0
    guided_radius: int = 8
    guided_epsilon: float = 1e-4

    def __post_init__(self):
        w, h = self.census_window
        if w % 2 == 0 or h % 2 == 0:
            raise ValueError("census window must be odd in both dims")
        if self.lambda_ad <= 0 or self.lambda_census <= 0:
            raise ValueError("lambdas must be positive")

    def to_dict(self) -> dict:
        return {
            "census_window": list(self.census_window),
            "lambda_ad": self.lambda_ad,
            "lambda_census": self.lambda_census,
            "guided_radius": self.guided_radius,
            "guided_epsilon": self.guided_epsilon,
        }


def census_transform(rgb: np.ndarray, window: tuple[int, int] = (9, 7)) -> np.ndarray:
    """Per-pixel census bits over luma: bit set where neighbor < center.

    Bits are ordered row-major over (dy, dx) window offsets, center excluded.
    Horizontal neighbors wrap at the seam; vertical ones clamp. Returns uint64.
    """
    wx, wy = window
    if wx % 2 == 0 or wy % 2 == 0:
        raise ValueError("census window must be odd in both dims")
    y = luma(rgb).astype(np.float32)
    h, w = y.shape
    if wx > w or wy > h:
        raise ValueError(f"census window {wx}x{wy} larger than image {w}x{h}")
    if wx * wy - 1 > 64:
        raise ValueError("census window exceeds 64 bits")
    rx, ry = wx // 2, wy // 2
    padded = np.pad(y, ((ry, ry), (0, 0)), mode="edge")
    desc = np.zeros((h, w), dtype=np.uint64)
    bit = 0
    for dy in range(-ry, ry + 1):
        row = padded[dy + ry : dy + ry + h]
        for dx in range(-rx, rx + 1):
            if dx == 0 and dy == 0:
                continue
            neighbor = np.roll(row, -dx, axis=1)
            desc |= (neighbor < y).astype(np.uint64) << np.uint64(bit)
            bit += 1
    return desc


def hamming_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a ^ b)


def sweep_sample(ref_pose: Pose, neighbor_rgb: np.ndarray, neighbor_pose: Pose,
                 hypothesis_depth: float, dims: ImageDims,
                 neighbor_desc: np.ndarray | None = None):
    """Sample the neighbor at every ref pixel's hypothesis-depth world point.

    Returns (color (H,W,3) float32, desc or None, valid (H,W) bool); invalid
    marks rays whose world point degenerates onto the neighbor center.
    """
    if hypothesis_depth <= 0 or not np.isfinite(hypothesis_depth):
        raise ValueError("hypothesis depth must be finite and positive")
    validate_dims(dims)
    rays = unit_ray_grid(dims)
    world = rays @ ref_pose.rotation.T * hypothesis_depth + ref_pose.position
    local = (world - neighbor_pose.position) @ neighbor_pose.rotation
    d_rep = np.linalg.norm(local, axis=-1)
    valid = d_rep > 0
    safe = np.where(valid, d_rep, 1.0)
    theta = np.arctan2(-local[..., 2], local[..., 0])
    phi = np.arcsin(np.clip(local[..., 1] / safe, -1.0, 1.0))
    w, h = dims
    i = ((np.pi - theta) * w / (2.0 * np.pi) - 0.5) % w
    j = np.clip((0.5 * np.pi - phi) * h / np.pi - 0.5, -0.5, h - 0.5)
    color = bilinear_sample(neighbor_rgb, i, j)
    desc = nearest_sample(neighbor_desc, i, j) if neighbor_desc is not None else None
    return color, desc, valid


def ad_census_cost(ref_color: np.ndarray, ref_desc: np.ndarray,
                   sample_color: np.ndarray, sample_desc: np.ndarray,
                   params: AdCensusParams, valid=True) -> np.ndarray:
    """cost = (1 - exp(-c_AD/lambda_ad)) + (1 - exp(-c_census/lambda_census)).

    c_AD is the mean absolute RGB difference, c_census the census Hamming
    distance. Invalid samples score the 2.0 sentinel.
    """
    c_ad = np.mean(np.abs(np.asarray(ref_color, dtype=np.float32)
                          - np.asarray(sample_color, dtype=np.float32)), axis=-1)
    c_census = hamming_distance(np.asarray(ref_desc, dtype=np.uint64),
                                np.asarray(sample_desc, dtype=np.uint64)).astype(np.float32)
    cost = (1.0 - np.exp(-c_ad / np.float32(params.lambda_ad))) \
         + (1.0 - np.exp(-c_census / np.float32(params.lambda_census)))
    return np.where(valid, cost.astype(np.float32), MAX_COST)


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Windowed sums with horizontal wrap and vertical clamp padding."""
    h, w = arr.shape
    p = np.pad(arr, ((radius, radius), (0, 0)), mode="edge")
    p = np.pad(p, ((0, 0), (radius, radius)), mode="wrap")
    c = np.zeros((p.shape[0] + 1, p.shape[1] + 1), dtype=np.float64)
    np.cumsum(p, axis=0, out=c[1:, 1:])
    np.cumsum(c[1:, 1:], axis=1, out=c[1:, 1:])
    k = 2 * radius + 1
    return (c[k:, k:] - c[:-k or None, k:][:h] - c[k:, :-k or None][:, :w]
            + c[:h, :w])


def guided_filter(cost_slice: np.ndarray, guide: np.ndarray,
                  radius: int = 8, epsilon: float = 1e-4) -> np.ndarray:
    """Edge-preserving smoothing of one cost slice steered by the luma guide."""
    if cost_slice.shape != guide.shape:
        raise ValueError("cost slice and guide must have the same shape")
    h, w = cost_slice.shape
    if radius >= h:
        raise ValueError(f"guided radius {radius} must be < image height {h}")
    I = np.asarray(guide, dtype=np.float64)
    p = np.asarray(cost_slice, dtype=np.float64)
    n = float((2 * radius + 1) ** 2)
    mean_i = _box_sum(I, radius) / n
    mean_p = _box_sum(p, radius) / n
    corr_ip = _box_sum(I * p, radius) / n
    corr_ii = _box_sum(I * I, radius) / n
    var_i = corr_ii - mean_i * mean_i
    cov_ip = corr_ip - mean_i * mean_p
    a = cov_ip / (var_i + epsilon)
    b = mean_p - a * mean_i
    return _box_sum(a, radius) / n * I + _box_sum(b, radius) / n


def winner_takes_all(cost_volume: np.ndarray, hyps: DepthHypotheses) -> np.ndarray:
    """Depth of the minimum-cost slice per pixel; cost ties resolve to the
    nearer depth; pixels at the max-cost sentinel in every slice are missing."""
    if cost_volume.ndim != 3 or cost_volume.shape[0] != hyps.count:
        raise ValueError("cost volume slice count must equal hypothesis count")
    best = np.argmin(cost_volume, axis=0)  # first minimum = nearest depth
    depth = hyps.values[best].astype(np.float32)
    all_invalid = cost_volume.min(axis=0) >= MAX_COST - 1e-6
    return np.where(all_invalid, np.float32(np.nan), depth)


def _nearest_other_indices(positions: np.ndarray, ref_index: int, n: int) -> list[int]:
    dists = np.linalg.norm(positions - positions[ref_index], axis=1)
    order = [int(i) for i in np.argsort(dists, kind="stable") if i != ref_index]
    return order[:n]


def estimate_dense_depth(ref_index: int, frames, n_neighbors: int = 4,
                         hyps: DepthHypotheses | None = None,
                         params: AdCensusParams | None = None,
                         threads: int = 1):
    """Sweep-stereo depth for one frame against its N nearest neighbors.

    frames is a sequence with .rgb and .pose (e.g. io.LoadedFrame). Costs are
    averaged over neighbors (missing samples excluded; all-missing pixels get
    the max-cost sentinel), guided-filtered per slice, then WTA-selected.
    Returns (depth, metadata dict).
    """
    if n_neighbors < 1:
        raise ValueError("need at least one neighbor")
    if hyps is None:
        hyps = inverse_depth_hypotheses(0.5, 50.0, 64)
    if params is None:
        params = AdCensusParams()
    ref = frames[ref_index]
    dims = dims_of(ref.rgb)
    positions = np.array([f.pose.position for f in frames], dtype=np.float64)
    neighbor_ids = _nearest_other_indices(positions, ref_index, n_neighbors)
    if not neighbor_ids:
        raise ValueError("manifest has no other frames to sweep against")

    ref_desc = census_transform(ref.rgb, params.census_window)
    ref_luma = luma(ref.rgb)
    h, w = ref_luma.shape
    m = hyps.count
    cost_sum = np.zeros((m, h, w), dtype=np.float32)
    count = np.zeros((m, h, w), dtype=np.uint8)

    for nb_idx in neighbor_ids:
        nb = frames[nb_idx]
        nb_desc = census_transform(nb.rgb, params.census_window)

        def sweep_slice(mi, nb=nb, nb_desc=nb_desc):
            color, desc, valid = sweep_sample(
                ref.pose, nb.rgb, nb.pose, float(hyps.values[mi]), dims, nb_desc)
            cost = ad_census_cost(ref.rgb, ref_desc, color, desc, params, valid)
            cost_sum[mi] += np.where(valid, cost, np.float32(0.0))
            count[mi] += valid

        run_partitioned(sweep_slice, range(m), threads)

    avg = np.where(count > 0, cost_sum / np.maximum(count, 1), MAX_COST)

    filtered = np.empty_like(avg)

    def filter_slice(mi):
        filtered[mi] = guided_filter(avg[mi], ref_luma,
                                     params.guided_radius,
                                     params.guided_epsilon).astype(np.float32)

    run_partitioned(filter_slice, range(m), threads)

    depth = winner_takes_all(filtered, hyps)
    meta = {
        "neighbors": [getattr(frames[i], "id", str(i)) for i in neighbor_ids],
        "hypotheses": {"count": m, "d_min": float(hyps.values[0]),
                       "d_max": float(hyps.values[-1]), "spacing": "inverse-depth"},
        "params": params.to_dict(),
    }
    return depth, meta
