"""Novel-view synthesis: target depth construction, backwards warping, blending.

The target depth panorama is forward-splatted from the nearest input frames,
closed to fill splat holes, and raymarch-corrected against the same frames.
Each target pixel's 3D point is then reprojected into nearby inputs; sampled
colors are blended with weights favoring depth agreement (w_depth), near
cameras (w_camera), and aligned viewing rays (w_angle). Samples whose depth
agrees within a relative tolerance are "suitable"; blending prefers those and
falls back to all positively weighted samples, extending the search outward
through further frames when the nearest K yield no suitable sample.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import ImageDims, Pose, unit_ray_grid, validate_dims
from .parallel import row_bands, run_partitioned
from .rasters import bilinear_sample, dims_of, nearest_sample
from .refine import RefinementConfig, forward_project, morphological_close_depth, raymarch_correct

log = logging.getLogger(__name__)

WEIGHT_MODES = ("full", "depth_camera", "depth", "uniform")
CAMERA_DISTANCE_FLOOR = 1e-6  # meters; caps w_camera at the source position


@dataclass(frozen=True)
class SynthesisConfig:
    blend_neighbors: int = 4           # K nearest frames blended per pixel
    camera_weight_scale: float = 10.0  # s in w_camera = s / distance
    suitability_tau: float = 0.05      # relative depth-agreement bound
    fallback_max: int | None = None    # extra frames to try; None = all
    closing_radius: int = 2
    hole_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    weight_mode: str = "full"
    refinement: RefinementConfig = field(default_factory=RefinementConfig)

    def __post_init__(self):
        if self.blend_neighbors < 1:
            raise ValueError("blend_neighbors must be >= 1")
        if self.camera_weight_scale <= 0:
            raise ValueError("camera_weight_scale must be positive")
        if self.suitability_tau <= 0:
            raise ValueError("suitability_tau must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")


def weight_depth(d_rep, d):
    """(|d_rep - d| + 1)^-1, in (0, 1]; 1 means exact depth agreement."""
    return 1.0 / (np.abs(np.asarray(d_rep, dtype=np.float64)
                         - np.asarray(d, dtype=np.float64)) + 1.0)


def weight_camera(t, scale: float = 10.0) -> float:
    """scale / ||t||, capped where the target sits on the source camera."""
    n = float(np.linalg.norm(np.asarray(t, dtype=np.float64)))
    return scale / max(n, CAMERA_DISTANCE_FLOOR)


def weight_angle(t, v):
    """pi - angle(t, v) in [0, pi]; ||t|| = 0 counts as perfect agreement."""
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tn = np.linalg.norm(t, axis=-1)
    vn = np.linalg.norm(v, axis=-1)
    if np.any(vn == 0):
        raise ValueError("view vector must be non-zero")
    safe_tn = np.where(tn == 0, 1.0, tn)
    cosang = np.clip((v @ t if v.ndim > t.ndim else np.sum(t * v, axis=-1))
                     / (safe_tn * vn), -1.0, 1.0)
    ang = np.pi - np.arccos(cosang)
    return np.where(tn == 0, np.pi, ang)


@dataclass
class BlendSample:
    frame_id: str
    color: np.ndarray
    w_depth: float
    w_camera: float
    w_angle: float
    weight: float
    suitable: bool


def synthesize_target_depth(target_pose: Pose, depth_frames, cfg: SynthesisConfig,
                            dims: ImageDims | None = None):
    """Depth panorama at the target pose from refined input depths.

    depth_frames is a list of (DepthPanorama, Pose). Returns (depth,
    uncovered mask): uncovered pixels received no splat and survived closing;
    they carry the maximum observed depth as a far-field guess.
    """
    if not depth_frames:
        raise ValueError("no refined depths available")
    if dims is None:
        dims = dims_of(depth_frames[0][0])
    validate_dims(dims)
    k_fp = min(cfg.refinement.projection_neighbors, len(depth_frames))
    dists = [np.linalg.norm(np.asarray(p.position) - target_pose.position)
             for _, p in depth_frames]
    order = [int(i) for i in np.argsort(dists, kind="stable")][:k_fp]
    chosen = [depth_frames[i] for i in order]
    splat = forward_project(target_pose, chosen, k_fp, dims=dims)
    closed = morphological_close_depth(splat, cfg.closing_radius)
    uncovered = ~np.isfinite(closed)
    finite = closed[~uncovered]
    if finite.size == 0:
        raise ValueError("no depth coverage at the target pose")
    filled = np.where(uncovered, finite.max(), closed).astype(np.float32)
    k_rm = min(cfg.refinement.raymarch_neighbors, len(chosen))
    corrected, _, _ = raymarch_correct(filled, target_pose, chosen, k_rm,
                                       cfg.refinement.increase_rate,
                                       cfg.refinement.max_march_steps)
    return corrected, uncovered


def _distance_order(target_pose: Pose, frames) -> list[int]:
    dists = [np.linalg.norm(f.pose.position - target_pose.position) for f in frames]
    return [int(i) for i in np.argsort(dists, kind="stable")]


def gather_samples(pixel: tuple[float, float], target_depth_value: float,
                   target_pose: Pose, frames, cfg: SynthesisConfig,
                   dims: ImageDims) -> list[BlendSample]:
    """Per-pixel sample set across the K nearest frames (plus fallback).

    frames need .id, .pose, .rgb and .refined. The returned list carries one
    sample per visited frame in distance order; extension frames appear only
    when the first K held no suitable sample.
    """
    i, j = pixel
    w, h = validate_dims(dims)
    theta = np.pi - 2.0 * np.pi * (i + 0.5) / w
    phi = 0.5 * np.pi - np.pi * (j + 0.5) / h
    ray = np.array([np.cos(phi) * np.cos(theta), np.sin(phi),
                    -np.cos(phi) * np.sin(theta)])
    point = target_pose.position + target_pose.rotation @ ray * target_depth_value

    order = _distance_order(target_pose, frames)
    k = min(cfg.blend_neighbors, len(order))
    budget = len(order) if cfg.fallback_max is None else min(
        len(order), k + cfg.fallback_max)
    samples: list[BlendSample] = []
    any_suitable = False
    uniform = cfg.weight_mode == "uniform"
    for rank, fi in enumerate(order):
        if rank >= k and (uniform or any_suitable or rank >= budget):
            break
        f = frames[fi]
        local = f.pose.rotation.T @ (point - f.pose.position)
        d_rep = float(np.linalg.norm(local))
        if d_rep == 0:
            continue
        theta_r = np.arctan2(-local[2], local[0])
        phi_r = np.arcsin(np.clip(local[1] / d_rep, -1.0, 1.0))
        si = ((np.pi - theta_r) * w / (2.0 * np.pi) - 0.5) % w
        sj = np.clip((0.5 * np.pi - phi_r) * h / np.pi - 0.5, -0.5, h - 0.5)
        color = np.asarray(bilinear_sample(f.rgb, si, sj), dtype=np.float64)
        d_data = float(nearest_sample(f.refined, si, sj))
        t = target_pose.position - f.pose.position
        if cfg.weight_mode == "uniform":
            samples.append(BlendSample(f.id, color, 0.0, 0.0, 0.0, 1.0, False))
            continue
        if np.isfinite(d_data):
            w_d = float(weight_depth(d_rep, d_data))
            suitable = abs(d_rep - d_data) / d_data <= cfg.suitability_tau
        else:
            w_d, suitable = 0.0, False
        w_cam = weight_camera(t, cfg.camera_weight_scale)
        w_ang = float(weight_angle(t, point - f.pose.position))
        if cfg.weight_mode == "depth":
            weight = w_d
        elif cfg.weight_mode == "depth_camera":
            weight = w_d * w_cam
        else:
            weight = w_d * w_cam * w_ang
        samples.append(BlendSample(f.id, color, w_d, w_cam, w_ang, weight, suitable))
        any_suitable = any_suitable or suitable
    return samples


def blend(samples: list[BlendSample],
          hole_color=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, bool]:
    """Convex combination over the suitable samples when any exist, else over
    all; zero total weight yields the hole color and a raised hole flag."""
    chosen = [s for s in samples if s.suitable] or samples
    total = sum(s.weight for s in chosen)
    if total <= 0:
        return np.asarray(hole_color, dtype=np.float64), True
    acc = np.zeros(3)
    for s in chosen:
        acc += s.weight * s.color
    return acc / total, False


@dataclass
class SynthesisResult:
    rgb: np.ndarray
    depth: np.ndarray
    hole_mask: np.ndarray       # no positively weighted sample at all
    uncovered_mask: np.ndarray  # no depth splat coverage before filling
    suitable_mask: np.ndarray   # at least one depth-consistent sample
    stats: dict


def synthesize_view(target_pose: Pose, frames, cfg: SynthesisConfig | None = None,
                    dims: ImageDims | None = None, threads: int = 1) -> SynthesisResult:
    """Render the panorama seen from target_pose out of posed RGBD inputs.

    frames is a sequence with .id, .pose, .rgb, .refined (io.LoadedFrame).
    Output is bit-identical for any thread count: the image is partitioned
    into row bands with disjoint output slices and per-band accumulators.
    """
    cfg = cfg or SynthesisConfig()
    frames = [f for f in frames if f.refined is not None]
    if not frames:
        raise ValueError("no refined depths available")
    if dims is None:
        dims = dims_of(frames[0].rgb)
    w, h = validate_dims(dims)

    target_depth, uncovered = synthesize_target_depth(
        target_pose, [(f.refined, f.pose) for f in frames], cfg, dims)

    order = _distance_order(target_pose, frames)
    k = min(cfg.blend_neighbors, len(order))
    budget = len(order) if cfg.fallback_max is None else min(
        len(order), k + cfg.fallback_max)
    uniform = cfg.weight_mode == "uniform"

    rays = unit_ray_grid(dims) @ target_pose.rotation.T
    rgb = np.zeros((h, w, 3), dtype=np.float32)
    hole = np.zeros((h, w), dtype=bool)
    any_suitable = np.zeros((h, w), dtype=bool)

    frame_t = {fi: target_pose.position - frames[fi].pose.position for fi in order}
    frame_wcam = {fi: weight_camera(frame_t[fi], cfg.camera_weight_scale)
                  for fi in order}

    def run_band(band):
        y0, y1 = band
        pts = (target_pose.position
               + rays[y0:y1] * target_depth[y0:y1].astype(np.float64)[..., None])
        bh = y1 - y0
        suit_num = np.zeros((bh, w, 3))
        suit_den = np.zeros((bh, w))
        all_num = np.zeros((bh, w, 3))
        all_den = np.zeros((bh, w))
        suit_any = np.zeros((bh, w), dtype=bool)

        def accumulate(fi, pending=None):
            # elementwise math only: BLAS matmuls on variable-size subsets
            # could break bit-identity across thread counts
            nonlocal suit_num, suit_den, all_num, all_den, suit_any
            f = frames[fi]
            sel = pts if pending is None else pts[pending]
            rot = f.pose.rotation
            sh, sw = f.rgb.shape[0], f.rgb.shape[1]
            dx = sel[..., 0] - f.pose.position[0]
            dy = sel[..., 1] - f.pose.position[1]
            dz = sel[..., 2] - f.pose.position[2]
            lx = dx * rot[0, 0] + dy * rot[1, 0] + dz * rot[2, 0]
            ly = dx * rot[0, 1] + dy * rot[1, 1] + dz * rot[2, 1]
            lz = dx * rot[0, 2] + dy * rot[1, 2] + dz * rot[2, 2]
            d_rep = np.sqrt(lx * lx + ly * ly + lz * lz)
            safe = np.where(d_rep > 0, d_rep, 1.0)
            theta = np.arctan2(-lz, lx)
            phi = np.arcsin(np.clip(ly / safe, -1.0, 1.0))
            si = ((np.pi - theta) * sw / (2.0 * np.pi) - 0.5) % sw
            sj = np.clip((0.5 * np.pi - phi) * sh / np.pi - 0.5, -0.5, sh - 0.5)
            color = bilinear_sample(f.rgb, si, sj).astype(np.float64)
            if uniform:
                weight = np.where(d_rep > 0, 1.0, 0.0)
                suitable = np.zeros(weight.shape, dtype=bool)
            else:
                d_data = nearest_sample(f.refined, si, sj).astype(np.float64)
                ok = np.isfinite(d_data) & (d_rep > 0)
                dd = np.where(ok, d_data, 1.0)
                w_d = np.where(ok, 1.0 / (np.abs(d_rep - dd) + 1.0), 0.0)
                suitable = ok & (np.abs(d_rep - dd) / dd <= cfg.suitability_tau)
                if cfg.weight_mode == "depth":
                    weight = w_d
                else:
                    weight = w_d * frame_wcam[fi]
                    if cfg.weight_mode == "full":
                        t = frame_t[fi]
                        tn = float(np.linalg.norm(t))
                        if tn == 0:
                            w_ang = np.full(d_rep.shape, np.pi)
                        else:
                            dot = dx * t[0] + dy * t[1] + dz * t[2]
                            cosang = np.clip(dot / (tn * safe), -1.0, 1.0)
                            w_ang = np.pi - np.arccos(cosang)
                        weight = weight * w_ang
            contrib = weight[..., None] * color
            if pending is None:
                all_num += contrib
                all_den += weight
                suit_num[suitable] += contrib[suitable]
                suit_den[suitable] += weight[suitable]
                suit_any |= suitable
            else:
                all_num[pending] += contrib
                all_den[pending] += weight
                news = np.zeros(pending.shape, dtype=bool)
                news[pending] = suitable
                suit_num[news] += contrib[suitable]
                suit_den[news] += weight[suitable]
                suit_any |= news

        for rank in range(k):
            accumulate(order[rank])
        if not uniform:
            for rank in range(k, budget):
                pending = ~suit_any
                if not pending.any():
                    break
                accumulate(order[rank], pending)

        use_suit = suit_any & (suit_den > 0)
        den = np.where(use_suit, suit_den, all_den)
        num = np.where(use_suit[..., None], suit_num, all_num)
        empty = den <= 0
        safe_den = np.where(empty, 1.0, den)
        out = num / safe_den[..., None]
        out[empty] = np.asarray(cfg.hole_color, dtype=np.float64)
        # blending is convex; clipping only strips float round-off
        rgb[y0:y1] = np.clip(out, 0.0, 1.0).astype(np.float32)
        hole[y0:y1] = empty
        any_suitable[y0:y1] = suit_any

    bands = row_bands(h, threads if threads > 1 else 1)
    run_partitioned(run_band, bands, threads)

    npx = float(h * w)
    stats = {
        "hole_fraction": float(hole.sum() / npx),
        "uncovered_fraction": float(uncovered.sum() / npx),
        "suitable_fraction": float(any_suitable.sum() / npx),
        "frames_used": [frames[i].id for i in order[:budget]],
        "weight_mode": cfg.weight_mode,
    }
    return SynthesisResult(rgb=rgb, depth=target_depth, hole_mask=hole,
                           uncovered_mask=uncovered, suitable_mask=any_suitable,
                           stats=stats)


def perspective_view(pano: np.ndarray, yaw: float = 0.0, pitch: float = 0.0,
                     roll: float = 0.0, fov_deg: float = 90.0,
                     width: int = 960, height: int = 540) -> np.ndarray:
    """Pinhole reprojection of an equirect panorama (x-forward camera)."""
    from .geometry import rotation_yaw_pitch_roll
    if not (0 < fov_deg < 180):
        raise ValueError("fov must be in (0, 180)")
    ph, pw = pano.shape[0], pano.shape[1]
    tan_half = np.tan(np.radians(fov_deg) / 2.0)
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    zz, yy = np.meshgrid(xs * tan_half, -ys * tan_half * height / width)
    dirs = np.stack([np.ones_like(zz), yy, zz], axis=-1)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = dirs @ rotation_yaw_pitch_roll(yaw, pitch, roll).T
    theta = np.arctan2(-dirs[..., 2], dirs[..., 0])
    phi = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    i = ((np.pi - theta) * pw / (2.0 * np.pi) - 0.5) % pw
    j = np.clip((0.5 * np.pi - phi) * ph / np.pi - 0.5, -0.5, ph - 0.5)
    # interpolation of a [0, 1] raster; clip strips float round-off
    return np.clip(bilinear_sample(pano, i, j), 0.0, 1.0).astype(np.float32)
