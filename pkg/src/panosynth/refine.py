"""Iterative depth refinement: fusion, raymarch correction, forward projection.

Depth maps invert the usual grayscale morphology convention: smaller depth is
foreground, so dilation takes the window minimum and erosion the maximum.
Dilation skips missing values; erosion treats missing as +infinity. Closing
(min-dilate then max-erode) therefore fills holes from the surrounding
background-consistent depths without bleeding foreground outward. Opening
(max then min, both skipping missing, original holes re-imposed) suppresses
isolated near-depth speckles.

Raymarching pushes a depth sample along its ray in relative steps while any
neighbor's recorded surface sits behind the reprojected sample (the neighbor
"sees through" the point, so the point is floating in free space). Forward
projection splats neighbor depths into a target panorama keeping the
per-pixel minimum, i.e. the frontmost surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import Pose, unit_ray_grid
from .parallel import run_partitioned
from .rasters import dims_of

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementConfig:
    increase_rate: float = 0.005      # relative depth step per march
    raymarch_neighbors: int = 4       # consistency checks per pixel
    iterations: int = 3
    neighbor_increment: int = 2       # neighbor-count growth per iteration
    max_march_steps: int = 2000
    closing_radius: int = 2
    opening_radius: int = 1

    def __post_init__(self):
        if self.increase_rate <= 0:
            raise ValueError("increase_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.raymarch_neighbors < 1:
            raise ValueError("raymarch_neighbors must be >= 1")

    @property
    def projection_neighbors(self) -> int:
        # the splat set runs two frames wider than the consistency set
        return self.raymarch_neighbors + 2


@lru_cache(maxsize=16)
def disk_offsets(radius: int) -> tuple[tuple[int, int], ...]:
    """Disk structuring element offsets (dx, dy), center included."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    out = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                out.append((dx, dy))
    return tuple(out)


def _shifted(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """View of arr sampled at (i+dx, j+dy), wrapping x and clamping y."""
    h = arr.shape[0]
    rolled = np.roll(arr, -dx, axis=1) if dx else arr
    if dy == 0:
        return rolled
    if dy > 0:
        return np.vstack([rolled[dy:], np.repeat(rolled[-1:], dy, axis=0)])
    return np.vstack([np.repeat(rolled[:1], -dy, axis=0), rolled[:dy]])


def _min_filter_skip_missing(depth: np.ndarray, radius: int) -> np.ndarray:
    out = np.full_like(depth, np.nan)
    for dx, dy in disk_offsets(radius):
        out = np.fmin(out, _shifted(depth, dx, dy))
    return out


def _max_filter_skip_missing(depth: np.ndarray, radius: int) -> np.ndarray:
    out = np.full_like(depth, np.nan)
    for dx, dy in disk_offsets(radius):
        out = np.fmax(out, _shifted(depth, dx, dy))
    return out


def _max_filter_missing_inf(depth: np.ndarray, radius: int) -> np.ndarray:
    filled = np.where(np.isfinite(depth), depth, np.float32(np.inf))
    out = np.full_like(depth, -np.inf)
    for dx, dy in disk_offsets(radius):
        out = np.maximum(out, _shifted(filled, dx, dy))
    return np.where(np.isfinite(out), out, np.float32(np.nan))


def morphological_close_depth(depth: np.ndarray, radius: int = 2) -> np.ndarray:
    """Hole-filling closing under the flipped depth convention."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    dims_of(depth)
    dilated = _min_filter_skip_missing(depth, radius)
    return _max_filter_missing_inf(dilated, radius)


def morphological_open_depth(depth: np.ndarray, radius: int = 1) -> np.ndarray:
    """Near-speckle suppression; original missing pixels stay missing."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    eroded = _max_filter_skip_missing(depth, radius)
    opened = _min_filter_skip_missing(eroded, radius)
    return np.where(np.isfinite(depth), opened, np.float32(np.nan))


def fuse_depths(sparse: np.ndarray | None, dense: np.ndarray | None,
                cfg: RefinementConfig) -> np.ndarray:
    """Sparse values win over dense, then opening cleans isolated speckles."""
    if sparse is None and dense is None:
        raise ValueError("need at least one of sparse/dense")
    if sparse is not None and dense is not None and sparse.shape != dense.shape:
        raise ValueError("sparse/dense dims differ")
    if sparse is None:
        combined = dense.copy()
    elif dense is None:
        combined = sparse.copy()
    else:
        combined = np.where(np.isfinite(sparse), sparse, dense)
    return morphological_open_depth(combined, cfg.opening_radius)


def _nearest_neighbor_order(position: np.ndarray, neighbors) -> list[int]:
    dists = np.array([np.linalg.norm(np.asarray(p.position) - position)
                      for _, p in neighbors])
    return [int(i) for i in np.argsort(dists, kind="stable")]


def raymarch_correct(depth: np.ndarray, pose: Pose, neighbors,
                     raymarch_neighbors: int = 4, increase_rate: float = 0.005,
                     max_steps: int = 2000):
    """March depths outward until the nearest neighbors stop seeing through them.

    neighbors is a list of (DepthPanorama, Pose). A missing neighbor lookup
    counts as agreement. Pixels still violated after max_steps revert to their
    original value and are flagged. Returns (corrected, flagged, marched)
    where marched counts pixels that took at least one step.

    Never decreases a depth; missing inputs stay missing.
    """
    if raymarch_neighbors > len(neighbors):
        raise ValueError("raymarch_neighbors exceeds available neighbors")
    dims = dims_of(depth)
    h, w = depth.shape
    order = _nearest_neighbor_order(pose.position, neighbors)[:raymarch_neighbors]
    nb = [(np.asarray(neighbors[i][0]), neighbors[i][1]) for i in order]

    rays = unit_ray_grid(dims).reshape(-1, 3) @ pose.rotation.T
    flat0 = np.asarray(depth, dtype=np.float32).reshape(-1)
    d = flat0.copy()
    active = np.flatnonzero(np.isfinite(flat0))
    steps = np.zeros(d.shape, dtype=np.int32)
    flagged = np.zeros(d.shape, dtype=bool)
    ever_marched = np.zeros(d.shape, dtype=bool)

    while active.size:
        violated = np.zeros(active.size, dtype=bool)
        pts = pose.position + rays[active] * d[active, None]
        for nb_depth, nb_pose in nb:
            todo = ~violated
            if not todo.any():
                break
            local = (pts[todo] - nb_pose.position) @ nb_pose.rotation
            d_rep = np.linalg.norm(local, axis=-1)
            safe = np.where(d_rep > 0, d_rep, 1.0)
            theta = np.arctan2(-local[:, 2], local[:, 0])
            phi = np.arcsin(np.clip(local[:, 1] / safe, -1.0, 1.0))
            nh, nw = nb_depth.shape
            ii = (np.floor(((np.pi - theta) * nw / (2.0 * np.pi) - 0.5) + 0.5)
                  .astype(np.int64) % nw)
            jj = np.clip(np.floor(((0.5 * np.pi - phi) * nh / np.pi - 0.5) + 0.5)
                         .astype(np.int64), 0, nh - 1)
            seen = nb_depth[jj, ii]
            viol = np.isfinite(seen) & (d_rep.astype(np.float32) < seen)
            violated[todo] = viol
        if not violated.any():
            break
        over = violated & (steps[active] >= max_steps)
        exhausted = active[over]
        if exhausted.size:
            d[exhausted] = flat0[exhausted]
            flagged[exhausted] = True
        idx = active[violated & ~over]
        d[idx] = d[idx] + np.float32(increase_rate) * d[idx]
        steps[idx] += 1
        ever_marched[idx] = True
        active = active[violated & ~over]

    return (d.reshape(h, w), flagged.reshape(h, w),
            int(np.count_nonzero(ever_marched)))


def forward_project(target_pose: Pose, neighbors, projection_neighbors: int = 6,
                    dims=None):
    """Min-splat the nearest neighbors' depths into the target panorama.

    neighbors is a list of (DepthPanorama, Pose); the target's own map may be
    among them (distance 0 sorts it first). dims sets the output raster size
    (defaults to the nearest neighbor's). Unwritten pixels come out missing.
    """
    if projection_neighbors < 1:
        raise ValueError("projection_neighbors must be >= 1")
    if not neighbors:
        raise ValueError("no neighbors to project from")
    order = _nearest_neighbor_order(target_pose.position, neighbors)
    order = order[:projection_neighbors]
    if dims is None:
        dims = dims_of(np.asarray(neighbors[order[0]][0]))
    w, h = dims
    out = np.full(h * w, np.inf, dtype=np.float32)
    for k in order:
        nb_depth, nb_pose = neighbors[k]
        nb_depth = np.asarray(nb_depth)
        d = nb_depth.reshape(-1).astype(np.float64)
        valid = np.isfinite(d) & (d > 0)
        if not valid.any():
            continue
        rays = unit_ray_grid(dims_of(nb_depth)).reshape(-1, 3)[valid] @ nb_pose.rotation.T
        pts = nb_pose.position + rays * d[valid, None]
        local = (pts - target_pose.position) @ target_pose.rotation
        d_rep = np.linalg.norm(local, axis=-1)
        ok = d_rep > 0
        local, d_rep = local[ok], d_rep[ok]
        theta = np.arctan2(-local[:, 2], local[:, 0])
        phi = np.arcsin(np.clip(local[:, 1] / d_rep, -1.0, 1.0))
        ii = (np.floor(((np.pi - theta) * w / (2.0 * np.pi) - 0.5) + 0.5)
              .astype(np.int64) % w)
        jj = np.clip(np.floor(((0.5 * np.pi - phi) * h / np.pi - 0.5) + 0.5)
                     .astype(np.int64), 0, h - 1)
        np.minimum.at(out, jj * w + ii, d_rep.astype(np.float32))
    return np.where(np.isfinite(out), out, np.float32(np.nan)).reshape(h, w)


def refine_all(frames, cfg: RefinementConfig | None = None, threads: int = 1):
    """Iterative refinement over every frame of a loaded scene.

    frames is a sequence with .id, .pose, .sparse, .dense attributes (sparse
    and dense each optional per frame, at least one present). Returns
    (refined dict id -> DepthPanorama, report dict).
    """
    cfg = cfg or RefinementConfig()
    n = len(frames)
    if n == 0:
        raise ValueError("no frames")
    for f in frames:
        if f.sparse is None and f.dense is None:
            raise ValueError(f"frame {f.id} has neither sparse nor dense depth")

    if n == 1:
        f = frames[0]
        refined = fuse_depths(f.sparse, f.dense, cfg)
        return {f.id: refined}, {"iterations": [], "note": "single frame: fusion only"}

    dense = [f.dense for f in frames]
    report = {"iterations": []}
    k_rm = cfg.raymarch_neighbors
    for it in range(cfg.iterations):
        k_rm_i = min(k_rm, n - 1)
        k_fp_i = min(k_rm_i + 2, n)
        fused = [None] * n
        cor = [None] * n
        flags = [None] * n
        marched = [0] * n

        def fuse_one(fi):
            fused[fi] = fuse_depths(frames[fi].sparse, dense[fi], cfg)

        run_partitioned(fuse_one, range(n), threads)

        def march_one(fi):
            others = [(fused[g], frames[g].pose) for g in range(n) if g != fi]
            cor[fi], flags[fi], marched[fi] = raymarch_correct(
                fused[fi], frames[fi].pose, others, k_rm_i,
                cfg.increase_rate, cfg.max_march_steps)

        run_partitioned(march_one, range(n), threads)

        def project_one(fi):
            all_maps = [(cor[g], frames[g].pose) for g in range(n)]
            dense[fi] = forward_project(frames[fi].pose, all_maps, k_fp_i)

        run_partitioned(project_one, range(n), threads)

        report["iterations"].append({
            "raymarch_neighbors": k_rm_i,
            "projection_neighbors": k_fp_i,
            "frames": {frames[fi].id: {"marched": int(marched[fi]),
                                       "flagged": int(np.count_nonzero(flags[fi]))}
                       for fi in range(n)},
        })
        log.info("refinement iteration %d: k_rm=%d k_fp=%d marched=%s",
                 it + 1, k_rm_i, k_fp_i,
                 {frames[fi].id: marched[fi] for fi in range(n)})
        k_rm += cfg.neighbor_increment

    refined = {}

    def final_fuse(fi):
        refined[frames[fi].id] = fuse_depths(frames[fi].sparse, dense[fi], cfg)

    run_partitioned(final_fuse, range(n), 1)
    return refined, report
