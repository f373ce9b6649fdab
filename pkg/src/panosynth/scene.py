"""Analytic test scenes: spheres, boxes, a ground plane, procedural textures.

Renders posed equirectangular RGBD pairs by closed-form ray casting, giving
exact ground truth for fixtures and quantitative gates. Albedo is unshaded;
objects may add a specular gloss lobe or a directional sheen, the only
view-dependent terms, so photometric differences between views are either
pure geometry or those deliberate effects. They exist because view-alignment
blending is untestable against a purely Lambertian scene. Textures are smooth
sinusoids; hard edges would alias under equirect resampling and bleed into
image-quality scores for reasons unrelated to the code under test.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ImageDims, Pose, unit_ray_grid, validate_dims
from .io import (CaptureFrame, SceneManifest, blur_score, save_manifest,
                 write_depth_pfm, write_rgb_png)
from .rasters import luma

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stripes:
    """Sinusoidal albedo modulation along one or two world axes.

    An optional gap zeroes the modulation around gap_center on the first
    axis (with a linear ramp), leaving a deliberately textureless band.
    """

    axis: int
    period: float
    amplitude: float
    axis2: int | None = None
    period2: float = 1.0
    gap_center: float | None = None
    gap_halfwidth: float = 0.0
    gap_ramp: float = 0.1
    radial_falloff: float | None = None  # gaussian sigma on horizontal radius

    def modulation(self, points: np.ndarray) -> np.ndarray:
        m = np.sin(2.0 * np.pi * points[..., self.axis] / self.period)
        if self.axis2 is not None:
            m = 0.5 * (m + np.sin(2.0 * np.pi * points[..., self.axis2] / self.period2))
        amp = np.full(m.shape, self.amplitude)
        if self.gap_center is not None:
            u = np.abs(points[..., self.axis] - self.gap_center)
            amp = amp * np.clip((u - self.gap_halfwidth) / self.gap_ramp, 0.0, 1.0)
        if self.radial_falloff is not None:
            rho2 = points[..., 0] ** 2 + points[..., 2] ** 2
            amp = amp * np.exp(-rho2 / (self.radial_falloff ** 2))
        return amp * m


@dataclass(frozen=True)
class Gloss:
    """Specular lobe from a fixed directional light.

    A view-dependent highlight; blending that favors inputs with similar
    viewing angles should recover it better than uniform averaging. tint is
    the RGB direction of the highlight and may carry negative channels to
    shift hue instead of brightness; a luma-balanced tint leaves census
    descriptors and gradient-based masks unchanged while still varying with
    viewpoint.
    """

    light: tuple[float, float, float] = (0.45, -0.8, -0.35)
    strength: float = 0.25
    power: float = 12.0
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Sheen:
    """Color shift driven purely by viewing direction.

    color += strength * (0.5 + 0.5 * dot(view_dir, axis)) * tint. Unlike a
    specular lobe this has almost no spatial gradient within one image, so
    it never interacts with depth lookup error; only the difference in
    viewing direction between cameras (parallax angle) makes views disagree.
    """

    axis: tuple[float, float, float] = (0.71, 0.0, 0.71)
    strength: float = 0.5
    tint: tuple[float, float, float] = (1.0, -0.48, -0.15)


@dataclass(frozen=True)
class SphereObj:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    stripes: Stripes | None = None
    gloss: Gloss | None = None
    sheen: Sheen | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class BoxObj:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float]
    stripes: Stripes | None = None
    gloss: Gloss | None = None
    sheen: Sheen | None = None


@dataclass(frozen=True)
class PlaneObj:
    height: float
    albedo: tuple[float, float, float]
    stripes: Stripes | None = None
    gloss: Gloss | None = None
    sheen: Sheen | None = None


@dataclass(frozen=True)
class SceneSpec:
    spheres: tuple[SphereObj, ...] = ()
    boxes: tuple[BoxObj, ...] = ()
    plane: PlaneObj | None = None
    sky_color: tuple[float, float, float] = (0.0, 0.0, 0.0)


def _albedo(obj, points: np.ndarray) -> np.ndarray:
    base = np.asarray(obj.albedo, dtype=np.float64)
    color = np.broadcast_to(base, points.shape[:-1] + (3,)).copy()
    if obj.stripes is not None:
        color = color * (1.0 + obj.stripes.modulation(points))[..., None]
    return np.clip(color, 0.0, 1.0)


def _surface_normal(obj, points: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    if isinstance(obj, SphereObj):
        n = (points - np.asarray(obj.center, dtype=np.float64)) / obj.radius
    elif isinstance(obj, BoxObj):
        lo = np.asarray(obj.lo, dtype=np.float64)
        hi = np.asarray(obj.hi, dtype=np.float64)
        dlo = np.abs(points - lo)
        dhi = np.abs(hi - points)
        face = np.minimum(dlo, dhi).argmin(axis=-1)[..., None]
        sign = np.where(np.take_along_axis(dhi, face, -1)
                        < np.take_along_axis(dlo, face, -1), 1.0, -1.0)
        n = np.zeros_like(points)
        np.put_along_axis(n, face, sign, axis=-1)
    else:
        n = np.zeros_like(points)
        n[..., 1] = 1.0
    # flip toward the viewer so interiors (seen from inside the dome) shade
    flip = (n * dirs).sum(axis=-1) > 0
    return np.where(flip[..., None], -n, n)


def _gloss_term(gloss: Gloss, normal: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    light = np.asarray(gloss.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    reflected = light - 2.0 * (normal @ light)[..., None] * normal
    aligned = np.clip(-(reflected * dirs).sum(axis=-1), 0.0, 1.0)
    return gloss.strength * aligned ** gloss.power


def _shade(obj, points: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    color = _albedo(obj, points)
    if obj.gloss is not None:
        spec = _gloss_term(obj.gloss, _surface_normal(obj, points, dirs), dirs)
        tint = np.asarray(obj.gloss.tint, dtype=np.float64)
        color = color + spec[..., None] * tint
    if obj.sheen is not None:
        axis = np.asarray(obj.sheen.axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        amount = obj.sheen.strength * (0.5 + 0.5 * (dirs @ axis))
        tint = np.asarray(obj.sheen.tint, dtype=np.float64)
        color = color + amount[..., None] * tint
    return np.clip(color, 0.0, 1.0)


def _sphere_hits(obj: SphereObj, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    oc = np.asarray(obj.center, dtype=np.float64) - origin
    b = dirs @ oc
    disc = b * b - (oc @ oc - obj.radius ** 2)
    t = np.full(dirs.shape[:-1], np.inf)
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    near = b - root
    far = b + root
    t = np.where(ok & (near > 1e-9), near, t)
    t = np.where(ok & (near <= 1e-9) & (far > 1e-9), far, t)
    return t


def _box_hits(obj: BoxObj, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    lo = np.asarray(obj.lo, dtype=np.float64)
    hi = np.asarray(obj.hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    # rays parallel to a slab axis: inside -> (-inf, +inf), outside -> empty
    parallel = dirs == 0.0
    inside = (origin >= lo) & (origin <= hi)
    t0 = np.where(parallel, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(parallel, np.where(inside, np.inf, -np.inf), t1)
    tnear = np.minimum(t0, t1).max(axis=-1)
    tfar = np.maximum(t0, t1).min(axis=-1)
    hit = (tnear <= tfar) & (tfar > 1e-9)
    t = np.where(tnear > 1e-9, tnear, tfar)
    return np.where(hit, t, np.inf)


def _plane_hits(obj: PlaneObj, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (obj.height - origin[1]) / dy
    return np.where((dy != 0.0) & (t > 1e-9), t, np.inf)


def render_rays(spec: SceneSpec, origin, dirs: np.ndarray):
    """Closed-form nearest intersection along unit rays.

    Returns (color, depth) with depth = NaN and color = sky where nothing
    is hit. dirs is (..., 3) and must be unit length.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.asarray(dirs, dtype=np.float64)
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    color = np.broadcast_to(np.asarray(spec.sky_color, dtype=np.float64),
                            shape + (3,)).copy()
    objects = list(spec.spheres) + list(spec.boxes)
    if spec.plane is not None:
        objects.append(spec.plane)
    for obj in objects:
        if isinstance(obj, SphereObj):
            t = _sphere_hits(obj, origin, dirs)
        elif isinstance(obj, BoxObj):
            t = _box_hits(obj, origin, dirs)
        else:
            t = _plane_hits(obj, origin, dirs)
        closer = t < best_t
        if closer.any():
            pts = origin + dirs[closer] * t[closer][..., None]
            color[closer] = _shade(obj, pts, dirs[closer])
            best_t = np.where(closer, t, best_t)
    depth = np.where(np.isfinite(best_t), best_t, np.nan)
    return color, depth


def render_rgbd(spec: SceneSpec, pose: Pose, dims: ImageDims):
    """Posed equirect render: (H, W, 3) float32 rgb and (H, W) float32 depth."""
    validate_dims(dims)
    rays = unit_ray_grid(dims)
    dirs = rays @ pose.rotation.T
    color, depth = render_rays(spec, pose.position, dirs)
    return color.astype(np.float32), depth.astype(np.float32)


def grid_positions(center=(0.0, 0.0, 0.0), spacing: float = 0.5) -> np.ndarray:
    """3x3 capture grid in the horizontal plane, row-major over (z, x)."""
    cx, cy, cz = center
    offsets = (-spacing, 0.0, spacing)
    return np.array([[cx + dx, cy, cz + dz] for dz in offsets for dx in offsets],
                    dtype=np.float64)


def sparse_from_gt(rgb: np.ndarray, gt_depth: np.ndarray,
                   gradient_quantile: float = 0.85) -> np.ndarray:
    """Ground-truth depth kept only at high-gradient pixels.

    Stands in for an upstream sparse patch-match stage, which yields points
    where the image has texture to match on.
    """
    y = luma(rgb).astype(np.float64)
    gx = np.roll(y, -1, axis=1) - np.roll(y, 1, axis=1)
    gy = np.vstack([y[1:], y[-1:]]) - np.vstack([y[:1], y[:-1]])
    mag = np.hypot(gx, gy)
    threshold = np.quantile(mag, gradient_quantile)
    sparse = np.where(mag > threshold, gt_depth, np.float32(np.nan))
    return sparse.astype(np.float32)


def _stripe_defaults() -> SceneSpec:
    # dome stays matte with gentle texture: at 18 m the inverse-depth
    # hypothesis spacing exceeds 10%, so high-gradient pixels there would
    # only dilute stereo statistics with depths no hypothesis can resolve
    dome = SphereObj(center=(0.0, 0.4, 0.0), radius=18.0,
                     albedo=(0.55, 0.60, 0.68),
                     stripes=Stripes(axis=0, period=3.0, amplitude=0.06,
                                     axis2=1, period2=3.0))
    # the floor stays fully matte: a slanted surface close to the cameras is
    # where sweep stereo is most fragile, and any view-dependent shading there
    # was measured to lock matching onto the highlight's virtual image
    floor = PlaneObj(height=-1.6, albedo=(0.45, 0.38, 0.32),
                     stripes=Stripes(axis=0, period=0.8, amplitude=0.35,
                                     axis2=2, period2=1.1, radial_falloff=6.0))
    # stripe periods everywhere sit well above the blended resampling
    # footprint: texture near the pixel pitch blurs under warping and that
    # blur lands hardest on whichever inputs a weighting scheme favors,
    # drowning the occlusion and shading signal the scheme exists to resolve
    spheres = (
        dome,
        SphereObj(center=(2.5, -0.4, -1.0), radius=0.8, albedo=(0.66, 0.28, 0.22),
                  stripes=Stripes(axis=1, period=0.56, amplitude=0.4),
                  gloss=Gloss(strength=0.55, power=10.0)),
        SphereObj(center=(-1.8, 0.3, 2.2), radius=0.6, albedo=(0.24, 0.52, 0.45),
                  stripes=Stripes(axis=0, period=0.52, amplitude=0.4),
                  gloss=Gloss(strength=0.45, power=10.0)),
        SphereObj(center=(1.2, 1.3, 2.6), radius=0.5, albedo=(0.75, 0.68, 0.32),
                  stripes=Stripes(axis=2, period=0.48, amplitude=0.35),
                  gloss=Gloss(strength=0.45, power=10.0)),
    )
    # the view-dependent energy lives in specular lobes: peaked highlights
    # shift with viewpoint, so only inputs observing a surface from nearly
    # the target direction record the lobe where the target sees it, and
    # averaging over a wide baseline smears it (a linear-in-direction sheen
    # would do the opposite: symmetric averaging cancels its offsets, which
    # rewards exactly the blends that should lose here). Walls are
    # fronto-parallel and densely striped so matching survives the shading:
    # stripes dominate every census window and anchor the sparse fusion.
    # Each wall's light puts the lobe mid-wall as seen from the capture grid
    boxes = (
        BoxObj(lo=(4.0, -1.6, -4.6), hi=(4.5, 1.6, 3.9), albedo=(0.36, 0.46, 0.60),
               stripes=Stripes(axis=2, period=0.8, amplitude=0.4,
                               gap_center=0.0, gap_halfwidth=0.28, gap_ramp=0.12),
               gloss=Gloss(light=(0.98, -0.07, 0.20), strength=0.45, power=6.0)),
        BoxObj(lo=(-4.5, -1.6, -4.6), hi=(4.5, 1.2, -4.1), albedo=(0.58, 0.50, 0.36),
               stripes=Stripes(axis=0, period=0.74, amplitude=0.4),
               gloss=Gloss(light=(0.21, -0.05, -0.98), strength=0.45, power=6.0)),
        BoxObj(lo=(-4.5, -1.6, -4.6), hi=(-4.0, 1.4, 3.9), albedo=(0.42, 0.52, 0.44),
               stripes=Stripes(axis=2, period=0.88, amplitude=0.4),
               gloss=Gloss(light=(-0.97, -0.10, -0.24), strength=0.45, power=6.0)),
        BoxObj(lo=(-4.5, -1.6, 3.4), hi=(4.5, 1.5, 3.9), albedo=(0.55, 0.42, 0.46),
               stripes=Stripes(axis=0, period=0.82, amplitude=0.4),
               gloss=Gloss(light=(-0.28, -0.03, 0.96), strength=0.45, power=6.0)),
        # textureless panel: recovered by refinement, not by matching
        BoxObj(lo=(-3.8, -1.2, 0.6), hi=(-3.5, 0.9, 2.0), albedo=(0.50, 0.52, 0.54)),
        # near-grid occluders: each hides background differently per capture
        # position, so view-dependent blending has something to win on.
        # Their albedos stay close to the wall/floor palette: raymarching
        # erodes a band around every close silhouette, and the cost of those
        # bands scales with the occluder-to-background contrast
        BoxObj(lo=(0.85, -1.6, 0.95), hi=(1.15, 0.6, 1.25), albedo=(0.50, 0.44, 0.40),
               stripes=Stripes(axis=1, period=0.44, amplitude=0.35),
               gloss=Gloss(strength=0.5, power=10.0)),
        BoxObj(lo=(-1.25, -1.6, -1.25), hi=(-0.95, 0.45, -0.95),
               albedo=(0.44, 0.46, 0.52),
               stripes=Stripes(axis=1, period=0.4, amplitude=0.35)),
        BoxObj(lo=(-1.45, -1.6, 1.0), hi=(-1.2, 0.35, 1.25),
               albedo=(0.52, 0.48, 0.38),
               stripes=Stripes(axis=1, period=0.48, amplitude=0.35)),
        BoxObj(lo=(1.15, -1.6, -1.45), hi=(1.4, 0.5, -1.2),
               albedo=(0.48, 0.42, 0.46),
               stripes=Stripes(axis=1, period=0.44, amplitude=0.35)),
    )
    return SceneSpec(spheres=spheres, boxes=boxes, plane=floor,
                     sky_color=(0.0, 0.0, 0.0))


def _simple_scene() -> SceneSpec:
    dome = SphereObj(center=(0.0, 0.0, 0.0), radius=8.0, albedo=(0.5, 0.55, 0.62),
                     stripes=Stripes(axis=0, period=2.0, amplitude=0.15,
                                     axis2=1, period2=2.0))
    ball = SphereObj(center=(2.0, -0.3, 0.0), radius=0.7, albedo=(0.7, 0.3, 0.25),
                     stripes=Stripes(axis=1, period=0.3, amplitude=0.4))
    floor = PlaneObj(height=-1.5, albedo=(0.4, 0.36, 0.3),
                     stripes=Stripes(axis=0, period=0.9, amplitude=0.3,
                                     axis2=2, period2=0.7, radial_falloff=4.0))
    return SceneSpec(spheres=(dome, ball), plane=floor)


PRESETS = {
    "atrium": _stripe_defaults,
    "simple": _simple_scene,
}


def preset(name: str) -> SceneSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown scene preset {name!r}; "
                         f"choices: {sorted(PRESETS)}") from None


def render_grid(spec: SceneSpec, dims: ImageDims, center=(0.0, 0.0, 0.0),
                spacing: float = 0.5):
    """Render the 3x3 grid; returns list of (id, pose, rgb, depth)."""
    out = []
    for k, pos in enumerate(grid_positions(center, spacing)):
        pose = Pose.identity(pos)
        rgb, depth = render_rgbd(spec, pose, dims)
        out.append((f"frame{k:02d}", pose, rgb, depth))
    return out


CENTER_FRAME_INDEX = 4


def write_fixture(spec: SceneSpec, out_dir: str | Path, dims: ImageDims,
                  spacing: float = 0.5, holdout_center: bool = False,
                  sparse_quantile: float = 0.85,
                  gt_as_refined: bool = True) -> Path:
    """Render the grid fixture to disk.

    Writes per frame: {id}.png, {id}_gt.pfm (registered as refined depth when
    gt_as_refined), {id}_sparse.pfm. With holdout_center the center frame is
    excluded from manifest.json and written to holdout_manifest.json instead.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames: list[CaptureFrame] = []
    holdout: list[CaptureFrame] = []
    for k, (fid, pose, rgb, depth) in enumerate(render_grid(spec, dims, spacing=spacing)):
        write_rgb_png(rgb, out_dir / f"{fid}.png")
        write_depth_pfm(depth, out_dir / f"{fid}_gt.pfm")
        sparse = sparse_from_gt(rgb, depth, sparse_quantile)
        write_depth_pfm(sparse, out_dir / f"{fid}_sparse.pfm")
        cf = CaptureFrame(
            id=fid,
            rgb_path=f"{fid}.png",
            pose=pose,
            sparse_depth_path=f"{fid}_sparse.pfm",
            refined_depth_path=f"{fid}_gt.pfm" if gt_as_refined else None,
            blur_score=blur_score(rgb),
        )
        if holdout_center and k == CENTER_FRAME_INDEX:
            holdout.append(cf)
        else:
            frames.append(cf)
    manifest_path = out_dir / "manifest.json"
    save_manifest(SceneManifest(frames=frames), manifest_path)
    if holdout:
        save_manifest(SceneManifest(frames=holdout), out_dir / "holdout_manifest.json")
    log.info("fixture written to %s (%d frames%s)", out_dir, len(frames),
             ", 1 held out" if holdout else "")
    return manifest_path
