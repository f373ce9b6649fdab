"""Scene manifests, PFM/PNG readers and writers, frame selection helpers.

Manifest schema (JSON, one file per captured scene):

    {
      "world_unit": 1.0,
      "frames": [
        {
          "id": "frame00",
          "rgb": "frame00.png",
          "sparse_depth": "frame00_sparse.pfm",    # optional
          "dense_depth": "frame00_dense.pfm",      # optional
          "refined_depth": "frame00_refined.pfm",  # optional
          "position": [x, y, z],
          "rotation": [r00, r01, ..., r22],        # row-major, world-from-local
          "blur_score": 123.4                      # optional
        }
      ]
    }

Asset paths are relative to the manifest's directory. Depth files are PFM
("Pf" grayscale, 32-bit float, negative scale = little-endian, rows stored
bottom-up); non-positive or non-finite stored values read back as missing.
"""

from __future__ import annotations

import io as _io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import ImageDims, Pose, validate_dims
from .rasters import dims_of, luma, validate_depth, validate_rgb

log = logging.getLogger(__name__)


@dataclass
class CaptureFrame:
    id: str
    rgb_path: str
    pose: Pose
    sparse_depth_path: str | None = None
    dense_depth_path: str | None = None
    refined_depth_path: str | None = None
    blur_score: float = 0.0


@dataclass
class SceneManifest:
    frames: list[CaptureFrame]
    world_unit: float = 1.0
    root: Path | None = None  # directory asset paths resolve against; not serialized

    def __post_init__(self):
        if not self.frames:
            raise ValueError("manifest must contain at least one frame")
        seen = set()
        for f in self.frames:
            if f.id in seen:
                raise ValueError(f"duplicate frame id {f.id!r} in manifest")
            seen.add(f.id)

    def frame_by_id(self, frame_id: str) -> CaptureFrame:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(frame_id)

    def positions(self) -> np.ndarray:
        return np.array([f.pose.position for f in self.frames], dtype=np.float64)

    def resolve(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)


def _frame_to_dict(f: CaptureFrame) -> dict:
    d = {
        "id": f.id,
        "rgb": f.rgb_path,
        "position": [float(x) for x in f.pose.position],
        "rotation": [float(x) for x in f.pose.rotation.reshape(9)],
        "blur_score": float(f.blur_score),
    }
    if f.sparse_depth_path:
        d["sparse_depth"] = f.sparse_depth_path
    if f.dense_depth_path:
        d["dense_depth"] = f.dense_depth_path
    if f.refined_depth_path:
        d["refined_depth"] = f.refined_depth_path
    return d


def _frame_from_dict(d: dict) -> CaptureFrame:
    pose = Pose(np.array(d["position"], dtype=np.float64),
                np.array(d["rotation"], dtype=np.float64).reshape(3, 3))
    return CaptureFrame(
        id=str(d["id"]),
        rgb_path=str(d["rgb"]),
        pose=pose,
        sparse_depth_path=d.get("sparse_depth"),
        dense_depth_path=d.get("dense_depth"),
        refined_depth_path=d.get("refined_depth"),
        blur_score=float(d.get("blur_score", 0.0)),
    )


def save_manifest(manifest: SceneManifest, path: str | Path) -> None:
    """Write the manifest in canonical form (sorted keys, 2-space indent)."""
    doc = {
        "world_unit": float(manifest.world_unit),
        "frames": [_frame_to_dict(f) for f in manifest.frames],
    }
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text)


def load_manifest(path: str | Path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed manifest {path}: {e}") from e
    frames = [_frame_from_dict(d) for d in doc.get("frames", [])]
    return SceneManifest(frames=frames,
                         world_unit=float(doc.get("world_unit", 1.0)),
                         root=path.parent)


def write_depth_pfm(depth: np.ndarray, path: str | Path) -> None:
    """PFM grayscale writer; missing (NaN) stores as 0.0 which reads back missing."""
    validate_depth(depth)
    h, w = depth.shape
    data = np.where(np.isfinite(depth), depth, np.float32(0.0)).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(data[::-1].tobytes())


def read_depth_pfm(path: str | Path, expected_dims: ImageDims | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"depth file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            raise ValueError(f"{path}: color PFM not supported, expected grayscale 'Pf'")
        if magic != b"Pf":
            raise ValueError(f"{path}: bad PFM magic {magic!r}")
        dims_line = fh.readline().split()
        if len(dims_line) != 2:
            raise ValueError(f"{path}: bad PFM dimension line")
        w, h = int(dims_line[0]), int(dims_line[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        raw = fh.read(w * h * 4)
    if len(raw) != w * h * 4:
        raise ValueError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=f"{endian}f4").reshape(h, w)[::-1]
    data = data.astype(np.float32)
    bad = ~np.isfinite(data) | (data <= 0.0)
    depth = np.where(bad, np.float32(np.nan), data)
    validate_dims(ImageDims(w, h))
    if expected_dims is not None and (w, h) != tuple(expected_dims):
        raise ValueError(f"{path}: dims {w}x{h} do not match expected "
                         f"{expected_dims.width}x{expected_dims.height}")
    return depth


def encode_png(rgb: np.ndarray) -> bytes:
    """Deterministic 8-bit PNG encoding shared by the CLI and the service.

    Accepts any (H, W, 3) float image in [0, 1]; unlike panorama rasters no
    2:1 aspect is required (perspective crops go through here too).
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {rgb.shape}")
    if not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValueError("image channels must be finite and lie in [0, 1]")
    q = np.round(rgb.astype(np.float64) * 255.0).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_rgb_png(rgb: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(rgb))


def read_rgb_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    img = Image.open(path)
    if img.mode != "RGB":
        raise ValueError(f"{path}: unsupported PNG mode {img.mode}, expected 8-bit RGB")
    arr = np.asarray(img, dtype=np.uint8)
    rgb = (arr.astype(np.float32) / 255.0)
    dims_of(rgb)
    return rgb


def grayscale_png_bytes(values: np.ndarray) -> bytes:
    """8-bit grayscale PNG from a [0,1] float raster (used for depth previews)."""
    q = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(q, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def blur_score(rgb: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response over luma (wrap-x, clamp-y)."""
    y = luma(rgb).astype(np.float64)
    up = np.vstack([y[:1], y[:-1]])
    down = np.vstack([y[1:], y[-1:]])
    left = np.roll(y, 1, axis=1)
    right = np.roll(y, -1, axis=1)
    lap = up + down + left + right - 4.0 * y
    return float(np.var(lap))


def select_frames(frames: list[CaptureFrame], stride: int = 10,
                  blur_quantile: float = 0.1,
                  min_score: float | None = None) -> list[CaptureFrame]:
    """Every stride-th frame, substituting blurred picks.

    The blur threshold is the given quantile of all frames' scores, raised to
    min_score when that absolute floor is supplied. A chosen frame scoring
    below it is replaced by the nearest-index frame at or above it (ties
    resolved toward the higher index). Substitutions that collide with an
    already-selected frame are dropped to keep the list unique.
    """
    if not frames:
        raise ValueError("no frames to select from")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    scores = np.array([f.blur_score for f in frames], dtype=np.float64)
    threshold = float(np.quantile(scores, blur_quantile))
    if min_score is not None:
        threshold = max(threshold, float(min_score))
    sharp = scores >= threshold
    if not sharp.any():
        raise ValueError("no frame scores at or above the blur threshold")
    picked: list[int] = []
    for idx in range(0, len(frames), stride):
        if sharp[idx]:
            choice = idx
        else:
            candidates = np.nonzero(sharp)[0]
            dist = np.abs(candidates - idx)
            best = candidates[dist == dist.min()].max()
            choice = int(best)
            log.debug("frame %d blurred (%.3g < %.3g), substituting %d",
                      idx, scores[idx], threshold, choice)
        if choice not in picked:
            picked.append(choice)
    return [frames[i] for i in picked]


def k_nearest(manifest: SceneManifest, target_position, k: int) -> list[int]:
    """Indices of the K frames nearest target_position, ascending distance,
    distance ties broken by ascending frame index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    target = np.asarray(target_position, dtype=np.float64).reshape(3)
    dists = np.linalg.norm(manifest.positions() - target, axis=1)
    order = np.argsort(dists, kind="stable")
    return [int(i) for i in order[:k]]


@dataclass
class LoadedFrame:
    """A capture frame with its rasters resident in memory."""

    frame: CaptureFrame
    rgb: np.ndarray | None = None
    sparse: np.ndarray | None = None
    dense: np.ndarray | None = None
    refined: np.ndarray | None = None

    @property
    def id(self) -> str:
        return self.frame.id

    @property
    def pose(self) -> Pose:
        return self.frame.pose


def load_frames(manifest: SceneManifest,
                need: tuple[str, ...] = ("rgb",)) -> list[LoadedFrame]:
    """Load the requested assets ("rgb", "sparse", "dense", "refined") for
    every frame. Assets whose path is absent in the manifest load as None;
    a named asset the caller needs that has a path but no file raises."""
    out = []
    for f in manifest.frames:
        lf = LoadedFrame(frame=f)
        if "rgb" in need:
            lf.rgb = read_rgb_png(manifest.resolve(f.rgb_path))
        if "sparse" in need and f.sparse_depth_path:
            lf.sparse = read_depth_pfm(manifest.resolve(f.sparse_depth_path))
        if "dense" in need and f.dense_depth_path:
            lf.dense = read_depth_pfm(manifest.resolve(f.dense_depth_path))
        if "refined" in need and f.refined_depth_path:
            lf.refined = read_depth_pfm(manifest.resolve(f.refined_depth_path))
        out.append(lf)
    return out
