"""Command line front end.

Subcommands map one-to-one onto the pipeline stages:

    make-fixture    render a synthetic capture to PNG + PFM + manifest.json
    estimate-depth  sweep-stereo dense depth for frames in a manifest
    refine          iterative cross-frame depth refinement
    synthesize      render a novel view to PNG (optionally depth to PFM)
    evaluate        image comparison metrics as one JSON line
    serve           run the interactive session + HTTP service

Exit codes: 0 success, 1 runtime failure, 2 usage errors and missing inputs
(the offending path is named in the message).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, scene
from .densedepth import AdCensusParams, estimate_dense_depth, inverse_depth_hypotheses
from .geometry import ImageDims, Pose, rotation_yaw_pitch_roll
from .io import (encode_png, load_frames, load_manifest, read_rgb_png,
                 save_manifest, write_depth_pfm)
from .metrics import evaluate_pair, latitude_band_mask
from .refine import RefinementConfig, refine_all
from .service import serve
from .synthesis import WEIGHT_MODES, SynthesisConfig, synthesize_view

log = logging.getLogger(__name__)


def _parse_pose(text: str) -> Pose:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (3, 6):
        raise ValueError("pose must be x,y,z or x,y,z,yaw,pitch,roll")
    vals = [float(p) for p in parts]
    rot = rotation_yaw_pitch_roll(*vals[3:]) if len(vals) == 6 else np.eye(3)
    return Pose(np.array(vals[:3], dtype=np.float64), rot)


def _select_ids(manifest, spec: str | None) -> list[str]:
    if not spec:
        return [f.id for f in manifest.frames]
    ids = [s.strip() for s in spec.split(",") if s.strip()]
    for fid in ids:
        manifest.frame_by_id(fid)  # raises KeyError for unknown ids
    return ids


def cmd_make_fixture(args) -> int:
    spec = scene.preset(args.scene)
    if args.width % 2:
        raise ValueError("width must be even (2:1 equirect)")
    dims = ImageDims(args.width, args.width // 2)
    path = scene.write_fixture(spec, args.out, dims, spacing=args.spacing,
                               holdout_center=args.holdout_center,
                               sparse_quantile=args.sparse_quantile,
                               gt_as_refined=not args.no_gt_refined)
    print(path)
    return 0


def cmd_estimate_depth(args) -> int:
    manifest = load_manifest(args.manifest)
    frames = load_frames(manifest, need=("rgb",))
    targets = _select_ids(manifest, args.frames)
    hyps = inverse_depth_hypotheses(args.min_depth, args.max_depth, args.hypotheses)
    params = AdCensusParams()
    index = {f.id: i for i, f in enumerate(frames)}
    for fid in targets:
        depth, meta = estimate_dense_depth(index[fid], frames,
                                           n_neighbors=args.neighbors,
                                           hyps=hyps, params=params,
                                           threads=args.threads)
        rel = f"{fid}_dense.pfm"
        write_depth_pfm(depth, manifest.resolve(rel))
        manifest.resolve(f"{fid}_dense.json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n")
        manifest.frame_by_id(fid).dense_depth_path = rel
        coverage = float(np.isfinite(depth).mean())
        print(f"{fid}: dense depth -> {rel} (coverage {coverage:.3f})")
    save_manifest(manifest, args.manifest)
    return 0


def cmd_refine(args) -> int:
    manifest = load_manifest(args.manifest)
    frames = load_frames(manifest, need=("sparse", "dense"))
    cfg = RefinementConfig(increase_rate=args.rate,
                           raymarch_neighbors=args.neighbors,
                           iterations=args.iterations)
    refined, report = refine_all(frames, cfg, threads=args.threads)
    for fid, depth in refined.items():
        rel = f"{fid}_refined.pfm"
        write_depth_pfm(depth, manifest.resolve(rel))
        manifest.frame_by_id(fid).refined_depth_path = rel
        print(f"{fid}: refined depth -> {rel}")
    save_manifest(manifest, args.manifest)
    manifest.resolve("refine_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_synthesize(args) -> int:
    manifest = load_manifest(args.manifest)
    frames = load_frames(manifest, need=("rgb", "refined"))
    cfg = SynthesisConfig(weight_mode=args.weight_mode)
    pose = _parse_pose(args.pose)
    dims = ImageDims(args.width, args.width // 2) if args.width else None
    result = synthesize_view(pose, frames, cfg, dims=dims, threads=args.threads)
    Path(args.out).write_bytes(encode_png(result.rgb))
    if args.depth_out:
        write_depth_pfm(result.depth, args.depth_out)
    log.info("synthesis stats: %s", result.stats)
    print(f"{args.out}: hole fraction {result.stats['hole_fraction']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    pred = read_rgb_png(args.pred)
    truth = read_rgb_png(args.truth)
    if args.mask == "latitude60":
        mask = latitude_band_mask(truth.shape[1], truth.shape[0])
        desc = "latitude band |phi| <= 60 deg"
    else:
        mask, desc = None, "full image"
    report = evaluate_pair(pred, truth, mask, desc)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    serve(args.manifest, bind=args.bind, http_bind=args.http,
          threads=args.threads, static_dir=args.static)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panosynth",
                                description="panoramic RGBD novel view synthesis")
    p.add_argument("--version", action="version", version=f"panosynth {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("make-fixture", help="render a synthetic capture fixture")
    q.add_argument("--scene", default="atrium", choices=sorted(scene.PRESETS))
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--width", type=int, default=512, help="panorama width (2:1)")
    q.add_argument("--spacing", type=float, default=0.5, help="grid spacing, meters")
    q.add_argument("--holdout-center", action="store_true",
                   help="keep the center frame out of the manifest")
    q.add_argument("--sparse-quantile", type=float, default=0.85)
    q.add_argument("--no-gt-refined", action="store_true",
                   help="do not register ground-truth depth as refined depth")
    q.set_defaults(func=cmd_make_fixture)

    q = sub.add_parser("estimate-depth", help="sweep-stereo dense depth")
    q.add_argument("--manifest", required=True)
    q.add_argument("--frames", help="comma separated frame ids (default: all)")
    q.add_argument("--neighbors", type=int, default=4)
    q.add_argument("--hypotheses", type=int, default=64)
    q.add_argument("--min-depth", type=float, default=0.5)
    q.add_argument("--max-depth", type=float, default=50.0)
    q.add_argument("--threads", type=int, default=1)
    q.set_defaults(func=cmd_estimate_depth)

    q = sub.add_parser("refine", help="iterative cross-frame depth refinement")
    q.add_argument("--manifest", required=True)
    q.add_argument("--iterations", type=int, default=3)
    q.add_argument("--neighbors", type=int, default=4,
                   help="raymarch consistency neighbors")
    q.add_argument("--rate", type=float, default=0.005,
                   help="relative march step")
    q.add_argument("--threads", type=int, default=1)
    q.set_defaults(func=cmd_refine)

    q = sub.add_parser("synthesize", help="render a novel view")
    q.add_argument("--manifest", required=True)
    q.add_argument("--pose", required=True, help="x,y,z or x,y,z,yaw,pitch,roll")
    q.add_argument("--out", required=True, help="output PNG path")
    q.add_argument("--depth-out", help="optional output depth PFM path")
    q.add_argument("--weight-mode", default="full", choices=list(WEIGHT_MODES))
    q.add_argument("--width", type=int,
                   help="output panorama width (default: input size)")
    q.add_argument("--threads", type=int, default=1)
    q.set_defaults(func=cmd_synthesize)

    q = sub.add_parser("evaluate", help="compare two images")
    q.add_argument("--pred", required=True)
    q.add_argument("--truth", required=True)
    q.add_argument("--mask", default="none", choices=["none", "latitude60"])
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("serve", help="run the interactive service")
    q.add_argument("--manifest", required=True)
    q.add_argument("--bind", default="127.0.0.1:7077", help="session protocol host:port")
    q.add_argument("--http", default="127.0.0.1:7078", help="HTTP host:port")
    q.add_argument("--threads", type=int, default=1)
    q.add_argument("--static", help="directory of viewer files served at /")
    q.set_defaults(func=cmd_serve)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyError as e:
        print(f"error: unknown frame id {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
