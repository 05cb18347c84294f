"""Command line entry point: ``fls-mosaic mosaic ...`` and ``fls-mosaic simgen ...``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import frameio
from .geometry import BeamGeometry
from .pipeline import DEFAULT_MPP, MODES, PipelineError, RunConfig, run
from .registration import RegistrationConfig
from .stats import StatConfig

log = logging.getLogger("flsmosaic")


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected dx,dy,dtheta")
    return parts[0], parts[1], parts[2]


def _pose_source(text: str) -> tuple[str, Path | None]:
    name, _, path = text.partition("=")
    if name not in ("odometry", "registration", "file"):
        raise argparse.ArgumentTypeError("pose source is odometry, registration or file=<path>")
    if name == "file" and not path:
        raise argparse.ArgumentTypeError("use --poses file=<path>")
    return name, Path(path) if path else None


# flag name -> (config-file key, parser)
_MOSAIC_KEYS = {
    "input": str, "geometry": str, "poses": str, "mode": str, "ls": int, "ll": int, "lthres": int,
    "mpp": float, "out": str, "no_clahe": None, "dump_scores": str, "threads": int, "stride": int,
    "beta": float, "spatial_window": int, "clip_limit": float,
}


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Fill flags from a key-value file; flags given on the command line win."""
    kv = frameio.read_keyvalue(args.config)
    given = {a.split("=", 1)[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in kv.items():
        if key not in _MOSAIC_KEYS:
            parser.error(f"{args.config}: unknown key {key!r}")
        if key in given:
            continue
        conv = _MOSAIC_KEYS[key]
        if key == "no_clahe":
            args.no_clahe = _bool(value)
        elif key == "poses":
            args.poses = _pose_source(value)
        else:
            setattr(args, key, conv(value))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fls-mosaic", description="Forward-looking sonar mosaicing.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mosaic", help="build plain-average and/or score-selected mosaics")
    m.add_argument("--config", help="key-value file supplying any flag (flags override it)")
    m.add_argument("--input", help="frame directory, or dataset directory with frames/")
    m.add_argument("--geometry", help="geometry sidecar (default: geometry.txt next to the frames)")
    m.add_argument("--poses", type=_pose_source, default=("odometry", None),
                   help="odometry | registration | file=<path> (default odometry)")
    m.add_argument("--mode", choices=MODES, default="both")
    m.add_argument("--ls", type=int, default=StatConfig.short_window, help="short window L_s (frames)")
    m.add_argument("--ll", type=int, default=StatConfig.long_window, help="long window L_l (frames)")
    m.add_argument("--lthres", type=int, default=15, help="contributions kept per cell")
    m.add_argument("--mpp", type=float, default=DEFAULT_MPP, help="mosaic metres per pixel")
    m.add_argument("--beta", type=float, default=StatConfig.background_gain, help="background gain")
    m.add_argument("--spatial-window", type=int, default=StatConfig.spatial_window)
    m.add_argument("--clip-limit", type=float, default=2.0, help="CLAHE clip limit")
    m.add_argument("--out", help="output directory")
    m.add_argument("--no-clahe", action="store_true")
    m.add_argument("--dump-scores", help="write per-frame scores as 16-bit PNGs here")
    m.add_argument("--threads", type=int, default=1)
    m.add_argument("--stride", type=int, default=1, help="use every K-th frame")

    s = sub.add_parser("simgen", help="render a synthetic survey dataset")
    s.add_argument("--scene", help="JSON scene description (default: built-in one-object scene)")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--drift", type=_triple, default=(0.0, 0.0, 0.0),
                   help="odometry drift per frame: dx,dy (m, world frame), dtheta (deg)")
    s.add_argument("--drift-start", type=int, default=0, help="first frame (0-based) with drift")
    s.add_argument("--speckle", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", required=True)
    return p


def _mosaic(args, parser, argv) -> int:
    if args.config:
        _apply_config_file(args, parser, argv)
    if not args.input or not args.out:
        parser.error("mosaic needs --input and --out (on the command line or in --config)")
    source, pose_file = args.poses
    cfg = RunConfig(
        input_dir=Path(args.input),
        out_dir=Path(args.out),
        geometry_path=Path(args.geometry) if args.geometry else None,
        pose_source=source,
        pose_file=pose_file,
        mode=args.mode,
        meters_per_pixel=args.mpp,
        clahe=not args.no_clahe,
        clahe_clip=args.clip_limit,
        stats=StatConfig(args.spatial_window, args.ls, args.ll, args.beta),
        l_thres=args.lthres,
        registration=RegistrationConfig(),
        dump_scores=Path(args.dump_scores) if args.dump_scores else None,
        threads=args.threads,
        stride=args.stride,
    )
    report = run(cfg)
    print(f"{report.frames} frames, poses from {report.pose_source}, grid {report.grid_shape[0]}x"
          f"{report.grid_shape[1]} at {report.meters_per_pixel} m/px -> {cfg.out_dir}")
    for stage, secs in report.timing.items():
        print(f"  {stage:16s} {secs:8.2f} s")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _simgen(args) -> int:
    from . import simgen

    extras = {}
    if args.scene:
        scene, extras = simgen.load_scene(args.scene)
    else:
        scene = simgen.default_scene()
    dx, dy, dth = args.drift
    traj_kw = dict(extras.get("trajectory", {}))
    traj_kw.update(n_frames=args.frames, drift_translation=(dx, dy), drift_rotation=math.radians(dth),
                   drift_start=args.drift_start, rng_seed=args.seed)
    if "start" in traj_kw:
        traj_kw["start"] = tuple(traj_kw["start"])
    traj = simgen.TrajectorySpec(**traj_kw)
    img_kw = dict(extras.get("imaging", {}))
    if args.speckle is not None:
        img_kw["speckle"] = args.speckle
    if "gain_profile" in img_kw:
        img_kw["gain_profile"] = tuple(img_kw["gain_profile"])
    if "geometry" in img_kw:
        geo = dict(img_kw["geometry"])
        if "horizontal_fov_deg" in geo:
            geo["horizontal_fov"] = math.radians(geo.pop("horizontal_fov_deg"))
        img_kw["geometry"] = BeamGeometry(**geo)
    imaging = simgen.ImagingSpec(**img_kw)
    ds = simgen.generate_dataset(scene, traj, imaging, args.out, seed=args.seed, threads=args.threads)
    print(f"wrote {len(ds.frame_files)} frames to {ds.directory}")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "mosaic":
            return _mosaic(args, parser, argv)
        return _simgen(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
