"""Command-line interface.

Subcommands: synth, integrate, complete, sfm, vo, eval-depth, eval-ate.
Exit codes: 0 success, 1 usage error, 2 data or convergence error. All
randomness sits behind --seed, so identical invocations produce bit-identical
output files.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .alignment import (AlignmentSettings, DegenerateProblemError,
                        NonFiniteCostError, ScaledPrimitive, two_view_sfm)
from .bundle import (BundleFormatError, load_bundle, load_sparse_depth,
                     save_bundle)
from .completion import CompletionError, SparseDepth, complete, fuse, render_depth
from .evaluation import MetricError, ate_rmse, depth_metrics
from .geometry import Intrinsics, save_ply
from .integration import integrate_bundle
from .odometry import (InitializationError, MappingError, SpawnError,
                       TrackingLostError, VOConfig, run_vo)
from .synth import (SceneGenerationError, orbit_spec, static_spec, synth_scene,
                    two_view_spec)
from .trajectory import Trajectory, pose_to_tum_line

USAGE_ERROR = 1
DATA_ERROR = 2

DATA_ERRORS = (BundleFormatError, CompletionError, MetricError,
               DegenerateProblemError, NonFiniteCostError, SceneGenerationError,
               InitializationError, TrackingLostError, MappingError, SpawnError,
               FileNotFoundError, ValueError, OSError)


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_ERROR)


def _load_depth_f32(path: Path, intr: Intrinsics) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != intr.width * intr.height:
        raise ValueError(f"{path}: expected {intr.width * intr.height} "
                         f"float32 values, found {raw.size}")
    return raw.reshape(intr.height, intr.width).astype(np.float64)


def _save_depth_f32(path: Path, depth: np.ndarray) -> None:
    depth.astype("<f4").tofile(path)


def cmd_synth(args) -> int:
    if args.scene == "two-view":
        spec = two_view_spec(seed=args.seed)
    elif args.scene == "orbit":
        spec = orbit_spec(seed=args.seed, n_frames=args.frames)
    else:
        spec = static_spec(seed=args.seed, n_frames=args.frames)
    if args.min_segment_area is not None:
        spec.min_segment_area = args.min_segment_area
    if args.texture_amplitude is not None:
        spec.texture_amplitude = args.texture_amplitude
    bundles = synth_scene(spec, rng_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, b in enumerate(bundles):
        save_bundle(b, out / f"frame_{i:04d}")
    print(f"wrote {len(bundles)} bundles to {out}")
    return 0


def cmd_integrate(args) -> int:
    bundle = load_bundle(args.bundle)
    prims = integrate_bundle(bundle, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # one float32 value per segment pixel, in segments.bin order
    payload = np.concatenate([p.log_udepth for p in prims]).astype("<f4")
    payload.tofile(out / "log_udepth.f32")
    with open(out / "convergence.txt", "w") as f:
        for i, p in enumerate(prims):
            f.write(f"{i} {int(p.converged)} "
                    f"{int(p.constant_normal_fallback)}\n")
    print(f"integrated {len(prims)} segments -> {out / 'log_udepth.f32'}")
    return 0


def cmd_complete(args) -> int:
    bundle = load_bundle(args.bundle)
    sparse = SparseDepth(load_sparse_depth(args.sparse))
    dm = complete(bundle, sparse)
    _save_depth_f32(Path(args.out), dm.depth)
    print(f"completed depth -> {args.out} "
          f"({int(dm.defined.sum())} defined pixels)")
    if args.ply:
        prims = integrate_bundle(bundle)
        from .completion import fit_scale
        scaled = [ScaledPrimitive(p, ls) for p in prims
                  if (ls := fit_scale(p, sparse)) is not None]
        save_ply(fuse(scaled, bundle.intr, image=bundle.image), args.ply)
        print(f"point cloud -> {args.ply}")
    return 0


def cmd_sfm(args) -> int:
    ref = load_bundle(args.ref)
    targets = [load_bundle(t) for t in args.targets]
    prims = integrate_bundle(ref)
    settings = AlignmentSettings(iterations=args.iterations, levels=args.levels)
    res = two_view_sfm(ref, prims, targets, settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "poses.txt", "w") as f:
        f.write(pose_to_tum_line(ref.timestamp, res.poses[0]) + "\n")
        for tb, p in zip(targets, res.poses[1:]):
            f.write(pose_to_tum_line(tb.timestamp, p) + "\n")
    scaled = [ScaledPrimitive(p, float(s))
              for p, s in zip(prims, res.log_scales[0])]
    cloud = fuse(scaled, ref.intr, image=ref.image)
    save_ply(cloud, out / "cloud.ply")
    _save_depth_f32(out / "depth.f32", render_depth(cloud, ref.intr).depth)
    print(f"sfm: cost {res.final_cost:.6f}, outputs in {out}")
    return 0


def _parse_vo_config(path: str | None) -> VOConfig:
    cfg = VOConfig()
    if path is None:
        return cfg
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not hasattr(cfg, key):
            raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
        cur = getattr(cfg, key)
        if isinstance(cur, bool):
            setattr(cfg, key, val.lower() in ("1", "true", "yes"))
        elif isinstance(cur, int):
            setattr(cfg, key, int(val))
        elif isinstance(cur, float):
            setattr(cfg, key, float(val))
        elif isinstance(cur, str):
            setattr(cfg, key, val)
        else:
            raise ValueError(f"{path}:{ln}: key {key!r} is not settable "
                             "from a config file")
    return cfg


def cmd_vo(args) -> int:
    frame_dirs = sorted(p for p in Path(args.frames).iterdir() if p.is_dir())
    if len(frame_dirs) < 2:
        raise ValueError(f"{args.frames}: need at least two bundle "
                         f"directories, found {len(frame_dirs)}")
    frames = [load_bundle(p) for p in frame_dirs]
    config = _parse_vo_config(args.config)
    result = run_vo(frames, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.trajectory.save(out / "trajectory.txt")
    for kf_id, cloud in result.keyframe_clouds:
        save_ply(cloud, out / f"keyframe_{kf_id}.ply")
    with open(out / "run_log.txt", "w") as f:
        for line in result.log_lines:
            f.write(line + "\n")
        if result.tracking_lost:
            f.write("TRACKING LOST\n")
    print(f"vo: {len(result.trajectory)} poses, "
          f"{len(result.keyframe_clouds)} keyframes -> {out}"
          + (" [tracking lost]" if result.tracking_lost else ""))
    return DATA_ERROR if result.tracking_lost else 0


def cmd_eval_depth(args) -> int:
    intr = Intrinsics.load(args.intr)
    pred = _load_depth_f32(Path(args.pred), intr)
    gt = _load_depth_f32(Path(args.gt), intr)
    rep = depth_metrics(pred, gt, d_min=args.d_min, d_max=args.d_max)
    print(rep)
    return 0


def cmd_eval_ate(args) -> int:
    est = Trajectory.load(args.est)
    gt = Trajectory.load(args.gt)
    print(f"ATE RMSE {ate_rmse(est, gt):.6f} m "
          f"({len(est)} est / {len(gt)} gt poses)")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="segvo",
                description="Segment-based monocular geometry toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic oracle scene")
    s.add_argument("--scene", choices=["two-view", "orbit", "static"],
                   default="two-view")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--min-segment-area", type=int, default=None)
    s.add_argument("--texture-amplitude", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("integrate", help="per-segment normal integration")
    s.add_argument("--bundle", required=True)
    s.add_argument("--mode", choices=["full", "const-normal", "const-depth"],
                   default="full")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_integrate)

    s = sub.add_parser("complete", help="sparse-to-dense depth completion")
    s.add_argument("--bundle", required=True)
    s.add_argument("--sparse", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ply", default=None)
    s.set_defaults(func=cmd_complete)

    s = sub.add_parser("sfm", help="few-view structure from motion")
    s.add_argument("--ref", required=True)
    s.add_argument("--targets", nargs="+", required=True)
    s.add_argument("--iterations", type=int, default=400)
    s.add_argument("--levels", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sfm)

    s = sub.add_parser("vo", help="keyframe visual odometry over a sequence")
    s.add_argument("--frames", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_vo)

    s = sub.add_parser("eval-depth", help="depth error metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--intr", required=True)
    s.add_argument("--d-min", type=float, default=0.2)
    s.add_argument("--d-max", type=float, default=5.0)
    s.set_defaults(func=cmd_eval_depth)

    s = sub.add_parser("eval-ate", help="trajectory error after Sim(3) alignment")
    s.add_argument("--est", required=True)
    s.add_argument("--gt", required=True)
    s.set_defaults(func=cmd_eval_ate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
