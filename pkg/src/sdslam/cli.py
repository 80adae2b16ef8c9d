"""Command-line surface: run the odometry/SLAM pipeline over a dataset,
evaluate trajectories against ground truth, and generate synthetic
KITTI-layout datasets."""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from . import graph as gr, metrics, synth
from .config import EngineConfig, load_config
from .datasets import (
    load_euroc,
    load_kitti,
    read_trajectory_tum,
    write_ply,
    write_trajectory_tum,
)
from .engine import OdometryEngine
from .errors import SlamError

TIMING_COLUMNS = ("tracking", "mapping", "constraint_search", "optimization")


def _load_frames(args):
    """Return (frame iterable, frame count, ground-truth Trajectory or None)."""
    if args.dataset == "synth":
        scene = synth.load_scene(args.path)
        frames = (synth.render(scene, i)[0] for i in range(len(scene.trajectory)))
        return frames, len(scene.trajectory), scene.trajectory
    if args.dataset == "kitti":
        source = load_kitti(args.path, args.sequence)
    else:
        source = load_euroc(args.path)
    return iter(source), len(source), source.ground_truth


def cmd_run(args):
    cfg = load_config(args.config) if args.config else EngineConfig()
    if args.seed is not None:
        cfg.ransac_seed = args.seed
    if args.deterministic:
        cfg.single_thread = True

    frames, count, gt = _load_frames(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    engine = OdometryEngine(cfg, slam=(args.mode == "slam"))
    engine.initialize(next(frames))
    lost = 0
    timing_rows = []
    for frame in frames:
        outcome = engine.process(frame)
        if outcome.kind == "lost":
            lost += 1
        timing_rows.append([outcome.timings[c] for c in TIMING_COLUMNS])
    engine.finish()

    write_trajectory_tum(engine.trajectory(), out / "trajectory.txt")
    gr.write_g2o(engine.graph, out / "graph.g2o")
    write_ply(engine.keyframes.values(), out / "map.ply")
    with open(out / "timings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMING_COLUMNS)
        for row in timing_rows:
            writer.writerow([f"{v:.6f}" for v in row])

    print(f"processed {count} frames, {len(engine.keyframes)} keyframes, "
          f"{lost} lost")
    if lost:
        print(f"warning: tracking lost on {lost} frame(s)", file=sys.stderr)
    if gt is not None and len(engine.trajectory()) >= 3:
        try:
            report = metrics.ate(engine.trajectory(), gt)
            print(f"ATE RMSE vs ground truth: {report.rmse:.4f} m")
        except SlamError:
            pass
    return 0


def cmd_eval(args):
    est = read_trajectory_tum(args.est)
    gt = read_trajectory_tum(args.gt)
    rows = []
    if args.metric == "ate":
        report = metrics.ate(est, gt)
        print(f"ATE RMSE:   {report.rmse:.6f} m")
        print(f"ATE median: {report.median:.6f} m")
        rows.append([args.est, "ate", "rmse", report.rmse])
        rows.append([args.est, "ate", "median", report.median])
    elif args.metric == "rpe":
        report = metrics.rpe(est, gt)
        print(f"RPE translation: {report.translation_percent:.4f} %")
        print(f"RPE rotation:    {report.rotation_deg_per_m:.6f} deg/m")
        for length, (tp, rd, n) in sorted(report.per_segment.items()):
            print(f"  {length:6.0f} m: {tp:8.4f} %  {rd:.6f} deg/m  ({n} segments)")
        rows.append([args.est, "rpe", "translation_percent", report.translation_percent])
        rows.append([args.est, "rpe", "rotation_deg_per_m", report.rotation_deg_per_m])
    else:  # improve: est is the slam run, --baseline the odometry run
        if args.baseline is None:
            raise SlamError("--metric improve requires --baseline")
        baseline = read_trajectory_tum(args.baseline)
        vo = metrics.ate(baseline, gt).rmse
        slam = metrics.ate(est, gt).rmse
        gain = metrics.improvement(vo, slam)
        print(f"odometry ATE RMSE: {vo:.6f} m")
        print(f"slam ATE RMSE:     {slam:.6f} m")
        print(f"improvement:       {gain:.2f} %")
        rows.append([args.est, "improve", "percent", gain])
    metrics.write_metrics_csv(rows, args.csv)
    return 0


def _write_png16(image, path):
    data = np.clip(np.round(image.data * 65535.0), 0, 65535).astype(np.uint16)
    PilImage.fromarray(data).save(path)


def cmd_synth(args):
    scene = synth.load_scene(args.scene)
    out = Path(args.out)
    (out / "image_0").mkdir(parents=True, exist_ok=True)
    (out / "image_1").mkdir(parents=True, exist_ok=True)

    for i in range(len(scene.trajectory)):
        frame, _ = synth.render(scene, i)
        _write_png16(frame.left, out / "image_0" / f"{i:06d}.png")
        _write_png16(frame.right, out / "image_1" / f"{i:06d}.png")

    with open(out / "times.txt", "w") as fh:
        for t in scene.trajectory.timestamps:
            fh.write(f"{t:.6e}\n")

    intr = scene.rig.intrinsics
    p0 = np.array([[intr.fx, 0.0, intr.cx, 0.0],
                   [0.0, intr.fy, intr.cy, 0.0],
                   [0.0, 0.0, 1.0, 0.0]])
    p1 = p0.copy()
    p1[0, 3] = -intr.fx * scene.rig.baseline
    with open(out / "calib.txt", "w") as fh:
        for name, p in (("P0", p0), ("P1", p1)):
            fh.write(name + ": " + " ".join(f"{v:.12e}" for v in p.ravel()) + "\n")

    # KITTI pose convention: 3x4 camera-to-world matrix per line
    with open(out / "poses.txt", "w") as fh:
        for pose in scene.trajectory.poses:
            m = np.hstack([pose.rotation, pose.translation[:, None]])
            fh.write(" ".join(f"{v:.17g}" for v in m.ravel()) + "\n")

    print(f"wrote {len(scene.trajectory)} stereo frames to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdslam",
        description="Stereo visual odometry and SLAM pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process a stereo sequence")
    run.add_argument("--dataset", choices=("kitti", "euroc", "synth"), required=True)
    run.add_argument("--path", required=True,
                     help="dataset root (kitti/euroc) or scene file (synth)")
    run.add_argument("--sequence", default="00", help="kitti sequence id")
    run.add_argument("--config", help="engine config file (key = value)")
    run.add_argument("--mode", choices=("vo", "slam"), default="vo")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, help="override the engine RNG seed")
    run.add_argument("--deterministic", action="store_true",
                     help="force single-threaded processing")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="evaluate a trajectory against ground truth")
    ev.add_argument("--metric", choices=("ate", "rpe", "improve"), required=True)
    ev.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    ev.add_argument("--gt", required=True, help="ground-truth trajectory (TUM)")
    ev.add_argument("--baseline", help="odometry trajectory for --metric improve")
    ev.add_argument("--csv", default="metrics.csv", help="metrics CSV output path")
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="render a synthetic KITTI-layout dataset")
    sy.add_argument("--scene", required=True, help="scene description file")
    sy.add_argument("--out", required=True, help="output sequence directory")
    sy.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
