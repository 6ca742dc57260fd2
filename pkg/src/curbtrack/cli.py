"""Command-line entry point: ``curbtrack {detect,eval,downsample,synth,bench}``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 config error.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .evaluation import aggregate_report, evaluate_frame, format_ground_truth, read_ground_truth
from .exceptions import ConfigError, MalformedFileError
from .fitting import SIDES, CurbPolynomial
from .ingest import RingModel, downsample_rings, frame_id_from_path, read_csf1, read_kitti_frame, write_csf1
from .masking import (BoundingBox2D, CalibrationConfig, format_detections, load_calibration,
                      read_detections, save_calibration)
from .pipeline import PipelineConfig, PipelineState, load_config, run_frame, run_sequence
from .synth import box_image_bbox, ground_truth_of, load_scene, render_lidar_frame, render_ultrasonic, save_scene
from .ultrasonic import UltrasonicProcessor, format_ultrasonic_log, read_ultrasonic_log

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
FRAME_PERIOD_US = 100_000
ULTRASONIC_PERIOD_US = 25_000
SYNTH_LEAD_US = 300_000


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args):
    exp = args.experiment
    if args.config:
        return load_config(args.config, exp)
    return PipelineConfig.experiment(exp if exp is not None else 1)


def _ring_model(spec):
    if spec in (None, "hdl64"):
        return RingModel.hdl64()
    if spec == "vlp16":
        return RingModel.vlp16()
    return RingModel.from_file(spec)


def _frame_files(directory, fmt):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frames directory not found: {directory}")
    suffix = ".bin" if fmt == "kitti" else ".csf1"
    return sorted(p for p in directory.iterdir() if p.suffix == suffix)


def _iter_frames(files, fmt, ring_model=None):
    for path in files:
        try:
            if fmt == "kitti":
                yield read_kitti_frame(path, ring_model)
            else:
                yield read_csf1(path)
        except (OSError, MalformedFileError) as exc:
            yield (frame_id_from_path(path), exc)


def cmd_detect(args):
    cfg = _config(args)
    cal = load_calibration(args.calibration) if args.calibration else CalibrationConfig()
    files = _frame_files(args.frames, args.format)
    model = _ring_model(args.ring_model) if args.format == "kitti" else None
    boxes = read_detections(args.boxes) if args.boxes else None
    us = UltrasonicProcessor(cfg.ultrasonic).feed(read_ultrasonic_log(args.ultrasonic)) if args.ultrasonic else None
    gt = read_ground_truth(args.ground_truth) if args.ground_truth else None
    res = run_sequence(_iter_frames(files, args.format, model), cfg, boxes, us, gt, cal)
    Path(args.output).write_text(res.jsonl())
    if args.timings:
        Path(args.timings).write_text(res.timing_csv())
    if args.report and res.report is not None:
        Path(args.report).write_text(res.report.to_csv())
    failed = sum(r.error is not None for r in res.results)
    print(f"{len(res.results)} frames processed, {failed} failed -> {args.output}")
    return EXIT_OK


def read_results(path):
    """``{frame_id: {side: CurbPolynomial or None}}`` from a results file."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out[int(rec["frame_id"])] = {
                s: None if rec.get(s) is None else CurbPolynomial.from_dict(rec[s]) for s in SIDES
            }
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedFileError(f"{path}:{lineno}: {exc}") from exc
    return out


def cmd_eval(args):
    cfg = _config(args).eval
    results = read_results(args.results)
    gt = read_ground_truth(args.ground_truth)
    per_frame = []
    samples, bins = cfg.samples(), cfg.bins()
    for fid in sorted(set(results) | set(gt)):
        metrics = evaluate_frame(results.get(fid, {}), gt.get(fid, {}), samples, bins, cfg.lateral_tol)
        per_frame.append(metrics[args.side])
    report = aggregate_report(per_frame)
    Path(args.output).write_text(report.to_csv())
    t = report.totals()
    p = "undefined" if t.precision is None else f"{t.precision:.4f}"
    r = "undefined" if t.recall is None else f"{t.recall:.4f}"
    print(f"precision {p}, recall {r} over {len(per_frame)} frames -> {args.output}")
    return EXIT_OK


def cmd_downsample(args):
    files = _frame_files(args.input, args.format)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _ring_model(args.ring_model)
    n = 0
    for path in files:
        frame = read_kitti_frame(path, model) if args.format == "kitti" else read_csf1(path)
        frame = downsample_rings(frame, args.target)
        write_csf1(out_dir / f"{path.stem}.csf1", frame)
        n += 1
    print(f"{n} frames downsampled to {args.target} rings -> {out_dir}")
    return EXIT_OK


def cmd_synth(args):
    scene = load_scene(args.scene)
    if args.seed is not None:
        scene.seed = int(args.seed)
    out = Path(args.output)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    cal = load_calibration(args.calibration) if args.calibration else CalibrationConfig(
        ultrasonic_mounts=tuple((m.x, m.y, m.z, m.yaw_deg) for m in scene.ultrasonic_mounts)
    )
    gts, boxes, readings = [], [], []
    for f in range(args.frames):
        frame, _ = render_lidar_frame(scene, f, SYNTH_LEAD_US + f * FRAME_PERIOD_US)
        write_csf1(out / "frames" / f"{f:06d}.csf1", frame)
        gts.extend(ground_truth_of(scene, f))
        for box in scene.boxes:
            bb = box_image_bbox(box, scene.road_z, cal)
            if bb is not None:
                boxes.append(BoundingBox2D(f, box.label, 1.0, *bb))
    # ultrasonic runs four times per LiDAR frame and starts early enough to
    # fill the constancy window before the first frame
    for t in range(0, SYNTH_LEAD_US + args.frames * FRAME_PERIOD_US, ULTRASONIC_PERIOD_US):
        readings.extend(render_ultrasonic(scene, t))
    (out / "ground_truth.csv").write_text(format_ground_truth(gts))
    (out / "detections.csv").write_text(format_detections(boxes))
    (out / "ultrasonic.csv").write_text(format_ultrasonic_log(readings))
    save_calibration(out / "calibration.yaml", cal)
    save_scene(out / "scene.yaml", scene)
    print(f"{args.frames} frames written to {out}")
    return EXIT_OK


def cmd_bench(args):
    cfg = _config(args) if (args.config or args.experiment) else PipelineConfig.experiment(3)
    files = _frame_files(args.frames, args.format)
    model = _ring_model(args.ring_model) if args.format == "kitti" else None
    frames = [f for f in _iter_frames(files, args.format, model) if not isinstance(f, tuple)]
    if not frames:
        raise FileNotFoundError(f"no readable frames in {args.frames}")
    state = PipelineState(cfg)
    rows = []
    for rep in range(args.repeat):
        for frame in frames:
            t0 = time.perf_counter_ns()
            res, state = run_frame(frame, None, None, state)
            wall = (time.perf_counter_ns() - t0) / 1000.0
            rows.append((frame.frame_id, len(frame), wall, res.timings))
    stages = list(rows[0][3])
    lines = ["frame_id,points,wall_us," + ",".join(f"{s}_us" for s in stages)]
    for fid, npts, wall, t in rows:
        lines.append(f"{fid},{npts},{wall:.1f}," + ",".join(str(t[s]) for s in stages))
    Path(args.output).write_text("\n".join(lines) + "\n")
    walls = np.array([r[2] for r in rows])
    print(f"{len(rows)} runs, median {np.median(walls) / 1000:.2f} ms, p90 {np.percentile(walls, 90) / 1000:.2f} ms")
    return EXIT_OK


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline configuration file (YAML)")
    common.add_argument("--experiment", type=int, choices=(1, 2, 3, 4), help="stage preset")
    common.add_argument("--seed", type=int, help="random seed (u64)")
    common.add_argument("--format", choices=("kitti", "csf1"),
                        help="frame file format (default csf1, kitti for downsample)")

    p = _Parser(prog="curbtrack", description="Curb detection and tracking toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("detect", parents=[common], help="run the pipeline over a frames directory")
    d.add_argument("frames")
    d.add_argument("--output", "-o", required=True)
    d.add_argument("--boxes")
    d.add_argument("--ultrasonic")
    d.add_argument("--calibration")
    d.add_argument("--ground-truth")
    d.add_argument("--report")
    d.add_argument("--timings")
    d.add_argument("--ring-model", help="hdl64, vlp16 or a file of vertical angles (KITTI input)")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    e.add_argument("results")
    e.add_argument("ground_truth")
    e.add_argument("--output", "-o", required=True)
    e.add_argument("--side", choices=("left", "right", "combined"), default="combined")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("downsample", parents=[common], help="reduce ring count and write CSF1")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--target", type=int, default=16)
    s.add_argument("--ring-model")
    s.set_defaults(func=cmd_downsample, default_format="kitti")

    y = sub.add_parser("synth", parents=[common], help="render a synthetic dataset from a scene file")
    y.add_argument("scene")
    y.add_argument("output")
    y.add_argument("--frames", type=int, default=10)
    y.add_argument("--calibration")
    y.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", parents=[common], help="time the pipeline per frame")
    b.add_argument("frames")
    b.add_argument("--output", "-o", required=True)
    b.add_argument("--repeat", type=int, default=1)
    b.add_argument("--ring-model")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    # parents share Action objects, so a per-command default cannot live on --format itself
    if args.format is None:
        args.format = getattr(args, "default_format", "csf1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MalformedFileError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
