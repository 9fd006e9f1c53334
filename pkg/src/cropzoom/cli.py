"""Command-line entry point.

One binary with subcommands, since the experiments are compositions of the
same verbs::

    cropzoom gen      generate a composited dataset (images + labels + manifest)
    cropzoom labelgen project a 3D box over sampled viewpoints into label files
    cropzoom detect   run the mock pipeline over a dataset, write detections
    cropzoom eval     evaluate detections against ground truth (1 or 2 files)
    cropzoom bench    pipeline throughput and per-stage latency
    cropzoom serve    run the streaming detection service
    cropzoom replay   stream frames at a target fps and report latency

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Detections files hold one record per line:
``frame_id class_id confidence cx cy w h`` (normalized, 6 decimals).
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import service as service_mod
from . import wire
from .config import RunConfig, describe_config, load_config
from .detector import Detection, Frame, MockDetector
from .errors import AssetError, ConfigError, CropZoomError
from .geometry import NormBox, sample_viewpoints, write_label_file
from .metrics import (
    DetectionSet,
    GroundTruthSet,
    compare_reports,
    evaluate,
    render_comparison,
    render_report,
    write_report_records,
)
from .pipeline import run_single_stage, run_two_stage
from .scenario import gt_from_manifest, sample_frames
from .synthgen import DatasetManifest, generate_dataset, render_labels_for_viewpoints

DEFAULT_THRESHOLDS = "0.01,0.10,0.20,0.30,0.40,0.50"


def _stage_seeds(seed: int) -> tuple[int, int]:
    # distinct streams for the context and small-object detectors
    return seed * 10 + 1, seed * 10 + 2


def _build_detectors(cfg: RunConfig, seed: int):
    det_cfg = cfg.detector_config()
    ctx_seed, small_seed = _stage_seeds(seed)
    context = MockDetector(cfg.mock_model(ctx_seed), det_cfg, classes={cfg.pipeline.context_class_id})
    small = MockDetector(cfg.mock_model(small_seed), det_cfg, classes=set(cfg.pipeline.small_class_ids))
    return context, small


def _resolve_manifest(path: Path) -> Path:
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ConfigError(f"dataset manifest not found: {path}")
    return path


def _gt_set_from_manifest(manifest: DatasetManifest) -> GroundTruthSet:
    return GroundTruthSet.from_frames(gt_from_manifest(manifest))


def _write_detections_file(path: Path, per_frame: dict[int, list[Detection]]) -> None:
    lines = []
    for frame_id in sorted(per_frame):
        for d in per_frame[frame_id]:
            b = d.box
            lines.append(
                f"{frame_id} {d.class_id} {d.confidence:.6f} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"
            )
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


def _read_detections_file(path: Path) -> DetectionSet:
    frames: dict[int, list[Detection]] = {}
    for lineno, line in enumerate(path.read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 7:
            raise ConfigError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        frame_id, class_id = int(parts[0]), int(parts[1])
        conf, cx, cy, w, h = (float(p) for p in parts[2:])
        frames.setdefault(frame_id, []).append(Detection(class_id, NormBox(cx, cy, w, h), conf))
    return DetectionSet({fid: tuple(dets) for fid, dets in frames.items()})


def _out_dir(args, default: str = ".") -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


# --- subcommands ---------------------------------------------------------


def cmd_gen(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, "dataset")
    n = args.n if args.n is not None else cfg.dataset.n_images
    manifest = generate_dataset(
        out_dir=out,
        asset_dir=cfg.dataset.asset_dir,
        background_dir=cfg.dataset.background_dir,
        placement=cfg.placement_spec(),
        illumination=cfg.illumination_spec(),
        n_images=n,
        train_split=cfg.dataset.train_split,
        seed=seed,
    )
    print(f"wrote {len(manifest.entries)} images under {out}")
    print(f"manifest: {out / 'manifest.json'}")
    print(f"content_hash: {manifest.content_hash}")
    return 0


def cmd_labelgen(args, cfg: RunConfig, seed: int) -> int:
    out = _out_dir(args, "labels")
    poses = sample_viewpoints(cfg.viewpoint_spec(seed))
    labels = render_labels_for_viewpoints(
        cfg.target_box3d(), cfg.camera_intrinsics(), poses, cfg.target_box.class_id
    )
    summary = []
    written = 0
    for rec, pose in zip(labels, poses):
        entry = {
            "pose_index": rec.pose_index,
            "azimuth": pose.azimuth,
            "elevation": pose.elevation,
            "radius": pose.radius,
        }
        if rec.box is None:
            entry["skipped"] = rec.skipped
        else:
            write_label_file(out / f"pose_{rec.pose_index:04d}.txt", [(rec.class_id, rec.box)])
            entry["label"] = f"pose_{rec.pose_index:04d}.txt"
            written += 1
        summary.append(entry)
    (out / "viewpoints.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="ascii")
    print(f"wrote {written} label files ({len(labels) - written} poses skipped) under {out}")
    return 0


def cmd_detect(args, cfg: RunConfig, seed: int) -> int:
    manifest = DatasetManifest.load(_resolve_manifest(Path(args.dataset)))
    gt_frames = gt_from_manifest(manifest)
    context_det, small_det = _build_detectors(cfg, seed)
    mode = "two_stage" if args.mode == "two" else "single_stage"
    pipe_cfg = cfg.pipeline_config(mode)

    per_frame: dict[int, list[Detection]] = {}
    timings = []
    for fid, gt in gt_frames.items():
        frame = Frame(fid, gt.width, gt.height)
        if mode == "two_stage":
            result = run_two_stage(frame, context_det, small_det, pipe_cfg, gt)
        else:
            result = run_single_stage(frame, [context_det, small_det], pipe_cfg, gt)
        per_frame[fid] = list(result.context_detections) + list(result.small_detections_fullframe)
        timings.append(result.timings)

    out = _out_dir(args, Path(args.dataset) if Path(args.dataset).is_dir() else ".")
    det_path = out / f"detections_{args.mode}.txt"
    _write_detections_file(det_path, per_frame)
    total = [t.total_us for t in timings]
    print(f"wrote {sum(len(v) for v in per_frame.values())} detections to {det_path}")
    if total:
        print(
            f"timing: mean total {np.mean(total):.0f} us"
            f" (stage1 {np.mean([t.stage1_us for t in timings]):.0f},"
            f" stage2 {np.mean([t.stage2_us for t in timings]):.0f})"
        )
    return 0


def cmd_eval(args, cfg: RunConfig, seed: int) -> int:
    del cfg, seed
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    for t in thresholds:
        if not 0 < t <= 1:
            raise ConfigError(f"iou threshold out of range (0, 1]: {t}")
    manifest = DatasetManifest.load(_resolve_manifest(Path(args.gt)))
    gt = _gt_set_from_manifest(manifest)

    reports = []
    for det_path in args.detections:
        det = _read_detections_file(Path(det_path))
        reports.append(evaluate(gt, det, thresholds, interpolation=args.interpolation))
    for det_path, report in zip(args.detections, reports):
        print(f"== {det_path}")
        print(render_report(report))
        if args.out:
            out = _out_dir(args)
            name = Path(det_path).stem + "_report.tsv"
            write_report_records(report, out / name)
            print(f"records: {out / name}")
    if len(reports) == 2:
        print("== comparison (second minus first)")
        print(render_comparison(compare_reports(reports[0], reports[1]),
                                Path(args.detections[0]).stem, Path(args.detections[1]).stem))
    return 0


def cmd_bench(args, cfg: RunConfig, seed: int) -> int:
    if args.frames <= 0:
        raise ConfigError("bench needs a positive number of frames")
    frames = sample_frames(cfg.scene_spec(), args.frames, seed)
    context_det, small_det = _build_detectors(cfg, seed)
    modes = ("two", "single") if args.mode == "both" else (args.mode,)

    print(f"{'mode':>8} {'fps':>8} {'stage1 p50/p95 us':>20} {'stage2 p50/p95 us':>20} {'total p50/p95 us':>20}")
    for mode in modes:
        pipe_cfg = cfg.pipeline_config("two_stage" if mode == "two" else "single_stage")
        t0 = time.perf_counter()
        timings = []
        for fid, gt in frames.items():
            frame = Frame(fid, gt.width, gt.height)
            if mode == "two":
                result = run_two_stage(frame, context_det, small_det, pipe_cfg, gt)
            else:
                result = run_single_stage(frame, [context_det, small_det], pipe_cfg, gt)
            timings.append(result.timings)
        elapsed = time.perf_counter() - t0
        fps = len(frames) / elapsed if elapsed > 0 else float("inf")

        def pct(values):
            p50, p95 = np.percentile(np.asarray(values, dtype=float), [50, 95])
            return f"{p50:.0f}/{p95:.0f}"

        print(
            f"{mode:>8} {fps:>8.1f}"
            f" {pct([t.stage1_us for t in timings]):>20}"
            f" {pct([t.stage2_us for t in timings]):>20}"
            f" {pct([t.total_us for t in timings]):>20}"
        )
    return 0


def cmd_serve(args, cfg: RunConfig, seed: int) -> int:
    svc_cfg = cfg.service_config()
    if args.port is not None:
        svc_cfg = service_mod.ServiceConfig(
            host=svc_cfg.host, port=args.port, max_payload=svc_cfg.max_payload
        )
    gt_frames = None
    gt_path = args.gt_dataset or cfg.service.gt_dataset
    if gt_path:
        gt_frames = gt_from_manifest(DatasetManifest.load(_resolve_manifest(Path(gt_path))))
    context_det, small_det = _build_detectors(cfg, seed)
    processor = service_mod.make_pipeline_processor(
        cfg.pipeline_config("two_stage"), context_det, small_det, gt_frames=gt_frames
    )
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    svc = service_mod.DetectionService(processor, svc_cfg).start()
    print(f"serving on {svc.address[0]}:{svc.address[1]} (Ctrl-C to stop)", flush=True)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        svc.stop()
        snap = svc.stats.snapshot()
        print(
            f"received {snap.frames_received} processed {snap.frames_processed}"
            f" dropped {snap.frames_dropped}"
        )
    return 0


def cmd_replay(args, cfg: RunConfig, seed: int) -> int:
    del cfg, seed
    source = Path(args.source)
    if source.is_dir() and (source / "manifest.json").exists():
        frames = service_mod.frames_from_manifest(source / "manifest.json")
    elif source.suffix == ".json":
        frames = service_mod.frames_from_manifest(source)
    else:
        frames = service_mod.frames_from_dir(source)
    if not frames:
        print("no frames to send; nothing to do")
        return 0
    encoding = wire.ENC_JPEG if args.encoding == "jpeg" else wire.ENC_RAW_RGB8
    report = service_mod.replay_client(frames, _parse_endpoint(args.endpoint), args.fps, encoding)
    p50, p95, p99 = report.latency_percentiles_us()
    print(
        f"sent {report.frames_sent} frames, {report.responses_received} responses,"
        f" achieved {report.achieved_fps:.2f} fps (target {args.fps:g})"
    )
    print(f"round-trip latency us: p50 {p50:.0f} p95 {p95:.0f} p99 {p99:.0f}")
    if args.report:
        Path(args.report).write_text(
            json.dumps(
                {
                    "frames_sent": report.frames_sent,
                    "responses_received": report.responses_received,
                    "achieved_fps": report.achieved_fps,
                    "duration_s": report.duration_s,
                    "latency_us_p50": p50,
                    "latency_us_p95": p95,
                    "latency_us_p99": p99,
                    "fallback_frames": report.fallback_frames,
                    "connection_lost": report.connection_lost,
                },
                indent=2,
            )
            + "\n",
            encoding="ascii",
        )
        print(f"report: {args.report}")
    if report.connection_lost:
        print("connection lost before completion", file=sys.stderr)
        return 1
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration keys and defaults (YAML, strict):\n  " + "\n  ".join(describe_config())
    parser = argparse.ArgumentParser(
        prog="cropzoom",
        description="context-first crop-and-zoom small-object detection toolkit",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", metavar="PATH", help="YAML config file")
    parser.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a composited dataset")
    p.add_argument("--n", type=int, help="number of images (overrides dataset.n_images)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("labelgen", help="project the target box over sampled viewpoints")
    p.set_defaults(func=cmd_labelgen)

    p = sub.add_parser("detect", help="run the mock pipeline over a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
    p.add_argument("--mode", choices=("single", "two"), default="two")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluate detections against dataset ground truth")
    p.add_argument("--gt", required=True, help="dataset directory or manifest path")
    p.add_argument("detections", nargs="+", metavar="DETECTIONS",
                   help="one or two detections files; two produce a comparison")
    p.add_argument("--thresholds", default=DEFAULT_THRESHOLDS,
                   help=f"comma-separated IoU thresholds (default {DEFAULT_THRESHOLDS})")
    p.add_argument("--interpolation", choices=("all_point", "eleven_point"), default="all_point")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="pipeline throughput and latency")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--mode", choices=("two", "single", "both"), default="both")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the streaming detection service")
    p.add_argument("--port", type=int, help="override service.port")
    p.add_argument("--gt-dataset", help="manifest for ground-truth lookup by frame id")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="stream frames to a service and report latency")
    p.add_argument("--source", required=True, help="image directory, dataset dir, or manifest")
    p.add_argument("--endpoint", required=True, help="host:port of the service")
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--encoding", choices=("raw", "jpeg"), default="raw")
    p.add_argument("--report", help="write a JSON report here")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.seed
        return args.func(args, cfg, seed)
    except (ConfigError, AssetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CropZoomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
