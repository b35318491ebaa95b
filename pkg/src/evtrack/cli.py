"""Command-line entry point.

Subcommands:
  simulate  render a scene JSON into an event file + groundtruth CSV
  track     run the window/detect/filter pipeline over an event file
  eval      score an estimate log against groundtruth (JSON report)
  sweep     track+eval across a list of window sizes (CSV table)
  bench     compare accelerated vs plain tensorization kernels

Every run is deterministic given its config and seeds.  Exit codes:
0 success, 1 configuration or I/O problem, 2 pipeline runtime failure,
3 bridge transport/protocol failure.

`track`, `eval` and `sweep` accept ``--config FILE`` (JSON object whose keys
match the long flag names with underscores); explicit flags win over config
values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import shlex
import subprocess
import sys
import time

import numpy as np

from . import _kernels, logs, metrics, rng
from .detection import BridgeClient, MeasurementNoise, OracleConfig, OracleDetector
from .errors import (BoundsError, BridgeError, ConfigError, EvtrackError,
                     ParseError)
from .events import (SensorGeometry, WindowConfig, guess_format, read_events,
                     window_by_count, write_events)
from .simulate import GroundTruth, load_scene_config, simulate_scene
from .tracker import (CHI2_GATE_99, MotionModel, PipelineConfig, run_pipeline)

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as config errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _parse_geometry(text: str) -> SensorGeometry:
    try:
        w, h = text.lower().split("x")
        return SensorGeometry(int(w), int(h))
    except (ValueError, TypeError):
        raise ConfigError(f"geometry must look like 640x480, got {text!r}") from None


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _merge_config(args, config: dict, keys) -> None:
    """Fill parser defaults (None) from the config file; flags win."""
    unknown = set(config) - set(keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in keys:
        if key in config and getattr(args, key, None) is None:
            setattr(args, key, config[key])


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_scene_config(args.scene)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.duration is not None:
        overrides["duration"] = args.duration
    if args.noise_rate is not None:
        overrides["noise_rate"] = args.noise_rate
    if args.contrast_threshold is not None:
        overrides["contrast_threshold"] = args.contrast_threshold
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)

    t0 = time.perf_counter()
    events, gt = simulate_scene(cfg)
    elapsed = time.perf_counter() - t0

    fmt = args.format or guess_format(args.events)
    write_events(args.events, events, fmt)
    gt.write_csv(args.groundtruth)
    print(f"scene: {cfg.geometry.width}x{cfg.geometry.height}, "
          f"{cfg.duration} s, seed {cfg.seed}")
    print(f"events: {events.shape[0]} ({fmt}) -> {args.events}")
    print(f"groundtruth: {len(gt)} samples -> {args.groundtruth}"
          + (" [clipped]" if gt.clipped else ""))
    print(f"simulated in {elapsed:.2f} s")
    return 0


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

_TRACK_KEYS = ("geometry", "window_count", "per_pixel", "bins", "detector",
               "groundtruth", "det_sigma", "p_miss", "p_fp", "det_seed",
               "bridge", "bridge_cmd", "r_sigma", "r_scale_confidence", "q",
               "q_form", "init", "velocity_std", "horizon", "gate", "latency",
               "target_class", "threads")


def _window_config(args) -> WindowConfig:
    if (args.window_count is None) == (args.per_pixel is None):
        raise ConfigError("set exactly one of --window-count / --per-pixel")
    return WindowConfig(count=args.window_count, per_pixel=args.per_pixel,
                        bins=args.bins if args.bins is not None else 5)


def _pipeline_pieces(args, geometry: SensorGeometry):
    """(PipelineConfig, MotionModel, detector factory, closer) from flags."""
    window = _window_config(args)
    noise = MeasurementNoise(
        sigma=args.r_sigma if args.r_sigma is not None else 3.0,
        scale_by_confidence=bool(args.r_scale_confidence))
    model = MotionModel.isotropic(
        q=args.q if args.q is not None else 500.0,
        form=args.q_form if args.q_form is not None else "sampled")
    pipeline_cfg = PipelineConfig(
        window=window,
        noise=noise,
        target_class=args.target_class if args.target_class is not None else 0,
        init=args.init if args.init is not None else "measurement",
        velocity_std=args.velocity_std,
        horizon=args.horizon,
        gate=args.gate,
        latency=args.latency if args.latency is not None else 0.0,
        threaded=bool(args.threads),
    )

    detector_kind = args.detector if args.detector is not None else "oracle"
    gt = None
    if detector_kind == "oracle":
        if args.groundtruth is None:
            raise ConfigError("the oracle detector needs --groundtruth")
        gt = GroundTruth.read_csv(args.groundtruth)
        oracle_cfg = OracleConfig(
            sigma=args.det_sigma if args.det_sigma is not None else 2.0,
            p_miss=args.p_miss if args.p_miss is not None else 0.0,
            p_fp=args.p_fp if args.p_fp is not None else 0.0,
            class_id=pipeline_cfg.target_class,
            frame=geometry)
        detector = OracleDetector(gt, oracle_cfg,
                                  seed=args.det_seed if args.det_seed is not None else 0)
        closer = detector.close
    elif detector_kind == "bridge":
        if (args.bridge is None) == (args.bridge_cmd is None):
            raise ConfigError("bridge detector needs exactly one of "
                              "--bridge host:port / --bridge-cmd")
        if args.bridge is not None:
            host, _, port = args.bridge.rpartition(":")
            if not host or not port.isdigit():
                raise ConfigError(f"--bridge must be host:port, got {args.bridge!r}")
            client = BridgeClient.connect_tcp(host, int(port))
            closer = client.close
        else:
            proc = subprocess.Popen(shlex.split(args.bridge_cmd),
                                    stdin=subprocess.PIPE,
                                    stdout=subprocess.PIPE)
            client = BridgeClient.from_streams(proc.stdout, proc.stdin)

            def closer():
                client.close()
                proc.terminate()
                proc.wait(timeout=5.0)

        client.handshake(geometry, bins=window.bins)
        detector = client
    else:
        raise ConfigError(f"unknown detector {detector_kind!r}")
    return pipeline_cfg, model, detector, closer, gt


def _print_track_summary(result) -> None:
    print(f"windows:  {result.windows}")
    print(f"accepted: {result.accepted}  missed: {result.missed}"
          + (f"  gated: {result.gated}" if result.gated else ""))
    if not math.isnan(result.mean_dt):
        print(f"mean dt:  {result.mean_dt * 1e3:.3f} ms")
    total_stage = sum(result.timings.values())
    if result.events and total_stage > 0:
        print(f"events:   {result.events} "
              f"({result.events / total_stage:.3g} ev/s through the pipeline)")
    print("stage walltime: "
          + ", ".join(f"{name} {t:.3f} s" for name, t in result.timings.items()))


def cmd_track(args) -> int:
    config = _load_config(args.config)
    _merge_config(args, config, _TRACK_KEYS)
    if args.geometry is None:
        raise ConfigError("--geometry is required (events carry no frame size)")
    geometry = (_parse_geometry(args.geometry)
                if isinstance(args.geometry, str) else args.geometry)

    fmt = args.format or guess_format(args.events)
    events = read_events(args.events, fmt, geometry)

    pipeline_cfg, model, detector, closer, _ = _pipeline_pieces(args, geometry)
    try:
        result = run_pipeline(events, geometry, detector, model, pipeline_cfg)
    finally:
        closer()

    logs.write_estimate_log(args.log, result.estimates)
    if args.detections is not None:
        logs.write_detection_log(args.detections, result.detections)
    _print_track_summary(result)
    print(f"log: {args.log} ({len(result.estimates)} rows)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_EVAL_KEYS = ("groundtruth", "detections", "t_s", "t_f", "q", "q_form",
              "iou_thresh", "target_class")


def _resolve_eval_window(args, estimates, gt) -> metrics.EvalWindow:
    if args.t_s is None or args.t_s == "auto":
        first = next((e for e in estimates if e.updated), None)
        if first is None:
            raise ConfigError("no accepted measurement in the log; "
                              "pass an explicit --t-s")
        t_s = first.t
    else:
        t_s = float(args.t_s)
    if args.t_f is not None:
        t_f = float(args.t_f)
    elif gt is not None:
        t_f = gt.t_end
    else:
        raise ConfigError("no groundtruth to default the evaluation end; "
                          "pass --t-f")
    return metrics.EvalWindow(t_s=t_s, t_f=t_f)


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    _merge_config(args, config, _EVAL_KEYS)
    estimates = logs.read_estimate_log(args.log)
    if not estimates:
        raise ConfigError(f"estimate log {args.log} has no rows")
    gt = GroundTruth.read_csv(args.groundtruth)
    model = MotionModel.isotropic(
        q=args.q if args.q is not None else 500.0,
        form=args.q_form if args.q_form is not None else "sampled")
    trace = metrics.EstimateTrace.from_estimates(estimates, model)
    window = _resolve_eval_window(args, estimates, gt)

    frames = None
    if args.detections is not None:
        rows = logs.read_detection_log(args.detections)
        dets = [d for row in rows for d in row.detections]
        frames = metrics.build_frames(dets, gt, [row.t for row in rows])

    report = metrics.build_report(
        trace, gt, frames, window,
        target_class=args.target_class if args.target_class is not None else 0,
        iou_thresh=args.iou_thresh if args.iou_thresh is not None else 0.5)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    _merge_config(args, config, _TRACK_KEYS + ("t_s", "t_f", "iou_thresh"))
    if args.geometry is None:
        raise ConfigError("--geometry is required")
    geometry = (_parse_geometry(args.geometry)
                if isinstance(args.geometry, str) else args.geometry)
    try:
        n_values = [int(v) for v in str(args.n_list).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"-N expects comma-separated integers, "
                          f"got {args.n_list!r}") from None
    if not n_values:
        raise ConfigError("-N list is empty")

    fmt = args.format or guess_format(args.events)
    events = read_events(args.events, fmt, geometry)
    gt = GroundTruth.read_csv(args.groundtruth) if args.groundtruth else None

    rows = ["N,n,e_x,e_gt,precision,recall,coverage,mean_dt,error"]
    for n in n_values:
        args.window_count = n
        args.per_pixel = None
        try:
            pipeline_cfg, model, detector, closer, _ = _pipeline_pieces(args, geometry)
            try:
                result = run_pipeline(events, geometry, detector, model,
                                      pipeline_cfg)
            finally:
                closer()
            if not result.estimates:
                raise ConfigError("no estimates produced (no detections?)")
            trace = metrics.EstimateTrace.from_estimates(result.estimates, model)
            window = _resolve_eval_window(args, result.estimates, gt)
            frames = None
            if gt is not None:
                dets = [d for _, _, ds in result.detections for d in ds]
                frames = metrics.build_frames(dets, gt,
                                              [t for _, t, _ in result.detections])
            report = metrics.build_report(
                trace, gt, frames, window,
                target_class=pipeline_cfg.target_class,
                iou_thresh=args.iou_thresh if args.iou_thresh is not None else 0.5)
            rows.append(",".join([
                str(n),
                repr(n / geometry.pixel_count),
                _cell(report["e_x"]), _cell(report["e_gt"]),
                _cell(report["precision"]), _cell(report["recall"]),
                _cell(report["coverage"]),
                _cell(result.mean_dt if not math.isnan(result.mean_dt) else None),
                "",
            ]))
        except EvtrackError as exc:
            logger.warning("sweep N=%d failed: %s", n, exc)
            rows.append(f"{n},{n / geometry.pixel_count!r},,,,,,,"
                        + str(exc).replace(",", ";"))
    table = "\n".join(rows) + "\n"
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(table)
        print(f"sweep table -> {args.out}")
    else:
        print(table, end="")
    return 0


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _synthetic_events(count: int, geometry: SensorGeometry, duration: float,
                      seed: int) -> np.ndarray:
    """Uniform random events, time-sorted, via the portable generator."""
    from .events import events_array

    def draw(i, n):
        return rng.next_unit_array(
            rng.derive_states(seed + i, np.arange(n, dtype=np.uint64)))

    ts = np.sort(draw(1, count)) * duration
    xs = np.minimum((draw(2, count) * geometry.width).astype(np.uint16),
                    geometry.width - 1)
    ys = np.minimum((draw(3, count) * geometry.height).astype(np.uint16),
                    geometry.height - 1)
    ps = np.where(draw(4, count) < 0.5, 1, -1).astype(np.int8)
    return events_array(ts, xs, ys, ps)


def _bench_backend(kernel, events, geometry: SensorGeometry, count: int,
                   bins: int) -> dict:
    grid = np.zeros((bins, geometry.height, geometry.width))
    windows = list(window_by_count(events, count, geometry))
    t0 = time.perf_counter()
    for w in windows:
        grid[:] = 0.0
        kernel(w.events["t"], w.events["x"], w.events["y"], w.events["p"],
               w.t_start, w.t_end, grid)
    elapsed = time.perf_counter() - t0
    processed = len(windows) * count
    return {"windows": len(windows), "events": processed,
            "seconds": elapsed,
            "events_per_second": processed / elapsed if elapsed > 0 else None}


def cmd_bench(args) -> int:
    geometry = _parse_geometry(args.geometry)
    events = _synthetic_events(args.events_count, geometry, 1.0, args.seed)
    report = {"geometry": f"{geometry.width}x{geometry.height}",
              "window_count": args.window_count,
              "bins": args.bins,
              "numba_available": _kernels.NUMBA_AVAILABLE,
              "numba_disabled_by_env": _kernels.NUMBA_DISABLED,
              "numpy": None, "numba": None}

    report["numpy"] = _bench_backend(_kernels.voxel_splat_numpy, events,
                                     geometry, args.window_count, args.bins)
    if _kernels.voxel_splat_numba is not None:
        _kernels.warmup()
        report["numba"] = _bench_backend(_kernels.voxel_splat_numba, events,
                                         geometry, args.window_count, args.bins)

    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    print(f"tensorization benchmark: {args.events_count} events, "
          f"{geometry.width}x{geometry.height}, N={args.window_count}, "
          f"B={args.bins}")
    for name in ("numpy", "numba"):
        stats = report[name]
        if stats is None:
            print(f"  {name:6s}: unavailable")
            continue
        print(f"  {name:6s}: {stats['events_per_second']:.3g} ev/s "
              f"({stats['windows']} windows in {stats['seconds']:.3f} s)")
    if report["numba"] and report["numpy"]["events_per_second"]:
        speedup = (report["numba"]["events_per_second"]
                   / report["numpy"]["events_per_second"])
        print(f"  speedup: {speedup:.1f}x")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evtrack",
                     description="Event-camera tracking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene into events + groundtruth")
    p.add_argument("--scene", required=True, help="scene JSON config")
    p.add_argument("--events", required=True, help="output event file")
    p.add_argument("--groundtruth", required=True, help="output groundtruth CSV")
    p.add_argument("--format", choices=("text", "binary"),
                   help="event file format (default: by extension)")
    p.add_argument("--seed", type=int, help="override scene seed")
    p.add_argument("--duration", type=float, help="override scene duration (s)")
    p.add_argument("--noise-rate", type=float, help="override noise rate (ev/px/s)")
    p.add_argument("--contrast-threshold", type=float,
                   help="override contrast threshold")
    p.set_defaults(func=cmd_simulate)

    def add_track_flags(p):
        p.add_argument("--events", required=True, help="input event file")
        p.add_argument("--format", choices=("text", "binary"),
                       help="event file format (default: by extension)")
        p.add_argument("--config", help="JSON config file; flags win")
        p.add_argument("--geometry", help="sensor size, e.g. 640x480")
        p.add_argument("--window-count", type=int, dest="window_count",
                       help="events per window (N)")
        p.add_argument("--per-pixel", type=float, dest="per_pixel",
                       help="events per pixel per window (n)")
        p.add_argument("--bins", type=int, help="temporal bins (default 5)")
        p.add_argument("--detector", choices=("oracle", "bridge"),
                       help="measurement source (default oracle)")
        p.add_argument("--groundtruth", help="groundtruth CSV (oracle detector)")
        p.add_argument("--det-sigma", type=float, dest="det_sigma",
                       help="oracle edge jitter sigma px (default 2)")
        p.add_argument("--p-miss", type=float, dest="p_miss",
                       help="oracle miss probability (default 0)")
        p.add_argument("--p-fp", type=float, dest="p_fp",
                       help="oracle false-positive probability (default 0)")
        p.add_argument("--det-seed", type=int, dest="det_seed",
                       help="oracle random seed (default 0)")
        p.add_argument("--bridge", help="bridge backend address host:port")
        p.add_argument("--bridge-cmd", dest="bridge_cmd",
                       help="spawn a bridge backend subprocess on stdio")
        p.add_argument("--r-sigma", type=float, dest="r_sigma",
                       help="measurement noise sigma px (default 3)")
        p.add_argument("--r-scale-confidence", action="store_const", const=True,
                       default=None, dest="r_scale_confidence",
                       help="divide R by detection confidence")
        p.add_argument("--q", type=float, help="process noise q px^2/s^4 (default 500)")
        p.add_argument("--q-form", choices=("sampled", "integrated"),
                       dest="q_form", help="process noise discretization")
        p.add_argument("--init", choices=("measurement", "fixed"),
                       help="initialization policy (default measurement)")
        p.add_argument("--velocity-std", type=float, dest="velocity_std",
                       help="velocity prior std for measurement init (px/s)")
        p.add_argument("--horizon", type=float,
                       help="prior horizon T_f for fixed init (s)")
        p.add_argument("--gate", type=float, nargs="?", const=CHI2_GATE_99,
                       help="Mahalanobis^2 gate (bare flag: chi-square 99%%)")
        p.add_argument("--latency", type=float,
                       help="estimate availability delay L_proc (s)")
        p.add_argument("--target-class", type=int, dest="target_class",
                       help="class id to track (default 0)")
        p.add_argument("--threads", action="store_const", const=True,
                       default=None, help="run pipeline stages in threads")

    p = sub.add_parser("track", help="run the tracking pipeline")
    add_track_flags(p)
    p.add_argument("--log", required=True, help="output estimate CSV")
    p.add_argument("--detections", help="output detection CSV")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score an estimate log")
    p.add_argument("--log", required=True, help="estimate CSV from track")
    p.add_argument("--groundtruth", required=True, help="groundtruth CSV")
    p.add_argument("--detections", help="detection CSV for precision/recall")
    p.add_argument("--config", help="JSON config file; flags win")
    p.add_argument("--t-s", dest="t_s",
                   help="evaluation start (s), or 'auto' = first accepted "
                        "measurement (default)")
    p.add_argument("--t-f", dest="t_f", type=float,
                   help="evaluation end (s), default groundtruth end")
    p.add_argument("--q", type=float, help="process noise q (default 500)")
    p.add_argument("--q-form", choices=("sampled", "integrated"), dest="q_form")
    p.add_argument("--iou-thresh", type=float, dest="iou_thresh",
                   help="IoU threshold (default 0.5)")
    p.add_argument("--target-class", type=int, dest="target_class")
    p.add_argument("--out", help="write the JSON report here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="track+eval across window sizes")
    add_track_flags(p)
    p.add_argument("-N", dest="n_list", required=True,
                   help="comma-separated window sizes, e.g. 1000,5000,10000")
    p.add_argument("--t-s", dest="t_s", help="evaluation start or 'auto'")
    p.add_argument("--t-f", dest="t_f", type=float, help="evaluation end")
    p.add_argument("--iou-thresh", type=float, dest="iou_thresh")
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="tensorization kernel benchmark")
    p.add_argument("--events-count", type=int, default=2_000_000,
                   dest="events_count", help="synthetic stream size")
    p.add_argument("--geometry", default="640x480")
    p.add_argument("--window-count", type=int, default=20000, dest="window_count")
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ParseError, BoundsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EvtrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
