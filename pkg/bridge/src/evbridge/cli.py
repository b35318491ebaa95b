"""Command line front end: run the detection service or a scripted mock.

Subcommands:

``serve``
    Load the configured reconstructor/detector pair and answer detect
    requests over TCP (``--listen``) or on stdin/stdout (``--stdio``).
``mock``
    Replay canned responses behind the same session loop; useful for
    exercising a client without any models.

stdout carries protocol bytes in stdio mode, so all diagnostics go to
stderr.  Exit codes: 0 success, 1 bad usage or configuration, 2 runtime
failure (model, I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import BridgeBackendError, ConfigError
from .server import BackendConfig, mock_serve, serve

logger = logging.getLogger("evbridge")


class _Parser(argparse.ArgumentParser):
    # usage mistakes should follow the same exit-code contract as bad
    # config files instead of argparse's hardwired exit(2)
    def error(self, message):
        raise ConfigError(message)


def _address(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="evbridge",
                  description="event-window detection service")
    sub = top.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("serve", help="run the detection backend")
    transport = p.add_mutually_exclusive_group(required=True)
    transport.add_argument("--listen", metavar="HOST:PORT",
                           help="TCP listen address (port 0 picks a free one)")
    transport.add_argument("--stdio", action="store_true",
                           help="serve a single session on stdin/stdout")
    p.add_argument("--once", action="store_true",
                   help="exit after the first connection closes")
    p.add_argument("--reconstructor", choices=("accumulator", "torchscript"),
                   default="accumulator",
                   help="frame reconstruction engine (default accumulator)")
    p.add_argument("--model", metavar="PATH",
                   help="torchscript reconstruction model")
    p.add_argument("--detector", choices=("blob", "yolov5"), default="blob",
                   help="box detector run on each frame (default blob)")
    p.add_argument("--detector-model", metavar="PATH",
                   help="torchscript detector checkpoint")
    p.add_argument("--device", default="cpu",
                   help="torch device for model backends (default cpu)")
    p.add_argument("--bins", type=int, default=5,
                   help="temporal bins expected in the handshake (default 5)")
    p.add_argument("--confidence", type=float, default=0.25,
                   help="drop boxes scored below this (default 0.25)")
    p.add_argument("--classes", metavar="IDS",
                   help="comma separated class ids to keep (default: all)")
    p.add_argument("--threshold", type=float, default=0.3,
                   help="blob detector brightness threshold (default 0.3)")
    p.add_argument("--min-area", type=int, default=4,
                   help="blob detector minimum component area (default 4)")
    p.add_argument("--dump-frames", metavar="DIR",
                   help="write each reconstructed frame to DIR as a PNG")
    p.add_argument("--backend-name", metavar="NAME",
                   help="override the name reported in the ready reply")

    m = sub.add_parser("mock", help="serve scripted replies (no models)")
    m.add_argument("--listen", metavar="HOST:PORT", required=True)
    m.add_argument("--boxes", required=True, metavar="JSON",
                   help="JSON list of responses (or @FILE): each entry is a "
                        'list of [xmin,ymin,xmax,ymax,conf,cls] rows or the '
                        'string "error"')
    m.add_argument("--bins", type=int,
                   help="refuse handshakes with a different bin count")
    m.add_argument("--once", action="store_true",
                   help="exit after the first connection closes")

    for cmd in (p, m):
        cmd.add_argument("-v", "--verbose", action="count", default=0,
                         help="-v for info, -vv for debug (stderr)")
    return top


def _run_serve(args) -> int:
    classes = None
    if args.classes:
        try:
            classes = tuple(int(c) for c in args.classes.split(","))
        except ValueError:
            raise ConfigError(f"bad --classes value {args.classes!r}") from None
    cfg = BackendConfig(
        reconstructor=args.reconstructor, model_path=args.model,
        detector=args.detector, detector_model=args.detector_model,
        device=args.device, target_classes=classes,
        confidence=args.confidence, bins=args.bins,
        blob_threshold=args.threshold, min_area=args.min_area,
        dump_frames=args.dump_frames, backend_name=args.backend_name)
    if args.stdio:
        serve(cfg, stdio=True)
    else:
        serve(cfg, address=_address(args.listen), once=args.once)
    return 0


def _run_mock(args) -> int:
    text = args.boxes
    if text.startswith("@"):
        try:
            with open(text[1:], "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read {text[1:]}: {exc}") from None
    try:
        responses = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--boxes is not valid JSON: {exc}") from None
    if not isinstance(responses, list):
        raise ConfigError("--boxes must be a JSON list of responses")
    server = mock_serve(responses, _address(args.listen), bins=args.bins)
    print(f"listening on {server.host}:{server.port} (backend mock)",
          file=sys.stderr, flush=True)
    try:
        if args.once:
            server.serve_count(1, timeout=3600.0)
        else:
            while True:
                server._thread.join(timeout=3600.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=(logging.WARNING, logging.INFO,
                   logging.DEBUG)[min(args.verbose, 2)],
            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "serve":
            return _run_serve(args)
        return _run_mock(args)
    except ConfigError as exc:
        print(f"evbridge: {exc}", file=sys.stderr)
        return 1
    except (BridgeBackendError, OSError) as exc:
        print(f"evbridge: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
