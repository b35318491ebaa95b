"""Session handling and transports.

A session is one connection: a validated hello, then detect requests with
strictly increasing ``k``, each answered in order by ``detections`` or a
recoverable ``error``.  Recurrent reconstruction state lives in the session
and is rebuilt on every handshake, so a session is deterministic given its
own request stream.  Connections are served one at a time (the recurrent
state makes per-session serialization the natural unit; there is no
cross-session batching).
"""

from __future__ import annotations

import logging
import socket
import sys
import threading
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from . import protocol
from .detect import build_detector
from .errors import BridgeBackendError, ConfigError, ModelError, RequestError
from .frames import dump_frame
from .reconstruct import AccumulatorReconstructor, build_reconstructor
from .tensorize import voxel_grid

logger = logging.getLogger(__name__)


@dataclass
class BackendConfig:
    """Everything the serving side needs; models are loaded at startup."""

    reconstructor: str = "accumulator"
    model_path: Optional[str] = None
    detector: str = "blob"
    detector_model: Optional[str] = None
    device: str = "cpu"
    target_classes: Optional[Tuple[int, ...]] = None   # None accepts any class
    confidence: float = 0.25
    bins: int = 5
    blob_threshold: float = 0.3
    min_area: int = 4
    dump_frames: Optional[str] = None
    backend_name: Optional[str] = None

    def __post_init__(self):
        if not (0.0 <= self.confidence < 1.0):
            raise ConfigError(f"confidence must be in [0, 1), got {self.confidence}")
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")
        if self.target_classes is not None:
            self.target_classes = tuple(int(c) for c in self.target_classes)

    @property
    def name(self) -> str:
        return self.backend_name or f"{self.reconstructor}+{self.detector}"


@dataclass
class SessionStats:
    """What happened on one connection; errors hold the reply messages."""

    geometry: Optional[Tuple[int, int]] = None
    requests: int = 0
    detections_sent: int = 0
    errors: List[str] = field(default_factory=list)
    refused: bool = False


class _ModelBackend:
    """Loads models once; hands out per-session reconstruction state."""

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        self.detector = build_detector(cfg.detector, cfg.detector_model,
                                       cfg.device, cfg.blob_threshold,
                                       cfg.min_area)
        self._shared_recon = None
        if cfg.reconstructor != "accumulator":
            # geometry-independent engines load now so a bad model path
            # fails at startup, not on the first client
            self._shared_recon = build_reconstructor(
                cfg.reconstructor, 0, 0, cfg.model_path, cfg.device)

    def new_session(self, width: int, height: int):
        if self._shared_recon is not None:
            self._shared_recon.reset()
            return self._shared_recon
        return AccumulatorReconstructor(width, height)

    def handle(self, recon, width, height, k, t_end, events) -> list:
        grid = voxel_grid(events, t_end, width, height, self.cfg.bins)
        frame = recon(grid, k, t_end)
        if frame.shape != (height, width):
            raise ModelError(f"reconstruction produced {frame.shape}, "
                             f"session geometry is {(height, width)}")
        if self.cfg.dump_frames:
            dump_frame(frame, self.cfg.dump_frames)
        boxes = self.detector(frame)
        keep = self.cfg.target_classes
        return [b for b in boxes
                if b[4] >= self.cfg.confidence
                and (keep is None or b[5] in keep)]


class _MockBackend:
    """Replays configured responses in order (repeating the last one).

    Entries are either a list of (xmin, ymin, xmax, ymax, conf, cls) rows
    or the string ``"error"`` to answer with an error reply.  Requests are
    validated exactly as strictly as for the real backend.
    """

    def __init__(self, responses: Sequence, bins: Optional[int] = None):
        if not responses:
            raise ConfigError("mock backend needs at least one response")
        self.responses = list(responses)
        self.cfg = BackendConfig(bins=bins if bins is not None else 5,
                                 backend_name="mock")
        self._strict_bins = bins is not None
        self._served = 0

    def new_session(self, width, height):
        self._served = 0
        return None

    def handle(self, recon, width, height, k, t_end, events) -> list:
        reply = self.responses[min(self._served, len(self.responses) - 1)]
        self._served += 1
        if reply == "error":
            raise ModelError("scripted failure")
        return [tuple(b) for b in reply]


def _session(rfile, wfile, backend) -> SessionStats:
    """Runs one connection to completion; never raises on client mistakes."""
    stats = SessionStats()
    cfg = backend.cfg

    def send(obj):
        wfile.write(protocol.encode_message(obj))
        wfile.flush()

    line = rfile.readline()
    if not line:
        stats.refused = True
        return stats
    try:
        width, height, bins = protocol.validate_hello(protocol.decode_line(line))
        strict = getattr(backend, "_strict_bins", True)
        if strict and bins != cfg.bins:
            raise RequestError(f"bins mismatch: client sent {bins}, "
                               f"backend serves {cfg.bins}")
    except RequestError as exc:
        stats.refused = True
        stats.errors.append(str(exc))
        send(protocol.error_reply(exc.k, str(exc)))
        return stats

    recon = backend.new_session(width, height)
    stats.geometry = (width, height)
    send(protocol.ready_reply(cfg.name))

    last_k = -1
    while True:
        line = rfile.readline()
        if not line:
            break
        stats.requests += 1
        try:
            msg = protocol.decode_line(line)
            k, t_end, events = protocol.validate_detect(msg, width, height,
                                                        last_k)
        except RequestError as exc:
            stats.errors.append(str(exc))
            send(protocol.error_reply(exc.k, str(exc)))
            continue
        last_k = k
        try:
            boxes = backend.handle(recon, width, height, k, t_end, events)
        except BridgeBackendError as exc:
            stats.errors.append(str(exc))
            send(protocol.error_reply(k, str(exc)))
            continue
        stats.detections_sent += 1
        send(protocol.detections_reply(k, boxes))
    return stats


class BridgeServer:
    """TCP transport around the session loop, one connection at a time."""

    def __init__(self, backend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        self.host = host
        self.port = port
        self.sessions: List[SessionStats] = []
        self._sock = None
        self._thread = None
        self._running = False

    def start(self) -> tuple:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((self.host, self.port))
        self._sock.listen(4)
        # poll the listener so stop() never waits behind a blocked accept
        self._sock.settimeout(0.05)
        self.host, self.port = self._sock.getsockname()
        self._running = True
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()
        return self.host, self.port

    @property
    def address(self) -> tuple:
        return self.host, self.port

    def _loop(self):
        while self._running:
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                with conn, conn.makefile("rb") as rf, conn.makefile("wb") as wf:
                    self.sessions.append(_session(rf, wf, self.backend))
            except (OSError, ValueError) as exc:
                logger.warning("session from %s died: %s", peer, exc)

    def serve_count(self, n: int, timeout: float = 60.0):
        """Block until n sessions completed (test convenience)."""
        import time
        deadline = time.monotonic() + timeout
        while len(self.sessions) < n:
            if time.monotonic() > deadline:
                raise TimeoutError(f"served {len(self.sessions)}/{n} sessions")
            time.sleep(0.005)

    def stop(self):
        self._running = False
        if self._sock is not None:
            self._sock.close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)


def serve(cfg: BackendConfig, address: Optional[tuple] = None,
          stdio: bool = False, once: bool = False):
    """Entry point behind the CLI: TCP on ``address`` or a stdio session."""
    backend = _ModelBackend(cfg)
    if stdio:
        stats = _session(sys.stdin.buffer, sys.stdout.buffer, backend)
        logger.info("stdio session done: %d requests, %d errors",
                    stats.requests, len(stats.errors))
        return stats
    if address is None:
        raise ConfigError("serve needs an address or stdio=True")
    server = BridgeServer(backend, address[0], address[1])
    host, port = server.start()
    # announced unconditionally so callers passing port 0 can find the socket
    print(f"listening on {host}:{port} (backend {cfg.name})",
          file=sys.stderr, flush=True)
    try:
        if once:
            server.serve_count(1, timeout=3600.0)
        else:
            while True:
                server._thread.join(timeout=3600.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return server.sessions


def mock_serve(responses: Sequence, address: tuple, bins: Optional[int] = None,
               start: bool = True) -> BridgeServer:
    """Protocol test double: scripted replies behind the real session loop."""
    server = BridgeServer(_MockBackend(responses, bins), address[0], address[1])
    if start:
        server.start()
    return server
