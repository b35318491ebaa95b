"""In-process mock of a detection backend speaking the bridge protocol.

Serves the newline-delimited JSON protocol over a loopback TCP socket (or a
caller-supplied stream pair), validates every request strictly, and records
violations instead of silently tolerating them — tests assert the violation
list is empty after a soak run.

Reply modes:
  fixed_box   every window returns one configured box,
  centroid    returns a fixed-size box centered on the window's event mean,
  scripted    per-window behavior keyed by k: a list of box dicts, or one of
              the strings "error", "drop" (never reply), "garbage" (send a
              non-JSON line), "close" (drop the connection).

Fault injection (drops, garbage, mid-stream closes) is also available
unconditionally via ``close_after``: the connection dies after that many
detect replies.
"""

from __future__ import annotations

import logging
import socket
import threading
from typing import Optional

from .detection import PROTOCOL_VERSION, decode_message, encode_message
from .errors import BridgeProtocolError, ConfigError

logger = logging.getLogger(__name__)


class MockBridgeServer:
    """Single-connection-at-a-time loopback backend for tests and demos."""

    def __init__(self, mode: str = "fixed_box",
                 box: tuple = (10.0, 10.0, 30.0, 30.0),
                 conf: float = 0.9, cls: int = 0,
                 box_size: tuple = (20.0, 20.0),
                 scripted: Optional[dict] = None,
                 close_after: Optional[int] = None,
                 backend: str = "mock",
                 timeout: float = 30.0):
        if mode not in ("fixed_box", "centroid", "scripted"):
            raise ConfigError(f"unknown mock mode {mode!r}")
        if mode == "scripted" and scripted is None:
            raise ConfigError("scripted mode needs a script")
        self.mode = mode
        self.box = box
        self.conf = conf
        self.cls = cls
        self.box_size = box_size
        self.scripted = scripted or {}
        self.close_after = close_after
        self.backend = backend
        self.timeout = timeout
        self.violations: list[str] = []
        self.requests = 0
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None
        self._stopping = False
        self._conn: Optional[socket.socket] = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> tuple:
        """Bind an ephemeral loopback port and serve until stop()."""
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(("127.0.0.1", 0))
        self._sock.listen(4)
        # poll the listener so stop() is never stuck behind a blocking accept
        self._sock.settimeout(0.05)
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()
        return self.address

    @property
    def address(self) -> tuple:
        if self._sock is None:
            raise ConfigError("server not started")
        return self._sock.getsockname()

    def stop(self) -> None:
        self._stopping = True
        if self._conn is not None:
            try:
                self._conn.close()
            except OSError:
                pass
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    # -- serving -------------------------------------------------------------

    def _serve(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._conn = conn
            conn.settimeout(self.timeout)
            try:
                self.serve_connection(conn.makefile("rb"), conn.makefile("wb"))
            except (OSError, socket.timeout):
                pass
            finally:
                try:
                    conn.close()
                except OSError:
                    pass
                self._conn = None

    def serve_connection(self, reader, writer) -> None:
        """Run one protocol session on a byte-stream pair."""
        geometry = self._handshake(reader, writer)
        if geometry is None:
            return
        width, height = geometry
        replies = 0
        last_k: Optional[int] = None
        while True:
            line = reader.readline()
            if not line:
                return
            try:
                obj = decode_message(line)
            except BridgeProtocolError as exc:
                self._violate(f"unreadable request: {exc}")
                return
            if obj.get("type") != "detect":
                self._violate(f"expected detect, got {obj.get('type')!r}")
                self._send(writer, {"type": "error", "k": obj.get("k"),
                                    "message": "expected detect"})
                continue
            self.requests += 1
            k = self._validate_detect(obj, width, height, last_k)
            last_k = k if isinstance(k, int) else last_k

            behavior = self.scripted.get(k) if self.mode == "scripted" else None
            if behavior == "close":
                return
            if behavior == "drop":
                continue
            if behavior == "garbage":
                writer.write(b"this is not json\n")
                writer.flush()
                continue
            if behavior == "error":
                self._send(writer, {"type": "error", "k": k,
                                    "message": "scripted failure"})
                continue

            if isinstance(behavior, list):
                boxes = behavior
            elif self.mode == "centroid":
                boxes = [self._centroid_box(obj)]
            else:
                x0, y0, x1, y1 = self.box
                boxes = [{"xmin": x0, "ymin": y0, "xmax": x1, "ymax": y1,
                          "conf": self.conf, "cls": self.cls}]
            self._send(writer, {"type": "detections", "k": k, "boxes": boxes})
            replies += 1
            if self.close_after is not None and replies >= self.close_after:
                return

    # -- pieces ---------------------------------------------------------------

    def _handshake(self, reader, writer):
        line = reader.readline()
        if not line:
            return None
        try:
            hello = decode_message(line)
        except BridgeProtocolError as exc:
            self._violate(f"unreadable hello: {exc}")
            return None
        problems = []
        if hello.get("type") != "hello":
            problems.append(f"first message type {hello.get('type')!r}")
        if hello.get("version") != PROTOCOL_VERSION:
            problems.append(f"version {hello.get('version')!r}")
        for key in ("width", "height", "bins"):
            v = hello.get(key)
            if not isinstance(v, int) or v <= 0:
                problems.append(f"{key}={v!r}")
        if problems:
            self._violate("bad hello: " + "; ".join(problems))
            self._send(writer, {"type": "error", "k": None,
                                "message": "bad hello"})
            return None
        self._send(writer, {"type": "ready", "backend": self.backend})
        return hello["width"], hello["height"]

    def _validate_detect(self, obj: dict, width: int, height: int,
                         last_k: Optional[int]):
        k = obj.get("k")
        if not isinstance(k, int) or k < 0:
            self._violate(f"bad k {k!r}")
        elif last_k is not None and k <= last_k:
            self._violate(f"k {k} does not advance past {last_k}")
        t_end = obj.get("t_end")
        if not isinstance(t_end, (int, float)):
            self._violate(f"bad t_end {t_end!r} (k={k})")
            t_end = None
        events = obj.get("events")
        if not isinstance(events, list) or not events:
            self._violate(f"events must be a non-empty list (k={k})")
            return k
        prev_t = None
        for i, ev in enumerate(events):
            if (not isinstance(ev, list) or len(ev) != 4
                    or not all(isinstance(v, (int, float)) for v in ev)):
                self._violate(f"malformed event {i} of window {k}: {ev!r}")
                return k
            t, x, y, p = ev
            if int(x) != x or int(y) != y or not (0 <= x < width and 0 <= y < height):
                self._violate(f"event {i} of window {k} out of frame: ({x}, {y})")
            if p not in (-1, 1):
                self._violate(f"event {i} of window {k} polarity {p!r}")
            if prev_t is not None and t < prev_t:
                self._violate(f"event {i} of window {k} goes back in time")
            prev_t = t
        if t_end is not None and events and events[-1][0] != t_end:
            self._violate(f"window {k} t_end {t_end} != last event time "
                          f"{events[-1][0]}")
        return k

    def _centroid_box(self, obj: dict) -> dict:
        events = obj["events"]
        n = len(events)
        cx = sum(ev[1] for ev in events) / n
        cy = sum(ev[2] for ev in events) / n
        w, h = self.box_size
        return {"xmin": cx - 0.5 * w, "ymin": cy - 0.5 * h,
                "xmax": cx + 0.5 * w, "ymax": cy + 0.5 * h,
                "conf": self.conf, "cls": self.cls}

    def _send(self, writer, obj: dict) -> None:
        writer.write(encode_message(obj))
        writer.flush()

    def _violate(self, message: str) -> None:
        logger.warning("protocol violation: %s", message)
        self.violations.append(message)
