"""Detector abstraction: window in, measurement out.

Three layers:

* :func:`select_measurement` reduces a detection list to at most one
  position measurement with an assigned noise covariance,
* :class:`OracleDetector` fabricates detections from groundtruth with
  configurable miss/false-positive/jitter behavior (seeded, reproducible),
* :class:`BridgeClient` forwards raw event windows to an external detection
  backend over a newline-delimited JSON protocol (TCP or stdio).

Wire protocol (version 1), one JSON object per line:

    -> {"type":"hello","version":1,"width":W,"height":H,"bins":B}
    <- {"type":"ready","backend":"<name>"}
    -> {"type":"detect","k":K,"t_end":T,"events":[[t,x,y,p],...]}
    <- {"type":"detections","k":K,"boxes":[{"xmin":..,"ymin":..,"xmax":..,
                                            "ymax":..,"conf":..,"cls":..}]}
    <- {"type":"error","k":K,"message":"..."}

Polarity on the wire is -1/+1.  `k` must echo the request and responses
arrive in request order; the client keeps exactly one request in flight.
"""

from __future__ import annotations

import json
import logging
import socket
from dataclasses import dataclass
from typing import IO, Optional, Sequence

import numpy as np

from .errors import (BridgeConnectionError, BridgeProtocolError, ConfigError)
from .events import EventWindow, SensorGeometry
from .rng import SplitMix64
from .simulate import GroundTruth

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


# ---------------------------------------------------------------------------
# Measurement types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    """One candidate box from a detector, stamped with the window time."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    confidence: float
    class_id: int
    t: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ConfigError(f"degenerate detection box "
                              f"({self.xmin}, {self.ymin}, {self.xmax}, {self.ymax})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ConfigError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def bbox(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @property
    def center(self):
        return 0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)


@dataclass(frozen=True)
class Measurement:
    """Position measurement: z = (x, y) px at time t with SPD covariance R."""

    z: np.ndarray
    t: float
    R: np.ndarray

    def __post_init__(self):
        try:
            z = np.asarray(self.z, dtype=np.float64).reshape(2)
            R = np.asarray(self.R, dtype=np.float64).reshape(2, 2)
        except ValueError:
            raise ConfigError("measurement needs z of shape (2,) and R of "
                              "shape (2, 2)") from None
        if not np.allclose(R, R.T, rtol=0.0, atol=1e-12):
            raise ConfigError("measurement covariance must be symmetric")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ConfigError("measurement covariance must be positive-definite") from None
        z.flags.writeable = False
        R.flags.writeable = False
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "R", R)


# Every window yields exactly one outcome: a Measurement or None (no detection).
DetectorOutcome = Optional[Measurement]


@dataclass(frozen=True)
class MeasurementNoise:
    """Policy assigning the noise covariance R to accepted detections.

    Default: fixed isotropic R = sigma^2 I.  With ``scale_by_confidence``
    the covariance is divided by the detection confidence (clamped away from
    zero), so low-confidence boxes pull the filter less.
    """

    sigma: float = 3.0
    scale_by_confidence: bool = False
    min_confidence: float = 1e-3

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"measurement sigma must be > 0, got {self.sigma}")

    def covariance(self, confidence: float) -> np.ndarray:
        r = self.sigma ** 2
        if self.scale_by_confidence:
            r = r / max(float(confidence), self.min_confidence)
        return np.array([[r, 0.0], [0.0, r]])


def select_measurement(detections: Sequence[Detection], target_class: int,
                       noise: MeasurementNoise) -> DetectorOutcome:
    """Pick the best same-class detection and convert it to a measurement.

    Highest confidence wins; exact ties fall back to the lexicographically
    smallest box corner (xmin, then ymin, then xmax, then ymax), so the
    result never depends on list order.
    """
    candidates = [d for d in detections if d.class_id == target_class]
    if not candidates:
        return None
    best = min(candidates,
               key=lambda d: (-d.confidence, d.xmin, d.ymin, d.xmax, d.ymax))
    cx, cy = best.center
    return Measurement(z=np.array([cx, cy]), t=best.t,
                       R=noise.covariance(best.confidence))


# ---------------------------------------------------------------------------
# Groundtruth oracle detector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleConfig:
    """Behavior of the synthetic detector.

    sigma       Gaussian jitter (px) added independently to each box edge.
    p_miss      probability of emitting nothing for a window.
    p_fp        probability of adding one uniformly placed false positive
                (requires ``frame`` for placement).
    conf_range  detections draw confidence uniformly from this interval.
    """

    sigma: float = 2.0
    p_miss: float = 0.0
    p_fp: float = 0.0
    conf_range: tuple = (0.5, 1.0)
    class_id: int = 0
    frame: SensorGeometry | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"oracle sigma must be >= 0, got {self.sigma}")
        for name in ("p_miss", "p_fp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.conf_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"bad confidence range {self.conf_range}")
        if self.p_fp > 0 and self.frame is None:
            raise ConfigError("false positives need a frame geometry for placement")


def oracle_detect(window: EventWindow, gt: GroundTruth, cfg: OracleConfig,
                  seed: int) -> list[Detection]:
    """Fabricate detections for one window from the groundtruth track.

    Uses the substream derived from (seed, window.index), so the outcome of
    a window is independent of processing order.  Draw sequence: miss test;
    if detected, edge jitter (xmin, ymin, xmax, ymax) and confidence; then
    false-positive test and, if it fires, position and confidence.
    """
    stream = SplitMix64.derive(seed, window.index)
    out = []
    xmin, ymin, xmax, ymax = (float(v) for v in gt.bbox_at(window.t_end))
    if stream.next_unit() >= cfg.p_miss:
        if cfg.sigma > 0:
            xmin += cfg.sigma * stream.next_gaussian()
            ymin += cfg.sigma * stream.next_gaussian()
            xmax += cfg.sigma * stream.next_gaussian()
            ymax += cfg.sigma * stream.next_gaussian()
            if xmax < xmin:
                xmin, xmax = xmax, xmin
            if ymax < ymin:
                ymin, ymax = ymax, ymin
            if xmax == xmin:
                xmax = xmin + 1e-9
            if ymax == ymin:
                ymax = ymin + 1e-9
        lo, hi = cfg.conf_range
        conf = lo + (hi - lo) * stream.next_unit()
        out.append(Detection(xmin, ymin, xmax, ymax, conf, cfg.class_id,
                             window.t_end))
    if cfg.p_fp > 0 and stream.next_unit() < cfg.p_fp:
        w = xmax - xmin
        h = ymax - ymin
        frame = cfg.frame
        cx = stream.next_unit() * (frame.width - 1)
        cy = stream.next_unit() * (frame.height - 1)
        lo, hi = cfg.conf_range
        conf = lo + (hi - lo) * stream.next_unit()
        out.append(Detection(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w,
                             cy + 0.5 * h, conf, cfg.class_id, window.t_end))
    return out


class OracleDetector:
    """Detector interface over :func:`oracle_detect` for pipeline use."""

    def __init__(self, gt: GroundTruth, cfg: OracleConfig, seed: int = 0):
        self.gt = gt
        self.cfg = cfg
        self.seed = seed

    def detect(self, window: EventWindow) -> list[Detection]:
        return oracle_detect(window, self.gt, self.cfg, self.seed)

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# Wire protocol plumbing
# ---------------------------------------------------------------------------

def encode_message(obj: dict) -> bytes:
    """Canonical one-line JSON: sorted keys, no whitespace, newline framed."""
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("ascii") + b"\n"


def decode_message(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BridgeProtocolError(f"bad protocol line: {exc}") from None
    if not isinstance(obj, dict) or "type" not in obj:
        raise BridgeProtocolError(f"protocol message must be an object with "
                                  f"a 'type', got {obj!r}")
    return obj


def window_payload(window: EventWindow) -> dict:
    ev = window.events
    events = [[float(t), int(x), int(y), int(p)]
              for t, x, y, p in zip(ev["t"], ev["x"], ev["y"], ev["p"])]
    return {"type": "detect", "k": window.index, "t_end": window.t_end,
            "events": events}


def _parse_boxes(obj: dict, t_end: float) -> list[Detection]:
    boxes = obj.get("boxes")
    if not isinstance(boxes, list):
        raise BridgeProtocolError("detections message missing 'boxes' list")
    out = []
    for box in boxes:
        if not isinstance(box, dict):
            raise BridgeProtocolError(f"box must be an object, got {box!r}")
        try:
            det = Detection(float(box["xmin"]), float(box["ymin"]),
                            float(box["xmax"]), float(box["ymax"]),
                            float(box["conf"]), int(box.get("cls", 0)), t_end)
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            raise BridgeProtocolError(f"malformed box {box!r}: {exc}") from None
        out.append(det)
    return out


class BridgeClient:
    """Blocking client for an external detection backend.

    Owns its transport exclusively; requests are strictly sequential (one in
    flight).  Transport failures raise :class:`BridgeConnectionError`;
    malformed or out-of-order replies raise :class:`BridgeProtocolError`;
    backend-reported per-window errors are logged and yield an empty
    detection list.
    """

    def __init__(self, reader: IO[bytes], writer: IO[bytes],
                 close=None):
        self._reader = reader
        self._writer = writer
        self._close = close
        self.backend: str | None = None
        self._ready = False

    # -- transports ---------------------------------------------------------

    @classmethod
    def connect_tcp(cls, host: str, port: int, timeout: float = 10.0) -> "BridgeClient":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(timeout)
        except OSError as exc:
            raise BridgeConnectionError(f"cannot connect to {host}:{port}: {exc}") from None
        reader = sock.makefile("rb")
        writer = sock.makefile("wb")

        def close():
            reader.close()
            writer.close()
            sock.close()

        return cls(reader, writer, close)

    @classmethod
    def from_streams(cls, reader: IO[bytes], writer: IO[bytes]) -> "BridgeClient":
        """Wrap an existing byte-stream pair (e.g. a subprocess's stdio)."""
        return cls(reader, writer)

    # -- low-level ----------------------------------------------------------

    def _send(self, obj: dict) -> None:
        try:
            self._writer.write(encode_message(obj))
            self._writer.flush()
        except (OSError, ValueError) as exc:
            raise BridgeConnectionError(f"bridge send failed: {exc}") from None

    def _recv(self) -> dict:
        try:
            line = self._reader.readline()
        except (OSError, socket.timeout) as exc:
            raise BridgeConnectionError(f"bridge receive failed: {exc}") from None
        if not line:
            raise BridgeConnectionError("bridge closed the connection")
        return decode_message(line)

    # -- protocol -----------------------------------------------------------

    def handshake(self, geometry: SensorGeometry, bins: int = 5) -> str:
        self._send({"type": "hello", "version": PROTOCOL_VERSION,
                    "width": geometry.width, "height": geometry.height,
                    "bins": bins})
        reply = self._recv()
        if reply.get("type") != "ready":
            raise BridgeProtocolError(f"expected ready, got {reply!r}")
        backend = reply.get("backend")
        if not isinstance(backend, str):
            raise BridgeProtocolError(f"ready message missing backend name: {reply!r}")
        self.backend = backend
        self._ready = True
        return backend

    def detect_window(self, window: EventWindow) -> list[Detection]:
        if not self._ready:
            raise BridgeProtocolError("detect before handshake")
        self._send(window_payload(window))
        reply = self._recv()
        kind = reply.get("type")
        if kind == "error":
            if reply.get("k") != window.index:
                raise BridgeProtocolError(
                    f"error for k={reply.get('k')!r}, expected {window.index}")
            logger.warning("bridge backend error for window %d: %s",
                           window.index, reply.get("message"))
            return []
        if kind != "detections":
            raise BridgeProtocolError(f"expected detections, got {reply!r}")
        if reply.get("k") != window.index:
            raise BridgeProtocolError(
                f"response k={reply.get('k')!r} does not echo request k={window.index}")
        return _parse_boxes(reply, window.t_end)

    # Pipeline-facing alias so BridgeClient satisfies the detector interface.
    def detect(self, window: EventWindow) -> list[Detection]:
        return self.detect_window(window)

    def close(self) -> None:
        if self._close is not None:
            self._close()
        else:
            for stream in (self._reader, self._writer):
                try:
                    stream.close()
                except OSError:
                    pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def bridge_detect(window: EventWindow, client: BridgeClient) -> list[Detection]:
    """Forward one window to the backend; detections stamped with t_end."""
    return client.detect_window(window)
