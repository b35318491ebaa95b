"""CSV persistence for tracker output.

Estimate log: one row per processed window,

    t,k,x,y,vx,vy,p00,p01,...,p33,updated

with the covariance written row-major and ``updated`` 1 when a measurement
was folded at that window, 0 for prediction-only rows.

Detection log: one row per detection, plus one empty-box row for windows
without any detection, so the set of evaluated frames survives the round
trip:

    k,t,xmin,ymin,xmax,ymax,conf,cls

Floats are written with ``repr`` so both files round-trip bit-exactly.
"""

from __future__ import annotations

from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .detection import Detection
from .errors import ConfigError, ParseError
from .tracker import StateEstimate

ESTIMATE_HEADER = ("t,k,x,y,vx,vy,"
                   + ",".join(f"p{i}{j}" for i in range(4) for j in range(4))
                   + ",updated")
DETECTION_HEADER = "k,t,xmin,ymin,xmax,ymax,conf,cls"


class WindowDetections(NamedTuple):
    k: int
    t: float
    detections: List[Detection]


def _open_text(target, mode: str):
    if hasattr(target, "write") or hasattr(target, "read"):
        return target, False
    return open(target, mode), True


def _read_all(source) -> str:
    stream, owned = _open_text(source, "r")
    try:
        return stream.read()
    finally:
        if owned:
            stream.close()


def _iter_csv(text: str, header: str, n_fields: int):
    """Yield (byte_offset, fields) per data line after validating the header."""
    offset = 0
    saw_header = False
    for line in text.split("\n"):
        start = offset
        offset += len(line) + 1
        stripped = line.strip()
        if not stripped:
            continue
        if not saw_header:
            if stripped != header:
                raise ParseError(f"expected header {header!r}, got {stripped!r}",
                                 start)
            saw_header = True
            continue
        fields = stripped.split(",")
        if len(fields) != n_fields:
            raise ParseError(f"expected {n_fields} fields, got {len(fields)}",
                             start)
        yield start, fields
    if not saw_header:
        raise ParseError("empty file (missing header)", 0)


# ---------------------------------------------------------------------------
# Estimate log
# ---------------------------------------------------------------------------

def write_estimate_log(target, estimates: Sequence[StateEstimate]) -> None:
    lines = [ESTIMATE_HEADER + "\n"]
    for est in estimates:
        if est.k is None:
            raise ConfigError("cannot log an estimate without a window index")
        cov = ",".join(repr(float(v)) for v in est.P.ravel())
        lines.append(f"{float(est.t)!r},{est.k},"
                     f"{float(est.x[0])!r},{float(est.x[1])!r},"
                     f"{float(est.x[2])!r},{float(est.x[3])!r},"
                     f"{cov},{1 if est.updated else 0}\n")
    data = "".join(lines)
    stream, owned = _open_text(target, "w")
    try:
        stream.write(data)
    finally:
        if owned:
            stream.close()


def read_estimate_log(source) -> List[StateEstimate]:
    out = []
    for start, fields in _iter_csv(_read_all(source), ESTIMATE_HEADER, 23):
        try:
            t = float(fields[0])
            k = int(fields[1])
            x = np.array([float(v) for v in fields[2:6]])
            P = np.array([float(v) for v in fields[6:22]]).reshape(4, 4)
            updated = fields[22]
        except ValueError as exc:
            raise ParseError(f"bad estimate field: {exc}", start) from None
        if updated not in ("0", "1"):
            raise ParseError(f"updated flag must be 0 or 1, got {updated!r}",
                             start)
        out.append(StateEstimate(x=x, P=P, t=t, k=k, updated=updated == "1"))
    return out


# ---------------------------------------------------------------------------
# Detection log
# ---------------------------------------------------------------------------

def write_detection_log(target,
                        rows: Sequence[Tuple[int, float, Sequence[Detection]]]
                        ) -> None:
    """Rows are (window index, t_end, detections); empty lists still emit a
    frame marker so evaluation knows the window existed."""
    lines = [DETECTION_HEADER + "\n"]
    for k, t, detections in rows:
        if not detections:
            lines.append(f"{int(k)},{float(t)!r},,,,,,\n")
            continue
        for d in detections:
            lines.append(f"{int(k)},{float(t)!r},{d.xmin!r},{d.ymin!r},"
                         f"{d.xmax!r},{d.ymax!r},{d.confidence!r},{d.class_id}\n")
    data = "".join(lines)
    stream, owned = _open_text(target, "w")
    try:
        stream.write(data)
    finally:
        if owned:
            stream.close()


def read_detection_log(source) -> List[WindowDetections]:
    frames: dict = {}
    order: List[int] = []
    for start, fields in _iter_csv(_read_all(source), DETECTION_HEADER, 8):
        try:
            k = int(fields[0])
            t = float(fields[1])
        except ValueError as exc:
            raise ParseError(f"bad detection field: {exc}", start) from None
        if k not in frames:
            frames[k] = WindowDetections(k=k, t=t, detections=[])
            order.append(k)
        elif frames[k].t != t:
            raise ParseError(f"window {k} listed with two timestamps", start)
        box_fields = fields[2:]
        if all(f == "" for f in box_fields):
            continue
        try:
            det = Detection(float(fields[2]), float(fields[3]), float(fields[4]),
                            float(fields[5]), float(fields[6]), int(fields[7]),
                            t)
        except (ValueError, ConfigError) as exc:
            raise ParseError(f"bad detection row: {exc}", start) from None
        frames[k].detections.append(det)
    return [frames[k] for k in order]
