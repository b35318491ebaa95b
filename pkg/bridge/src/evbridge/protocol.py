"""Wire protocol: newline-delimited JSON, one object per line.

Session shape (version 1):

    -> {"type":"hello","version":1,"width":W,"height":H,"bins":B}
    <- {"type":"ready","backend":"<name>"}
    -> {"type":"detect","k":K,"t_end":T,"events":[[t,x,y,p], ...]}   # p = +/-1
    <- {"type":"detections","k":K,"boxes":[{"xmin":..,"ymin":..,"xmax":..,
                                            "ymax":..,"conf":..,"cls":..}]}
    <- {"type":"error","k":K,"message":"..."}

Encoding is canonical (sorted keys, no whitespace) so a message has exactly
one byte representation.  `k` is strictly increasing within a session and
every reply echoes the request it answers.
"""

from __future__ import annotations

import json
import numbers

from .errors import RequestError

PROTOCOL_VERSION = 1


def encode_message(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), sort_keys=True) + "\n").encode()


def decode_line(line: bytes) -> dict:
    try:
        obj = json.loads(line)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RequestError(f"request is not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or "type" not in obj:
        raise RequestError("request must be a JSON object with a 'type' field")
    return obj


def _real(value) -> bool:
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


def validate_hello(msg: dict) -> tuple:
    """Returns (width, height, bins) or raises RequestError."""
    if msg.get("type") != "hello":
        raise RequestError(f"expected a hello, got {msg.get('type')!r}")
    if msg.get("version") != PROTOCOL_VERSION:
        raise RequestError(f"unsupported protocol version {msg.get('version')!r} "
                           f"(this backend speaks {PROTOCOL_VERSION})")
    out = []
    for field in ("width", "height", "bins"):
        value = msg.get(field)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise RequestError(f"hello.{field} must be a positive integer, "
                               f"got {value!r}")
        out.append(value)
    return tuple(out)


def validate_detect(msg: dict, width: int, height: int, last_k: int) -> tuple:
    """Returns (k, t_end, events) with events a validated list of 4-lists."""
    k = msg.get("k")
    if not isinstance(k, int) or isinstance(k, bool):
        raise RequestError(f"detect.k must be an integer, got {k!r}")
    if msg.get("type") != "detect":
        raise RequestError(f"expected a detect request, got {msg.get('type')!r}", k)
    if k <= last_k:
        raise RequestError(f"detect.k must advance: got {k} after {last_k}", k)
    t_end = msg.get("t_end")
    if not _real(t_end):
        raise RequestError(f"detect.t_end must be a number, got {t_end!r}", k)
    events = msg.get("events")
    if not isinstance(events, list):
        raise RequestError("detect.events must be an array", k)
    prev_t = None
    for i, ev in enumerate(events):
        if not (isinstance(ev, list) and len(ev) == 4):
            raise RequestError(f"event {i} must be [t, x, y, p]", k)
        t, x, y, p = ev
        if not (_real(t) and _real(x) and _real(y)):
            raise RequestError(f"event {i} has non-numeric fields", k)
        if isinstance(p, bool) or p not in (-1, 1):
            raise RequestError(f"event {i} polarity must be -1 or +1, got {p!r}", k)
        if not (0 <= x < width and 0 <= y < height):
            raise RequestError(f"event {i} at ({x}, {y}) is outside the "
                               f"{width}x{height} frame", k)
        # the tensorizer anchors bin 0 at the first event and bin B-1 at
        # t_end, so out-of-order or late events would land in bogus bins
        if prev_t is not None and t < prev_t:
            raise RequestError(f"event {i} breaks time order", k)
        if t > t_end:
            raise RequestError(f"event {i} is after t_end", k)
        prev_t = t
    return k, float(t_end), events


def ready_reply(backend: str) -> dict:
    return {"type": "ready", "backend": backend}


def detections_reply(k: int, boxes) -> dict:
    return {"type": "detections", "k": int(k),
            "boxes": [{"xmin": float(b[0]), "ymin": float(b[1]),
                       "xmax": float(b[2]), "ymax": float(b[3]),
                       "conf": float(b[4]), "cls": int(b[5])} for b in boxes]}


def error_reply(k: int, message: str) -> dict:
    return {"type": "error", "k": int(k), "message": str(message)}
