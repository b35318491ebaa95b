"""Event streams: parsing, fixed-count windowing, voxel-grid tensorization.

Events are kept in packed numpy record arrays (:data:`EVENT_DTYPE`, 13 bytes
per event) so binary I/O is a straight memory copy.

File formats
------------
text    one event per line, ASCII, whitespace separated:
        ``<t_seconds> <x> <y> <polarity>`` with polarity written 0/1 and
        decoded to -1/+1.
binary  little-endian packed records ``(f64 t, u16 x, u16 y, i8 p)``,
        13 bytes each, polarity stored as -1/+1.

Sensor geometry is never inferred from data; pass it explicitly to enable
bounds validation.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, NamedTuple, Sequence, Union

import numpy as np

from . import _kernels
from .errors import BoundsError, ConfigError, OrderingError, ParseError

EVENT_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])
RECORD_SIZE = EVENT_DTYPE.itemsize  # 13 bytes


class Event(NamedTuple):
    """A single polarity spike."""

    t: float
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"sensor geometry must be positive, got "
                              f"{self.width}x{self.height}")

    @property
    def pixel_count(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class WindowConfig:
    """Window size as an absolute event count or as events per pixel.

    Exactly one of ``count`` and ``per_pixel`` must be set; ``per_pixel`` is
    converted with ``N = floor(n * width * height + 0.5)``, minimum 1.
    """

    count: int | None = None
    per_pixel: float | None = None
    bins: int = 5

    def __post_init__(self):
        if (self.count is None) == (self.per_pixel is None):
            raise ConfigError("set exactly one of count / per_pixel")
        if self.count is not None and self.count < 1:
            raise ConfigError(f"window count must be >= 1, got {self.count}")
        if self.per_pixel is not None and self.per_pixel <= 0:
            raise ConfigError(f"events per pixel must be > 0, got {self.per_pixel}")
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")

    def resolve_count(self, geometry: SensorGeometry | None = None) -> int:
        if self.count is not None:
            return self.count
        if geometry is None:
            raise ConfigError("per_pixel window size needs a sensor geometry")
        return max(1, int(math.floor(self.per_pixel * geometry.pixel_count + 0.5)))


@dataclass(frozen=True)
class EventWindow:
    """Exactly-N consecutive events; timestamped by the last event."""

    events: np.ndarray
    index: int
    t_start: float
    t_end: float

    def __len__(self) -> int:
        return self.events.shape[0]

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class EventTensor:
    """Spatio-temporal voxel grid of one window, shape (bins, height, width)."""

    grid: np.ndarray
    window_index: int
    t_end: float

    @property
    def bins(self) -> int:
        return self.grid.shape[0]

    def mass(self) -> float:
        """Total signed mass; equals the window's polarity sum."""
        return float(self.grid.sum())


# ---------------------------------------------------------------------------
# Array construction helpers
# ---------------------------------------------------------------------------

def events_array(t, x, y, polarity) -> np.ndarray:
    """Pack parallel sequences into an event record array."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty(t.shape[0], dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = np.asarray(x)
    out["y"] = np.asarray(y)
    out["p"] = np.asarray(polarity)
    return out


def empty_events() -> np.ndarray:
    return np.empty(0, dtype=EVENT_DTYPE)


def as_event_array(events) -> np.ndarray:
    """Coerce an event array or an iterable of :class:`Event` to records."""
    if isinstance(events, np.ndarray):
        if events.dtype != EVENT_DTYPE:
            raise ConfigError(f"expected event dtype {EVENT_DTYPE}, got {events.dtype}")
        return events
    seq = list(events)
    out = np.empty(len(seq), dtype=EVENT_DTYPE)
    for i, ev in enumerate(seq):
        out[i] = (ev.t, ev.x, ev.y, ev.polarity)
    return out


def validate_bounds(events: np.ndarray, geometry: SensorGeometry,
                    index_offset: int = 0) -> None:
    """Raise :class:`BoundsError` on the first out-of-range coordinate."""
    bad_x = events["x"] >= geometry.width
    bad_y = events["y"] >= geometry.height
    bad = bad_x | bad_y
    if bad.any():
        i = int(np.argmax(bad))
        ev = events[i]
        raise BoundsError(
            f"event {index_offset + i} at ({int(ev['x'])}, {int(ev['y'])}) outside "
            f"{geometry.width}x{geometry.height} sensor")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _open_binary(source, mode: str):
    if isinstance(source, (str, bytes)) and not isinstance(source, bytes):
        return open(source, mode), True
    if isinstance(source, io.IOBase) or hasattr(source, "read") or hasattr(source, "write"):
        return source, False
    raise ConfigError(f"cannot open event source {source!r}")


def _parse_text_line(line: bytes, offset: int) -> tuple:
    parts = line.split()
    if len(parts) != 4:
        raise ParseError(f"expected 4 fields, got {len(parts)}", offset)
    try:
        t = float(parts[0])
        x = int(parts[1])
        y = int(parts[2])
        pol = int(parts[3])
    except ValueError as exc:
        raise ParseError(f"bad event field: {exc}", offset) from None
    if pol not in (0, 1):
        raise ParseError(f"text polarity must be 0 or 1, got {pol}", offset)
    if x < 0 or y < 0:
        raise ParseError(f"negative pixel coordinate ({x}, {y})", offset)
    if x > 0xFFFF or y > 0xFFFF:
        raise ParseError(f"pixel coordinate ({x}, {y}) out of range", offset)
    if not math.isfinite(t):
        raise ParseError(f"non-finite timestamp {t!r}", offset)
    return t, x, y, 1 if pol == 1 else -1


def iter_event_chunks(source, format: str = "text",
                      geometry: SensorGeometry | None = None,
                      chunk_size: int = 65536) -> Iterator[np.ndarray]:
    """Yield event record arrays from a byte stream or path.

    Raises :class:`ParseError` (with the byte offset of the offending
    record) on malformed input and :class:`BoundsError` when a geometry is
    supplied and violated.
    """
    if format not in ("text", "binary"):
        raise ConfigError(f"unknown event format {format!r}")
    stream, owned = _open_binary(source, "rb")
    try:
        if format == "text":
            yield from _iter_text_chunks(stream, geometry, chunk_size)
        else:
            yield from _iter_binary_chunks(stream, geometry, chunk_size)
    finally:
        if owned:
            stream.close()


def _iter_text_chunks(stream: IO[bytes], geometry, chunk_size):
    offset = 0
    count = 0
    pending = b""
    rows = []

    def flush():
        nonlocal rows, count
        out = np.empty(len(rows), dtype=EVENT_DTYPE)
        for i, row in enumerate(rows):
            out[i] = row
        if geometry is not None:
            validate_bounds(out, geometry, index_offset=count)
        count += len(rows)
        rows = []
        return out

    while True:
        block = stream.read(1 << 20)
        if not block:
            break
        pending += block
        lines = pending.split(b"\n")
        pending = lines.pop()
        for line in lines:
            line_offset = offset
            offset += len(line) + 1
            body = line.strip()
            if body and not body.startswith(b"#"):
                rows.append(_parse_text_line(line, line_offset))
            if len(rows) >= chunk_size:
                yield flush()
    body = pending.strip()
    if body and not body.startswith(b"#"):
        rows.append(_parse_text_line(pending, offset))
    if rows:
        yield flush()


def _iter_binary_chunks(stream: IO[bytes], geometry, chunk_size):
    offset = 0
    count = 0
    pending = b""
    block_bytes = chunk_size * RECORD_SIZE
    while True:
        block = stream.read(block_bytes)
        if not block:
            break
        pending += block
        usable = (len(pending) // RECORD_SIZE) * RECORD_SIZE
        if usable:
            arr = np.frombuffer(pending[:usable], dtype=EVENT_DTYPE).copy()
            pending = pending[usable:]
            bad = (arr["p"] != 1) & (arr["p"] != -1)
            if bad.any():
                i = int(np.argmax(bad))
                raise ParseError(f"binary polarity must be -1 or +1, got "
                                 f"{int(arr['p'][i])}", offset + i * RECORD_SIZE)
            if geometry is not None:
                validate_bounds(arr, geometry, index_offset=count)
            count += arr.shape[0]
            offset += usable
            yield arr
    if pending:
        raise ParseError(f"truncated record: {len(pending)} trailing bytes", offset)


def parse_event_stream(source, format: str = "text",
                       geometry: SensorGeometry | None = None) -> Iterator[Event]:
    """Lazily yield :class:`Event` values in file order."""
    for chunk in iter_event_chunks(source, format, geometry):
        for rec in chunk:
            yield Event(float(rec["t"]), int(rec["x"]), int(rec["y"]), int(rec["p"]))


def read_events(source, format: str = "text",
                geometry: SensorGeometry | None = None) -> np.ndarray:
    """Read a whole stream into one record array."""
    chunks = list(iter_event_chunks(source, format, geometry))
    if not chunks:
        return empty_events()
    return np.concatenate(chunks)


def write_events(target, events: np.ndarray, format: str = "text") -> None:
    if format == "text":
        stream, owned = _open_binary(target, "wb")
        try:
            lines = []
            for rec in events:
                pol = 1 if rec["p"] > 0 else 0
                lines.append(f"{float(rec['t'])!r} {int(rec['x'])} "
                             f"{int(rec['y'])} {pol}\n")
            stream.write("".join(lines).encode("ascii"))
        finally:
            if owned:
                stream.close()
    elif format == "binary":
        stream, owned = _open_binary(target, "wb")
        try:
            stream.write(np.ascontiguousarray(events, dtype=EVENT_DTYPE).tobytes())
        finally:
            if owned:
                stream.close()
    else:
        raise ConfigError(f"unknown event format {format!r}")


def guess_format(path: str) -> str:
    """File format from extension: .bin/.dat/.raw are binary, rest text."""
    lower = str(path).lower()
    if lower.endswith((".bin", ".dat", ".raw")):
        return "binary"
    return "text"


# ---------------------------------------------------------------------------
# Fixed-count windowing
# ---------------------------------------------------------------------------

class CountWindower:
    """Streaming partition into consecutive windows of exactly N events.

    The trailing remainder of fewer than N events is held as ``pending`` and
    never emitted; concatenating all emitted windows plus the pending events
    reproduces the input exactly.
    """

    def __init__(self, count: int, start_index: int = 0):
        if count < 1:
            raise ConfigError(f"window count must be >= 1, got {count}")
        self.count = count
        self._next_index = start_index
        self._pending = empty_events()
        self._consumed = 0
        self._last_t = -math.inf

    @property
    def pending(self) -> np.ndarray:
        return self._pending

    def push(self, events) -> list[EventWindow]:
        """Feed a batch of time-ordered events; return completed windows."""
        chunk = as_event_array(events)
        if chunk.shape[0] == 0:
            return []
        ts = chunk["t"]
        if ts[0] < self._last_t:
            raise OrderingError(
                f"event time {ts[0]} precedes previous event at {self._last_t}",
                self._consumed)
        if chunk.shape[0] > 1:
            steps = np.diff(ts)
            if (steps < 0).any():
                i = int(np.argmax(steps < 0)) + 1
                raise OrderingError(
                    f"event time {ts[i]} precedes previous event at {ts[i - 1]}",
                    self._consumed + i)
        self._last_t = float(ts[-1])
        self._consumed += chunk.shape[0]

        if self._pending.shape[0]:
            chunk = np.concatenate([self._pending, chunk])
        windows = []
        n = self.count
        full = chunk.shape[0] // n
        for w in range(full):
            body = chunk[w * n:(w + 1) * n].copy()
            body.flags.writeable = False
            windows.append(EventWindow(
                events=body,
                index=self._next_index,
                t_start=float(body["t"][0]),
                t_end=float(body["t"][-1]),
            ))
            self._next_index += 1
        self._pending = chunk[full * n:].copy()
        return windows


def window_by_count(events, cfg: Union[WindowConfig, int],
                    geometry: SensorGeometry | None = None) -> Iterator[EventWindow]:
    """Partition a stream (array or iterable of arrays) into exact-N windows."""
    if isinstance(cfg, WindowConfig):
        n = cfg.resolve_count(geometry)
    else:
        n = int(cfg)
    windower = CountWindower(n)
    if isinstance(events, np.ndarray):
        events = (events,)
    for chunk in events:
        yield from windower.push(chunk)


# ---------------------------------------------------------------------------
# Voxel-grid tensorization
# ---------------------------------------------------------------------------

def build_event_tensor(window: EventWindow, geometry: SensorGeometry,
                       bins: int = 5) -> EventTensor:
    """Accumulate a window into a (bins, height, width) voxel grid.

    Each event contributes polarity-signed unit mass, split linearly between
    the two temporal bins nearest to its normalized time; a zero-duration
    window puts all mass in bin 0.
    """
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    if len(window) == 0:
        raise ConfigError("cannot tensorize an empty window")
    ev = window.events
    validate_bounds(ev, geometry)
    grid = np.zeros((bins, geometry.height, geometry.width))
    _kernels.voxel_splat(ev["t"], ev["x"], ev["y"], ev["p"],
                         window.t_start, window.t_end, grid)
    grid.flags.writeable = False
    return EventTensor(grid=grid, window_index=window.index, t_end=window.t_end)
