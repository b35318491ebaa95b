"""Synthetic event-camera scenes with analytic groundtruth.

A scene is a soft-edged disk of positive contrast moving over an optional
drifting background texture.  Each pixel integrates log-intensity and emits
one polarity-signed event per full contrast-threshold crossing relative to
its per-pixel reference level (hysteresis reset, no refractory period).
Log intensity is rendered at integer pixel coordinates on an internal
supersampled clock; event timestamps are interpolated linearly inside each
render step.

All randomness (background noise events) comes from per-pixel substreams of
the portable generator in :mod:`evtrack.rng`, so identical configs produce
bit-identical streams on every platform.

Groundtruth CSV format: header ``t,cx,cy,xmin,ymin,xmax,ymax``, one sample
per line, floats in full round-trip precision.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from . import _kernels, rng
from .errors import ConfigError, ParseError, RangeError
from .events import SensorGeometry, empty_events, events_array

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiskTarget:
    """Disk of radius `radius` px whose intensity is (1 + contrast) x background.

    The rim ramps linearly over `edge_width` px so threshold crossings happen
    at well-defined sub-step times.
    """

    radius: float
    contrast: float = 1.0
    edge_width: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError(f"target radius must be > 0, got {self.radius}")
        if not 0.0 < self.contrast <= 1.0:
            raise ConfigError(f"target contrast must be in (0, 1], got {self.contrast}")
        if self.edge_width <= 0:
            raise ConfigError(f"edge width must be > 0, got {self.edge_width}")


@dataclass(frozen=True)
class ConstantVelocity:
    x0: float
    y0: float
    vx: float
    vy: float

    def position(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.x0 + self.vx * t, self.y0 + self.vy * t


@dataclass(frozen=True)
class Sinusoidal:
    """Lissajous-style oscillation around a fixed center."""

    cx: float
    cy: float
    amp_x: float
    amp_y: float
    freq_x: float
    freq_y: float
    phase_x: float = 0.0
    phase_y: float = 0.0

    def position(self, t):
        t = np.asarray(t, dtype=np.float64)
        x = self.cx + self.amp_x * np.sin(TWO_PI * self.freq_x * t + self.phase_x)
        y = self.cy + self.amp_y * np.sin(TWO_PI * self.freq_y * t + self.phase_y)
        return x, y


@dataclass(frozen=True)
class Waypoints:
    """Piecewise-linear trajectory through (t, x, y) knots."""

    times: Tuple[float, ...]
    xs: Tuple[float, ...]
    ys: Tuple[float, ...]

    def __post_init__(self):
        if not (len(self.times) == len(self.xs) == len(self.ys)):
            raise ConfigError("waypoint arrays must have equal length")
        if len(self.times) < 2:
            raise ConfigError("need at least two waypoints")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigError("waypoint times must be strictly increasing")

    def position(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (np.interp(t, self.times, self.xs),
                np.interp(t, self.times, self.ys))


Motion = Union[ConstantVelocity, Sinusoidal, Waypoints]


@dataclass(frozen=True)
class DriftingTexture:
    """Sinusoidal background pattern translating at constant velocity.

    Emulates ego-motion clutter: every pixel sees periodic log-intensity
    modulation of the given amplitude (must stay < 1 to keep intensity
    positive) and spatial period in px.
    """

    amplitude: float
    period: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.amplitude < 1.0:
            raise ConfigError(f"texture amplitude must be in (0, 1), got {self.amplitude}")
        if self.period <= 0:
            raise ConfigError(f"texture period must be > 0, got {self.period}")


@dataclass(frozen=True)
class SceneConfig:
    geometry: SensorGeometry
    duration: float
    target: DiskTarget
    motion: Motion
    background: DriftingTexture | None = None
    contrast_threshold: float = 0.15
    noise_rate: float = 0.0
    seed: int = 0
    render_rate: float = 10000.0
    groundtruth_rate: float = 1000.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError(f"duration must be > 0, got {self.duration}")
        if self.contrast_threshold <= 0:
            raise ConfigError(f"contrast threshold must be > 0, "
                              f"got {self.contrast_threshold}")
        if self.noise_rate < 0:
            raise ConfigError(f"noise rate must be >= 0, got {self.noise_rate}")
        if self.render_rate <= 0 or self.groundtruth_rate <= 0:
            raise ConfigError("render and groundtruth rates must be > 0")
        if isinstance(self.motion, Waypoints):
            if self.motion.times[0] > 0 or self.motion.times[-1] < self.duration:
                raise ConfigError("waypoints must cover [0, duration]")


# ---------------------------------------------------------------------------
# Groundtruth
# ---------------------------------------------------------------------------

_GT_HEADER = "t,cx,cy,xmin,ymin,xmax,ymax"


@dataclass(frozen=True)
class GroundTruth:
    """Time-ordered (t, center, bbox) samples of the true target track."""

    t: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    xmin: np.ndarray
    ymin: np.ndarray
    xmax: np.ndarray
    ymax: np.ndarray
    clipped: bool = False

    def __post_init__(self):
        n = self.t.shape[0]
        for name in ("cx", "cy", "xmin", "ymin", "xmax", "ymax"):
            if getattr(self, name).shape[0] != n:
                raise ConfigError("groundtruth arrays must have equal length")
        if n == 0:
            raise ConfigError("groundtruth must contain at least one sample")
        if n > 1 and not (np.diff(self.t) > 0).all():
            raise ConfigError("groundtruth times must be strictly increasing")
        inside = ((self.xmin <= self.cx) & (self.cx <= self.xmax)
                  & (self.ymin <= self.cy) & (self.cy <= self.ymax))
        if not inside.all():
            raise ConfigError("groundtruth bbox must contain its center")
        for name in ("t", "cx", "cy", "xmin", "ymin", "xmax", "ymax"):
            getattr(self, name).flags.writeable = False

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def _check_range(self, t) -> None:
        t = np.asarray(t, dtype=np.float64)
        if t.size and (t.min() < self.t[0] or t.max() > self.t[-1]):
            raise RangeError(
                f"groundtruth query at t={float(t.min())}..{float(t.max())} outside "
                f"[{self.t_start}, {self.t_end}]; refusing to extrapolate")

    def center_at(self, t):
        """Linearly interpolated center; raises RangeError outside coverage."""
        self._check_range(t)
        return np.interp(t, self.t, self.cx), np.interp(t, self.t, self.cy)

    def bbox_at(self, t):
        self._check_range(t)
        return (np.interp(t, self.t, self.xmin), np.interp(t, self.t, self.ymin),
                np.interp(t, self.t, self.xmax), np.interp(t, self.t, self.ymax))

    def write_csv(self, target) -> None:
        lines = [_GT_HEADER + "\n"]
        for i in range(len(self)):
            lines.append(",".join(repr(float(a[i])) for a in
                                  (self.t, self.cx, self.cy, self.xmin,
                                   self.ymin, self.xmax, self.ymax)) + "\n")
        data = "".join(lines)
        if hasattr(target, "write"):
            target.write(data)
        else:
            with open(target, "w") as fh:
                fh.write(data)

    @classmethod
    def read_csv(cls, source) -> "GroundTruth":
        if hasattr(source, "read"):
            text = source.read()
        else:
            with open(source) as fh:
                text = fh.read()
        offset = 0
        rows = []
        for lineno, line in enumerate(text.split("\n")):
            start = offset
            offset += len(line) + 1
            stripped = line.strip()
            if not stripped:
                continue
            if lineno == 0:
                if stripped != _GT_HEADER:
                    raise ParseError(f"expected groundtruth header "
                                     f"{_GT_HEADER!r}, got {stripped!r}", start)
                continue
            parts = stripped.split(",")
            if len(parts) != 7:
                raise ParseError(f"expected 7 fields, got {len(parts)}", start)
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"bad groundtruth field: {exc}", start) from None
        if not rows:
            raise ParseError("groundtruth file has no samples", 0)
        cols = np.asarray(rows, dtype=np.float64).T
        return cls(t=cols[0], cx=cols[1], cy=cols[2], xmin=cols[3],
                   ymin=cols[4], xmax=cols[5], ymax=cols[6])


def groundtruth_center(gt: GroundTruth, t: float):
    """Interpolated true center at time t (exact at sample times)."""
    return gt.center_at(t)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _render_block(cfg: SceneConfig, t: float, x_lo: int, x_hi: int,
                  y_lo: int, y_hi: int) -> np.ndarray:
    """Log intensity of pixel block [y_lo:y_hi, x_lo:x_hi] at time t.

    Sampled at integer pixel coordinates.  All transcendental math lives
    here, shared by both kernel backends, so event streams are bit-identical
    regardless of acceleration.
    """
    xs = np.arange(x_lo, x_hi, dtype=np.float64)
    ys = np.arange(y_lo, y_hi, dtype=np.float64)
    tgt = cfg.target
    cx, cy = cfg.motion.position(t)
    dist = np.hypot(xs[None, :] - float(cx), ys[:, None] - float(cy))
    half = 0.5 * tgt.edge_width
    cov = np.clip((tgt.radius + half - dist) / tgt.edge_width, 0.0, 1.0)
    log_i = np.log1p(tgt.contrast * cov)
    bg = cfg.background
    if bg is not None:
        wave = (np.sin(TWO_PI * (xs[None, :] - bg.vx * t) / bg.period)
                * np.sin(TWO_PI * (ys[:, None] - bg.vy * t) / bg.period))
        log_i = log_i + np.log1p(bg.amplitude * wave)
    return log_i


def _active_box(cfg: SceneConfig, t0: float, t1: float):
    """Pixel block that can change between t0 and t1 (target-only scenes)."""
    x0, y0 = cfg.motion.position(t0)
    x1, y1 = cfg.motion.position(t1)
    reach = cfg.target.radius + 0.5 * cfg.target.edge_width + 1.0
    lo_x = int(math.floor(min(float(x0), float(x1)) - reach))
    hi_x = int(math.ceil(max(float(x0), float(x1)) + reach)) + 1
    lo_y = int(math.floor(min(float(y0), float(y1)) - reach))
    hi_y = int(math.ceil(max(float(y0), float(y1)) + reach)) + 1
    geom = cfg.geometry
    lo_x = max(lo_x, 0)
    lo_y = max(lo_y, 0)
    hi_x = min(hi_x, geom.width)
    hi_y = min(hi_y, geom.height)
    return lo_x, hi_x, lo_y, hi_y


# ---------------------------------------------------------------------------
# Background noise events
# ---------------------------------------------------------------------------

def _noise_events(cfg: SceneConfig) -> np.ndarray:
    """Homogeneous per-pixel Poisson events with random polarity.

    Each pixel owns the substream keyed by its row-major index, so the
    result does not depend on evaluation order.  Per pixel the draw order
    is: count (one uniform per trial), then one uniform per event time,
    then one uniform per polarity (< 0.5 maps to +1).
    """
    lam = cfg.noise_rate * cfg.duration
    if lam == 0.0:
        return empty_events()
    geom = cfg.geometry
    n_pix = geom.pixel_count
    states = rng.derive_states(cfg.seed, np.arange(n_pix, dtype=np.uint64))

    floor_p = math.exp(-lam)
    prod = np.ones(n_pix)
    counts = np.zeros(n_pix, dtype=np.int64)
    active = np.arange(n_pix)
    while active.size:
        sub = states[active]
        u = rng.next_unit_array(sub)
        states[active] = sub
        prod[active] *= u
        counts[active] += 1
        active = active[prod[active] > floor_p]
    counts -= 1

    total = int(counts.sum())
    if total == 0:
        return empty_events()
    starts = np.cumsum(counts) - counts
    times = np.empty(total)
    pols = np.empty(total, dtype=np.int8)
    for j in range(int(counts.max())):
        idx = np.nonzero(counts > j)[0]
        sub = states[idx]
        u = rng.next_unit_array(sub)
        states[idx] = sub
        times[starts[idx] + j] = u * cfg.duration
    for j in range(int(counts.max())):
        idx = np.nonzero(counts > j)[0]
        sub = states[idx]
        u = rng.next_unit_array(sub)
        states[idx] = sub
        pols[starts[idx] + j] = np.where(u < 0.5, 1, -1)

    pix = np.repeat(np.arange(n_pix), counts)
    return events_array(times, pix % geom.width, pix // geom.width, pols)


# ---------------------------------------------------------------------------
# Main entry point
# ---------------------------------------------------------------------------

def simulate_scene(cfg: SceneConfig):
    """Render the scene and return (events, groundtruth).

    Events are a packed record array sorted by time (ties stable by pixel
    scan order), with strictly increasing timestamps per pixel.
    """
    geom = cfg.geometry
    n_steps = max(1, int(round(cfg.duration * cfg.render_rate)))
    step_times = np.linspace(0.0, cfg.duration, n_steps + 1)

    l_prev = _render_block(cfg, 0.0, 0, geom.width, 0, geom.height)
    ref = l_prev.copy()
    threshold = cfg.contrast_threshold

    chunks = []
    for i in range(1, n_steps + 1):
        t0 = float(step_times[i - 1])
        t1 = float(step_times[i])
        if cfg.background is None:
            lo_x, hi_x, lo_y, hi_y = _active_box(cfg, t0, t1)
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            l_new = _render_block(cfg, t1, lo_x, hi_x, lo_y, hi_y)
            out = _kernels.crossing_events(
                l_new, l_prev[lo_y:hi_y, lo_x:hi_x], ref[lo_y:hi_y, lo_x:hi_x],
                threshold, lo_x, lo_y, t0, t1)
        else:
            l_new = _render_block(cfg, t1, 0, geom.width, 0, geom.height)
            out = _kernels.crossing_events(l_new, l_prev, ref, threshold,
                                           0, 0, t0, t1)
        if out[0].shape[0]:
            chunks.append(events_array(*out))

    noise = _noise_events(cfg)
    if noise.shape[0]:
        chunks.append(noise)
    events = np.concatenate(chunks) if chunks else empty_events()

    if events.shape[0]:
        order = np.argsort(events["t"], kind="stable")
        events = events[order]
        _enforce_pixel_monotonicity(events, geom)
        order = np.argsort(events["t"], kind="stable")
        events = events[order]

    gt = _build_groundtruth(cfg)
    return events, gt


def _enforce_pixel_monotonicity(events: np.ndarray, geom: SensorGeometry) -> None:
    """Bump duplicate per-pixel timestamps to the next representable float.

    Crossing interpolation can clamp several events of one pixel to the same
    instant (e.g. a step boundary); the sensor contract is strictly
    increasing times per pixel.  Mutates ``events['t']`` in place; callers
    re-sort afterwards, which keeps global order while equal-time events of
    one pixel stay in emission order.
    """
    pix = events["y"].astype(np.int64) * geom.width + events["x"].astype(np.int64)
    ts = events["t"]
    last = np.full(geom.pixel_count, -np.inf)
    for i in range(ts.shape[0]):
        p = pix[i]
        t = ts[i]
        if t <= last[p]:
            t = np.nextafter(last[p], np.inf)
            ts[i] = t
        last[p] = t


def _build_groundtruth(cfg: SceneConfig) -> GroundTruth:
    n = max(1, int(round(cfg.duration * cfg.groundtruth_rate)))
    t = np.linspace(0.0, cfg.duration, n + 1)
    cx, cy = cfg.motion.position(t)
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    r = cfg.target.radius
    geom = cfg.geometry
    clipped = bool(((cx - r < 0) | (cx + r > geom.width - 1)
                    | (cy - r < 0) | (cy + r > geom.height - 1)).any())
    if clipped:
        logger.warning("target leaves the %dx%d frame during [0, %g]; "
                       "groundtruth marked as clipped",
                       geom.width, geom.height, cfg.duration)
    return GroundTruth(t=t, cx=cx, cy=cy,
                       xmin=cx - r, ymin=cy - r, xmax=cx + r, ymax=cy + r,
                       clipped=clipped)


# ---------------------------------------------------------------------------
# JSON config
# ---------------------------------------------------------------------------

_MOTION_KINDS = {
    "constant_velocity": (ConstantVelocity, ("x0", "y0", "vx", "vy")),
    "sinusoidal": (Sinusoidal, ("cx", "cy", "amp_x", "amp_y", "freq_x",
                                "freq_y", "phase_x", "phase_y")),
    "waypoints": (Waypoints, ("times", "xs", "ys")),
}


def _take(d: dict, cls, fields: Sequence[str], label: str):
    unknown = set(d) - set(fields) - {"kind"}
    if unknown:
        raise ConfigError(f"unknown {label} keys: {sorted(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v)
              for k, v in d.items() if k != "kind"}
    return cls(**kwargs)


def scene_from_dict(d: dict) -> SceneConfig:
    """Build a SceneConfig from a parsed JSON object (schema in README)."""
    known = {"geometry", "duration", "target", "motion", "background",
             "contrast_threshold", "noise_rate", "seed", "render_rate",
             "groundtruth_rate"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
    for key in ("geometry", "duration", "target", "motion"):
        if key not in d:
            raise ConfigError(f"scene config missing {key!r}")
    geom = d["geometry"]
    if not isinstance(geom, dict) or set(geom) != {"width", "height"}:
        raise ConfigError("geometry must be {\"width\": ..., \"height\": ...}")
    motion_spec = d["motion"]
    kind = motion_spec.get("kind")
    if kind not in _MOTION_KINDS:
        raise ConfigError(f"unknown motion kind {kind!r}; expected one of "
                          f"{sorted(_MOTION_KINDS)}")
    cls, fields = _MOTION_KINDS[kind]
    motion = _take(motion_spec, cls, fields, f"motion[{kind}]")
    target = _take(d["target"], DiskTarget, ("radius", "contrast", "edge_width"),
                   "target")
    background = None
    if d.get("background") is not None:
        background = _take(d["background"], DriftingTexture,
                           ("amplitude", "period", "vx", "vy"), "background")
    return SceneConfig(
        geometry=SensorGeometry(int(geom["width"]), int(geom["height"])),
        duration=float(d["duration"]),
        target=target,
        motion=motion,
        background=background,
        contrast_threshold=float(d.get("contrast_threshold", 0.15)),
        noise_rate=float(d.get("noise_rate", 0.0)),
        seed=int(d.get("seed", 0)),
        render_rate=float(d.get("render_rate", 10000.0)),
        groundtruth_rate=float(d.get("groundtruth_rate", 1000.0)),
    )


def load_scene_config(path) -> SceneConfig:
    if hasattr(path, "read"):
        raw = path.read()
    else:
        with open(path) as fh:
            raw = fh.read()
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scene config is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("scene config must be a JSON object")
    return scene_from_dict(d)
