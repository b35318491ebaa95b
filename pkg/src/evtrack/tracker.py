"""Asynchronous Kalman tracking on a 2-D double-integrator state.

State is [x, y, vx, vy].  Windows arrive at irregular timestamps t_k, so the
discrete transition is re-derived per step from the elapsed tau:

    F(tau) = [[1,0,tau,0],[0,1,0,tau],[0,0,1,0],[0,0,0,1]]
    G(tau) = [[tau^2/2,0],[0,tau^2/2],[tau,0],[0,tau]]

with process noise driven by a white acceleration disturbance of covariance
Q (2x2).  Estimates can be queried at any t ahead of the last processed
window by pure prediction; querying never mutates the filter.

The pipeline follows the window -> tensorize -> detect -> filter chain with
strict ordering by window index, optionally running the stages in separate
threads connected by bounded queues.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .detection import Measurement, MeasurementNoise, select_measurement
from .errors import (BridgeConnectionError, ConfigError, FilterError,
                     OrderingError, RangeError)
from .events import (EventWindow, SensorGeometry, WindowConfig,
                     build_event_tensor, window_by_count)

logger = logging.getLogger(__name__)

OBSERVATION_MATRIX = np.array([[1.0, 0.0, 0.0, 0.0],
                               [0.0, 1.0, 0.0, 0.0]])
OBSERVATION_MATRIX.flags.writeable = False

# 99% chi-square gate for a 2-dof innovation: -2 ln(0.01).
CHI2_GATE_99 = -2.0 * math.log(0.01)

# Refuse measurement updates whose innovation covariance is this badly
# conditioned; beyond it the gain is numerically meaningless.
MAX_INNOVATION_CONDITION = 1e12


def transition(tau: float):
    """Discrete transition pair (F, G) for an elapsed time tau >= 0."""
    if tau < 0:
        raise RangeError(f"transition requires tau >= 0, got {tau}")
    F = np.eye(4)
    F[0, 2] = tau
    F[1, 3] = tau
    half = 0.5 * tau * tau
    G = np.array([[half, 0.0],
                  [0.0, half],
                  [tau, 0.0],
                  [0.0, tau]])
    return F, G


@dataclass(frozen=True)
class MotionModel:
    """Process-noise description for the double integrator.

    ``form`` selects how Q enters the discrete step:

    * ``"sampled"``  — G(tau) Q G(tau)^T, the piecewise-constant-acceleration
      discretization (the default; matches the query-time covariance law).
    * ``"integrated"`` — the exact integral of the continuous white-noise
      model over the step (Van Loan blocks tau^3/3, tau^2/2, tau), which is
      additive across step splits.
    """

    Q: np.ndarray
    form: str = "sampled"

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=np.float64).reshape(2, 2)
        if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12):
            raise ConfigError("process noise Q must be symmetric")
        # PSD, not strictly PD: Q = 0 (pure constant-velocity prediction) is
        # a legitimate and useful degenerate model.
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ConfigError("process noise Q must be positive-semidefinite")
        if self.form not in ("sampled", "integrated"):
            raise ConfigError(f"unknown process-noise form {self.form!r}")
        Q.flags.writeable = False
        object.__setattr__(self, "Q", Q)

    @classmethod
    def isotropic(cls, q: float = 500.0, form: str = "sampled") -> "MotionModel":
        """q in px^2/s^4; default tuned on the simulator, not a derived value."""
        if q <= 0:
            raise ConfigError(f"q must be > 0, got {q}")
        return cls(Q=np.array([[q, 0.0], [0.0, q]]), form=form)

    def process_noise(self, tau: float) -> np.ndarray:
        if tau < 0:
            raise RangeError(f"process noise requires tau >= 0, got {tau}")
        Q = self.Q
        out = np.zeros((4, 4))
        if self.form == "sampled":
            pp = 0.25 * tau ** 4
            pv = 0.5 * tau ** 3
            vv = tau ** 2
        else:
            pp = tau ** 3 / 3.0
            pv = 0.5 * tau ** 2
            vv = tau
        out[:2, :2] = pp * Q
        out[:2, 2:] = pv * Q
        out[2:, :2] = pv * Q
        out[2:, 2:] = vv * Q
        return out


@dataclass(frozen=True)
class StateEstimate:
    """Filter state at time t: mean x (4,), covariance P (4,4), window k."""

    x: np.ndarray
    P: np.ndarray
    t: float
    k: Optional[int] = None
    updated: bool = False

    def __post_init__(self):
        try:
            x = np.asarray(self.x, dtype=np.float64).reshape(4)
            P = np.asarray(self.P, dtype=np.float64).reshape(4, 4)
        except ValueError:
            raise ConfigError(f"state needs x of shape (4,) and P of shape "
                              f"(4, 4)") from None
        if not np.allclose(P, P.T, rtol=0.0, atol=1e-8):
            raise FilterError("state covariance lost symmetry")
        P = 0.5 * (P + P.T)
        x.flags.writeable = False
        P.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", P)

    @property
    def position(self) -> np.ndarray:
        return self.x[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[2:]


def predict(state: StateEstimate, tau: float, model: MotionModel) -> StateEstimate:
    """Propagate mean and covariance forward by tau (>= 0)."""
    F, _ = transition(tau)
    x = F @ state.x
    P = F @ state.P @ F.T + model.process_noise(tau)
    return StateEstimate(x=x, P=P, t=state.t + tau, k=state.k, updated=False)


def update(state: StateEstimate, z: Measurement) -> StateEstimate:
    """Fold a position measurement taken at the state's own timestamp."""
    if abs(state.t - z.t) > 1e-9:
        raise FilterError(f"update at t={state.t} with measurement stamped "
                          f"t={z.t}; predict to the measurement time first")
    H = OBSERVATION_MATRIX
    S = H @ state.P @ H.T + z.R
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > MAX_INNOVATION_CONDITION:
        raise FilterError(f"innovation covariance is numerically singular "
                          f"(condition number {cond:.3e})")
    # L = P H^T S^-1, via a solve against the symmetric S.
    L = np.linalg.solve(S, H @ state.P).T
    innovation = z.z - H @ state.x
    x = state.x + L @ innovation
    P = (np.eye(4) - L @ H) @ state.P
    P = 0.5 * (P + P.T)
    return StateEstimate(x=x, P=P, t=state.t, k=state.k, updated=True)


def query(state: StateEstimate, t: float, model: MotionModel) -> StateEstimate:
    """Estimate at a later time t without touching the filter (no smoothing)."""
    if t < state.t:
        raise RangeError(f"cannot query t={t} before the estimate time "
                         f"{state.t}; smoothing is out of scope")
    return predict(state, t - state.t, model)


def mahalanobis_sq(state: StateEstimate, z: Measurement) -> float:
    """Squared Mahalanobis distance of the innovation at the predicted state."""
    H = OBSERVATION_MATRIX
    S = H @ state.P @ H.T + z.R
    d = z.z - H @ state.x
    return float(d @ np.linalg.solve(S, d))


class KalmanTracker:
    """Sequential owner of the filter state; one step per event window."""

    def __init__(self, model: MotionModel, init: StateEstimate):
        self.model = model
        self.state = init

    def step(self, t_k: float, k: int, measurement: Optional[Measurement]) -> StateEstimate:
        """Advance to window k at time t_k, folding the measurement if any."""
        if t_k < self.state.t:
            raise OrderingError(
                f"window time {t_k} precedes filter time {self.state.t}", k)
        s = predict(self.state, t_k - self.state.t, self.model)
        if measurement is not None:
            s = update(s, measurement)
        s = dataclasses.replace(s, k=k)
        self.state = s
        return s

    def query(self, t: float) -> StateEstimate:
        return query(self.state, t, self.model)


# ---------------------------------------------------------------------------
# Initialization policies
# ---------------------------------------------------------------------------

def fixed_prior(geometry: SensorGeometry, horizon: float,
                t0: float = 0.0) -> StateEstimate:
    """Diffuse frame-covering prior: center position, zero velocity."""
    if horizon <= 0:
        raise ConfigError(f"horizon must be > 0, got {horizon}")
    W, Hh = float(geometry.width), float(geometry.height)
    x0 = np.array([0.5 * W, 0.5 * Hh, 0.0, 0.0])
    P0 = np.diag([W ** 2, Hh ** 2, (W / horizon) ** 2, (Hh / horizon) ** 2])
    return StateEstimate(x=x0, P=P0, t=t0)


def measurement_prior(z: Measurement, velocity_std: float) -> StateEstimate:
    """Start at the first accepted measurement with unknown velocity."""
    if velocity_std <= 0:
        raise ConfigError(f"velocity std must be > 0, got {velocity_std}")
    x0 = np.array([z.z[0], z.z[1], 0.0, 0.0])
    P0 = np.zeros((4, 4))
    P0[:2, :2] = z.R
    P0[2, 2] = velocity_std ** 2
    P0[3, 3] = velocity_std ** 2
    return StateEstimate(x=x0, P=P0, t=z.t, updated=True)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Everything run_pipeline needs besides the data and the detector."""

    window: WindowConfig
    noise: MeasurementNoise = MeasurementNoise()
    target_class: int = 0
    init: str = "measurement"  # or "fixed"
    velocity_std: Optional[float] = None  # measurement init; default max(W,H)/s
    horizon: Optional[float] = None       # fixed init prior scale, seconds
    gate: Optional[float] = None          # Mahalanobis^2 accept threshold
    latency: float = 0.0                  # availability delay of each estimate
    tensorize: bool = True
    threaded: bool = False
    queue_size: int = 8

    def __post_init__(self):
        if self.init not in ("measurement", "fixed"):
            raise ConfigError(f"unknown init policy {self.init!r}")
        if self.latency < 0:
            raise ConfigError(f"latency must be >= 0, got {self.latency}")
        if self.gate is not None and self.gate <= 0:
            raise ConfigError(f"gate threshold must be > 0, got {self.gate}")
        if self.queue_size < 1:
            raise ConfigError(f"queue size must be >= 1, got {self.queue_size}")


@dataclass
class PipelineResult:
    """Estimates at every processed window plus a latency-aware query handle."""

    estimates: list
    model: MotionModel
    latency: float
    windows: int = 0
    accepted: int = 0
    missed: int = 0
    gated: int = 0
    events: int = 0
    mean_dt: float = math.nan
    timings: dict = dataclasses.field(default_factory=dict)
    # One (window index, t_end, detections) triple per processed window.
    detections: list = dataclasses.field(default_factory=list)

    def query(self, t: float) -> StateEstimate:
        """Estimate valid at time t using only estimates available by then.

        An estimate computed at t_k becomes available at t_k + latency; the
        freshest available one is propagated to t by pure prediction.
        """
        usable = None
        for est in self.estimates:
            if est.t + self.latency <= t:
                usable = est
            else:
                break
        if usable is None:
            raise RangeError(f"no estimate available by t={t} "
                             f"(latency {self.latency})")
        return query(usable, t, self.model)

    @property
    def final(self) -> StateEstimate:
        if not self.estimates:
            raise RangeError("pipeline produced no estimates")
        return self.estimates[-1]


class _StageTimer:
    def __init__(self):
        self.total = 0.0

    def add(self, dt: float):
        self.total += dt


def _iter_windows(events, cfg: PipelineConfig, geometry: SensorGeometry):
    yield from window_by_count(events, cfg.window, geometry)


def run_pipeline(events, geometry: SensorGeometry, detector,
                 model: MotionModel, cfg: PipelineConfig) -> PipelineResult:
    """Window the stream, detect per window, and filter in window order.

    ``detector`` exposes ``detect(window) -> list[Detection]``; transport
    failures from bridge-backed detectors are logged and treated as missed
    detections, protocol violations propagate.
    """
    result = PipelineResult(estimates=[], model=model, latency=cfg.latency)
    timers = {"window": _StageTimer(), "detect": _StageTimer(),
              "filter": _StageTimer()}

    if cfg.threaded:
        pairs = _detect_stage_threaded(events, cfg, geometry, detector, timers)
    else:
        pairs = _detect_stage_serial(events, cfg, geometry, detector, timers)

    tracker: Optional[KalmanTracker] = None
    velocity_std = cfg.velocity_std
    if velocity_std is None:
        velocity_std = float(max(geometry.width, geometry.height))
    last_t = None
    dt_sum = 0.0
    dt_count = 0

    for window, detections in pairs:
        t0 = time.perf_counter()
        result.windows += 1
        result.events += len(window)
        result.detections.append((window.index, window.t_end, detections))
        if last_t is not None:
            dt_sum += window.t_end - last_t
            dt_count += 1
        last_t = window.t_end

        outcome = select_measurement(detections, cfg.target_class, cfg.noise)
        if tracker is None and cfg.init == "fixed":
            if cfg.horizon is None:
                raise ConfigError("fixed init policy needs a horizon")
            tracker = KalmanTracker(
                model, fixed_prior(geometry, cfg.horizon, t0=window.t_start))
        if tracker is None:
            # Measurement-init policy: stay dormant until the first detection.
            if outcome is None:
                result.missed += 1
            else:
                state = measurement_prior(outcome, velocity_std)
                state = dataclasses.replace(state, k=window.index)
                tracker = KalmanTracker(model, state)
                result.estimates.append(state)
                result.accepted += 1
        else:
            gated_here = False
            if outcome is not None and cfg.gate is not None:
                predicted = predict(tracker.state, window.t_end - tracker.state.t,
                                    model)
                if mahalanobis_sq(predicted, outcome) > cfg.gate:
                    result.gated += 1
                    gated_here = True
                    outcome = None
            est = tracker.step(window.t_end, window.index, outcome)
            result.estimates.append(est)
            if outcome is not None:
                result.accepted += 1
            elif not gated_here:
                result.missed += 1
        timers["filter"].add(time.perf_counter() - t0)

    if dt_count:
        result.mean_dt = dt_sum / dt_count
    result.timings = {name: timer.total for name, timer in timers.items()}
    return result


def _detect_one(window: EventWindow, cfg: PipelineConfig,
                geometry: SensorGeometry, detector) -> list:
    if cfg.tensorize:
        build_event_tensor(window, geometry, bins=cfg.window.bins)
    try:
        return detector.detect(window)
    except BridgeConnectionError as exc:
        logger.warning("detector transport failure on window %d: %s",
                       window.index, exc)
        return []


def _detect_stage_serial(events, cfg, geometry, detector, timers):
    for window in _iter_windows_timed(events, cfg, geometry, timers["window"]):
        t0 = time.perf_counter()
        detections = _detect_one(window, cfg, geometry, detector)
        timers["detect"].add(time.perf_counter() - t0)
        yield window, detections


def _iter_windows_timed(events, cfg, geometry, timer):
    it = _iter_windows(events, cfg, geometry)
    while True:
        t0 = time.perf_counter()
        try:
            window = next(it)
        except StopIteration:
            timer.add(time.perf_counter() - t0)
            return
        timer.add(time.perf_counter() - t0)
        yield window


_SENTINEL = object()


def _detect_stage_threaded(events, cfg, geometry, detector, timers):
    """Windowing and detection in worker threads, filter in the caller.

    Single worker per stage and FIFO queues keep window order end to end;
    the bounded queues apply backpressure instead of buffering the stream.
    """
    win_q: "queue.Queue" = queue.Queue(maxsize=cfg.queue_size)
    det_q: "queue.Queue" = queue.Queue(maxsize=cfg.queue_size)

    def windower():
        try:
            for window in _iter_windows_timed(events, cfg, geometry,
                                              timers["window"]):
                win_q.put(window)
            win_q.put(_SENTINEL)
        except BaseException as exc:  # propagate to the consumer
            win_q.put(exc)

    def detect_worker():
        while True:
            item = win_q.get()
            if item is _SENTINEL:
                det_q.put(_SENTINEL)
                return
            if isinstance(item, BaseException):
                det_q.put(item)
                return
            t0 = time.perf_counter()
            try:
                detections = _detect_one(item, cfg, geometry, detector)
            except BaseException as exc:
                det_q.put(exc)
                return
            timers["detect"].add(time.perf_counter() - t0)
            det_q.put((item, detections))

    threads = [threading.Thread(target=windower, daemon=True),
               threading.Thread(target=detect_worker, daemon=True)]
    for th in threads:
        th.start()
    try:
        while True:
            item = det_q.get()
            if item is _SENTINEL:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        for th in threads:
            th.join(timeout=5.0)
