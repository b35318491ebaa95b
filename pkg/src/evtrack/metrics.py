"""Evaluation metrics for asynchronous trackers.

Two error integrals over an evaluation window [T_s, T_f]:

* ``error_cov`` — sqrt of the time-averaged covariance trace.  Between
  filter records the covariance follows the prediction law
  P(t_k + tau) = F P_k F^T + G Q G^T, whose trace is a polynomial in tau
  (degree 4 for the sampled noise form, 3 for the integrated form), so each
  segment integrates in closed form.
* ``error_gt`` — sqrt of the time-averaged squared distance between the
  predicted position and the interpolated groundtruth center.  Both
  positions are piecewise linear in t, making the integrand piecewise
  quadratic; 5-point Gauss-Legendre per breakpoint segment is exact.

Detection quality uses single-target frame bookkeeping: per frame at most
one true positive (best IoU above threshold), remaining detections are
false positives, and each groundtruth-present frame without a true positive
counts one false negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .detection import Detection
from .errors import ConfigError, RangeError, UndefinedMetricError
from .simulate import GroundTruth
from .tracker import MotionModel, StateEstimate, transition

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


@dataclass(frozen=True)
class EvalWindow:
    """Evaluation interval [t_s, t_f], 0 <= t_s <= t_f."""

    t_s: float
    t_f: float

    def __post_init__(self):
        if not 0.0 <= self.t_s <= self.t_f:
            raise ConfigError(f"need 0 <= t_s <= t_f, got "
                              f"[{self.t_s}, {self.t_f}]")

    @property
    def length(self) -> float:
        return self.t_f - self.t_s


class EstimateTrace:
    """Time-ordered filter records plus the model to predict between them.

    The estimate at any t >= t_k follows the prediction law from the latest
    record at or before t; queries before the first record raise
    :class:`RangeError`, queries after the last record extrapolate (that is
    exactly what an asynchronous consumer would see).
    """

    def __init__(self, t: np.ndarray, x: np.ndarray, P: np.ndarray,
                 model: MotionModel):
        t = np.asarray(t, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        P = np.asarray(P, dtype=np.float64)
        if t.ndim != 1 or t.shape[0] == 0:
            raise ConfigError("trace needs at least one record")
        if x.shape != (t.shape[0], 4) or P.shape != (t.shape[0], 4, 4):
            raise ConfigError(f"trace shapes inconsistent: t {t.shape}, "
                              f"x {x.shape}, P {P.shape}")
        if t.shape[0] > 1 and not (np.diff(t) > 0).all():
            raise ConfigError("trace times must be strictly increasing")
        self.t = t
        self.x = x
        self.P = P
        self.model = model

    @classmethod
    def from_estimates(cls, estimates: Sequence[StateEstimate],
                       model: MotionModel) -> "EstimateTrace":
        """Build from filter output; ties on t keep the last (freshest) record."""
        if not estimates:
            raise ConfigError("trace needs at least one record")
        keep: List[StateEstimate] = []
        for est in estimates:
            if keep and est.t < keep[-1].t:
                raise ConfigError("estimates must be time-ordered")
            if keep and est.t == keep[-1].t:
                keep[-1] = est
            else:
                keep.append(est)
        t = np.array([e.t for e in keep])
        x = np.stack([e.x for e in keep])
        P = np.stack([e.P for e in keep])
        return cls(t, x, P, model)

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def _segment_of(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if t.size and t.min() < self.t[0] - 1e-12:
            raise RangeError(f"trace starts at {self.t[0]}, cannot evaluate "
                             f"at {float(t.min())}")
        return np.clip(np.searchsorted(self.t, t, side="right") - 1,
                       0, self.t.shape[0] - 1)

    def positions_at(self, t) -> np.ndarray:
        """Predicted positions (n, 2); piecewise linear between records."""
        t = np.asarray(t, dtype=np.float64)
        idx = self._segment_of(t)
        tau = t - self.t[idx]
        return self.x[idx, :2] + tau[..., None] * self.x[idx, 2:]

    def state_at(self, t: float) -> StateEstimate:
        """Full predicted state (mean and covariance) at a single time."""
        idx = int(self._segment_of(float(t)))
        tau = float(t) - float(self.t[idx])
        F, _ = transition(tau)
        x = F @ self.x[idx]
        P = F @ self.P[idx] @ F.T + self.model.process_noise(tau)
        return StateEstimate(x=x, P=P, t=float(t), k=None)


def _segments(trace: EstimateTrace, w: EvalWindow,
              extra: np.ndarray | None = None):
    """Breakpoint segments covering [t_s, t_f] with their owning record."""
    if w.t_s < trace.t[0] - 1e-12:
        raise RangeError(f"trace starts at {trace.t[0]} but the evaluation "
                         f"window opens at {w.t_s}")
    cuts = [np.array([w.t_s, w.t_f])]
    inner = trace.t[(trace.t > w.t_s) & (trace.t < w.t_f)]
    cuts.append(inner)
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float64)
        cuts.append(extra[(extra > w.t_s) & (extra < w.t_f)])
    bounds = np.unique(np.concatenate(cuts))
    starts = bounds[:-1]
    ends = bounds[1:]
    owners = np.clip(np.searchsorted(trace.t, starts, side="right") - 1,
                     0, len(trace) - 1)
    return starts, ends, owners


def error_cov(trace: EstimateTrace, w: EvalWindow) -> float:
    """Time-averaged RMS of the covariance trace over [t_s, t_f].

    Exact closed form: per segment, with tau measured from the owning
    record, tr P(tau) = trP + 2(P02+P13) tau + (P22+P33) tau^2 plus the
    noise term trQ (tau^4/4 + tau^2) for the sampled form or
    trQ (tau^3/3 + tau) for the integrated form.
    """
    if w.length <= 0:
        raise UndefinedMetricError("evaluation window has zero length")
    starts, ends, owners = _segments(trace, w)
    trQ = float(np.trace(trace.model.Q))
    sampled = trace.model.form == "sampled"
    total = 0.0
    for s, e, k in zip(starts, ends, owners):
        P = trace.P[k]
        t_k = trace.t[k]
        a = float(s - t_k)
        b = float(e - t_k)
        c0 = float(np.trace(P))
        c1 = 2.0 * float(P[0, 2] + P[1, 3])
        c2 = float(P[2, 2] + P[3, 3])
        if sampled:
            c2 += trQ
            c3 = 0.0
            c4 = 0.25 * trQ
        else:
            c1 += trQ
            c3 = trQ / 3.0
            c4 = 0.0
        total += (c0 * (b - a)
                  + c1 * (b ** 2 - a ** 2) / 2.0
                  + c2 * (b ** 3 - a ** 3) / 3.0
                  + c3 * (b ** 4 - a ** 4) / 4.0
                  + c4 * (b ** 5 - a ** 5) / 5.0)
    return math.sqrt(total / w.length)


def error_gt(trace: EstimateTrace, gt: GroundTruth, w: EvalWindow) -> float:
    """Time-averaged RMS distance to the interpolated groundtruth center."""
    if w.length <= 0:
        raise UndefinedMetricError("evaluation window has zero length")
    if w.t_s < gt.t_start - 1e-12 or w.t_f > gt.t_end + 1e-12:
        raise RangeError(f"groundtruth covers [{gt.t_start}, {gt.t_end}], "
                         f"evaluation window is [{w.t_s}, {w.t_f}]")
    starts, ends, owners = _segments(trace, w, extra=gt.t)
    mid = 0.5 * (starts + ends)
    half = 0.5 * (ends - starts)
    ts = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    wts = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    est = trace.positions_at(ts)
    gx = np.interp(ts, gt.t, gt.cx)
    gy = np.interp(ts, gt.t, gt.cy)
    sq = (est[:, 0] - gx) ** 2 + (est[:, 1] - gy) ** 2
    total = float(np.dot(wts, sq))
    return math.sqrt(total / w.length)


# ---------------------------------------------------------------------------
# Detection quality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError(f"degenerate box ({self.x_min}, {self.y_min}, "
                              f"{self.x_max}, {self.y_max})")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def _as_box(b) -> BBox:
    if isinstance(b, BBox):
        return b
    if isinstance(b, Detection):
        return BBox(*b.bbox)
    return BBox(*b)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    a = _as_box(a)
    b = _as_box(b)
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


class FrameEval(NamedTuple):
    """One evaluated frame: its time, the true box if the target is present,
    and every detection reported for the frame."""

    t: float
    gt_box: Optional[BBox]
    detections: List[Detection]


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def precision_recall_frames(frames: Sequence[FrameEval], target_class: int,
                            iou_thresh: float = 0.5) -> PrecisionRecall:
    """Frame-level single-target matching.

    Per frame: the best-IoU same-class detection above the threshold is the
    one true positive; every other detection is a false positive; a frame
    with the target present and no true positive adds one false negative.
    Raises :class:`UndefinedMetricError` when a ratio has no denominator.
    """
    if not frames:
        raise UndefinedMetricError("no frames to evaluate")
    tp = fp = fn = 0
    for frame in frames:
        candidates = [d for d in frame.detections if d.class_id == target_class]
        fp += sum(1 for d in frame.detections if d.class_id != target_class)
        if frame.gt_box is None:
            fp += len(candidates)
            continue
        best = None
        best_iou = iou_thresh
        for d in candidates:
            v = iou(d, frame.gt_box)
            if v > best_iou:
                best = d
                best_iou = v
        if best is None:
            fn += 1
            fp += len(candidates)
        else:
            tp += 1
            fp += len(candidates) - 1
    if tp + fp == 0:
        raise UndefinedMetricError("precision undefined: no detections evaluated")
    if tp + fn == 0:
        raise UndefinedMetricError("recall undefined: no groundtruth-present frames")
    return PrecisionRecall(precision=tp / (tp + fp), recall=tp / (tp + fn),
                           tp=tp, fp=fp, fn=fn)


def precision_recall(detections: Sequence[Detection], gt: GroundTruth,
                     target_class: int, frame_times: Sequence[float],
                     iou_thresh: float = 0.5) -> PrecisionRecall:
    """Group detections by frame time and match against interpolated truth.

    ``frame_times`` lists every evaluated window timestamp (detections or
    not); times outside the groundtruth span count as target-absent frames.
    """
    frames = build_frames(detections, gt, frame_times)
    return precision_recall_frames(frames, target_class, iou_thresh)


def build_frames(detections: Sequence[Detection], gt: Optional[GroundTruth],
                 frame_times: Sequence[float]) -> List[FrameEval]:
    by_time: dict = {float(t): [] for t in frame_times}
    for det in detections:
        key = float(det.t)
        if key not in by_time:
            raise ConfigError(f"detection at t={det.t} matches no evaluated frame")
        by_time[key].append(det)
    frames = []
    for t in sorted(by_time):
        box = None
        if gt is not None and gt.t_start <= t <= gt.t_end:
            box = BBox(*(float(v) for v in gt.bbox_at(t)))
        frames.append(FrameEval(t=t, gt_box=box, detections=by_time[t]))
    return frames


def detection_coverage(frames: Sequence[FrameEval]) -> float:
    """Fraction of evaluated frames carrying at least one detection."""
    if not frames:
        raise UndefinedMetricError("no frames to evaluate")
    hit = sum(1 for f in frames if f.detections)
    return hit / len(frames)


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def build_report(trace: EstimateTrace, gt: Optional[GroundTruth],
                 frames: Optional[Sequence[FrameEval]], w: EvalWindow,
                 target_class: int = 0, iou_thresh: float = 0.5) -> dict:
    """JSON-ready metric report; metrics without a defined value are None."""
    report = {"t_s": w.t_s, "t_f": w.t_f, "e_x": None, "e_gt": None,
              "precision": None, "recall": None, "tp": None, "fp": None,
              "fn": None, "coverage": None}
    try:
        report["e_x"] = error_cov(trace, w)
    except UndefinedMetricError:
        pass
    if gt is not None:
        try:
            report["e_gt"] = error_gt(trace, gt, w)
        except UndefinedMetricError:
            pass
    if frames:
        try:
            pr = precision_recall_frames(frames, target_class, iou_thresh)
            report.update(precision=pr.precision, recall=pr.recall,
                          tp=pr.tp, fp=pr.fp, fn=pr.fn)
        except UndefinedMetricError:
            pass
        try:
            report["coverage"] = detection_coverage(frames)
        except UndefinedMetricError:
            pass
    return report
