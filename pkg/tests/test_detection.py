"""Detection plumbing tests: containers, selection policy, groundtruth oracle."""

import itertools
import math

import numpy as np
import pytest

from evtrack import (
    ConfigError,
    Detection,
    Measurement,
    MeasurementNoise,
    OracleConfig,
    OracleDetector,
    SensorGeometry,
    oracle_detect,
    select_measurement,
)
from evtrack.detection import oracle_detect as _oracle_detect
from evtrack.events import EventWindow, events_array
from evtrack.simulate import GroundTruth

from oracles import RefStream


def make_gt(duration=1.0, cx0=20.0, cy0=15.0, vx=10.0, vy=5.0, half=5.0):
    t = np.linspace(0.0, duration, 11)
    cx = cx0 + vx * t
    cy = cy0 + vy * t
    return GroundTruth(t=t, cx=cx, cy=cy, xmin=cx - half, ymin=cy - half,
                       xmax=cx + half, ymax=cy + half)


def make_window(index=0, t_end=0.5):
    ev = events_array([t_end - 0.01, t_end], [1, 2], [3, 4], [1, -1])
    return EventWindow(events=ev, index=index, t_start=t_end - 0.01,
                       t_end=t_end)


# -- containers ---------------------------------------------------------------

def test_detection_validation():
    Detection(0.0, 0.0, 1.0, 2.0, 0.9, 0, 0.1)
    with pytest.raises(ConfigError):
        Detection(1.0, 0.0, 1.0, 2.0, 0.9, 0, 0.1)     # zero width
    with pytest.raises(ConfigError):
        Detection(0.0, 0.0, 1.0, 2.0, 1.5, 0, 0.1)     # confidence > 1


def test_detection_center():
    d = Detection(2.0, 4.0, 6.0, 10.0, 0.5, 0, 0.0)
    assert tuple(d.center) == (4.0, 7.0)


def test_measurement_validation():
    Measurement(z=[1.0, 2.0], t=0.1, R=np.eye(2))
    with pytest.raises(ConfigError):
        Measurement(z=[1.0, 2.0], t=0.1, R=[[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ConfigError):
        Measurement(z=[1.0, 2.0], t=0.1, R=[[1.0, 0.0], [0.0, -1.0]])


def test_measurement_arrays_read_only():
    m = Measurement(z=[1.0, 2.0], t=0.1, R=np.eye(2))
    with pytest.raises(ValueError):
        m.z[0] = 5.0


def test_noise_policy_fixed():
    pol = MeasurementNoise(sigma=3.0)
    np.testing.assert_array_equal(pol.covariance(0.2), 9.0 * np.eye(2))
    np.testing.assert_array_equal(pol.covariance(1.0), 9.0 * np.eye(2))


def test_noise_policy_confidence_scaled():
    pol = MeasurementNoise(sigma=2.0, scale_by_confidence=True)
    np.testing.assert_allclose(pol.covariance(0.5), 8.0 * np.eye(2))
    # clamped away from zero
    tiny = pol.covariance(0.0)
    assert np.isfinite(tiny).all()
    np.testing.assert_allclose(tiny, (4.0 / 1e-3) * np.eye(2))


def test_noise_policy_rejects_bad_sigma():
    with pytest.raises(ConfigError):
        MeasurementNoise(sigma=0.0)


# -- selection policy ---------------------------------------------------------

def det(conf, cls=0, x=0.0):
    return Detection(x, 0.0, x + 4.0, 4.0, conf, cls, 0.25)


def test_select_highest_confidence():
    noise = MeasurementNoise(sigma=1.0)
    m = select_measurement([det(0.3), det(0.9, x=10.0), det(0.5)], 0, noise)
    assert m is not None
    np.testing.assert_allclose(m.z, [12.0, 2.0])
    assert m.t == 0.25


def test_select_filters_by_class():
    noise = MeasurementNoise(sigma=1.0)
    assert select_measurement([det(0.9, cls=1)], 0, noise) is None
    m = select_measurement([det(0.9, cls=1), det(0.2, cls=0)], 0, noise)
    np.testing.assert_allclose(m.z, [2.0, 2.0])


def test_select_empty_is_none():
    assert select_measurement([], 0, MeasurementNoise()) is None


def test_select_tie_break_is_deterministic():
    noise = MeasurementNoise(sigma=1.0)
    tied = [det(0.7, x=8.0), det(0.7, x=2.0), det(0.7, x=5.0)]
    picks = set()
    for perm in itertools.permutations(tied):
        m = select_measurement(list(perm), 0, noise)
        picks.add(tuple(m.z))
    assert picks == {(4.0, 2.0)}   # smallest xmin among the tied


def test_select_uses_noise_policy():
    noise = MeasurementNoise(sigma=2.0, scale_by_confidence=True)
    m = select_measurement([det(0.5)], 0, noise)
    np.testing.assert_allclose(m.R, 8.0 * np.eye(2))


# -- groundtruth oracle -------------------------------------------------------

def test_oracle_no_jitter_returns_exact_box():
    gt = make_gt()
    cfg = OracleConfig(sigma=0.0, p_miss=0.0)
    out = oracle_detect(make_window(t_end=0.5), gt, cfg, seed=4)
    assert len(out) == 1
    d = out[0]
    x0, y0, x1, y1 = gt.bbox_at(0.5)
    assert (d.xmin, d.ymin, d.xmax, d.ymax) == (x0, y0, x1, y1)
    assert d.t == 0.5
    lo, hi = cfg.conf_range
    assert lo <= d.confidence <= hi


def test_oracle_always_misses_at_unit_p_miss():
    gt = make_gt()
    cfg = OracleConfig(sigma=2.0, p_miss=1.0)
    for k in range(50):
        assert oracle_detect(make_window(index=k), gt, cfg, seed=1) == []


def test_oracle_miss_rate_matches_probability():
    gt = make_gt()
    cfg = OracleConfig(sigma=1.0, p_miss=0.3)
    n = 4000
    hits = sum(bool(oracle_detect(make_window(index=k), gt, cfg, seed=2))
               for k in range(n))
    assert hits / n == pytest.approx(0.7, abs=0.03)


def test_oracle_depends_only_on_window_index():
    gt = make_gt()
    cfg = OracleConfig(sigma=2.0, p_miss=0.2)
    a = [oracle_detect(make_window(index=k), gt, cfg, seed=3)
         for k in range(20)]
    b = [oracle_detect(make_window(index=k), gt, cfg, seed=3)
         for k in reversed(range(20))]
    for out_a, out_b in zip(a, reversed(b)):
        assert len(out_a) == len(out_b)
        for da, db in zip(out_a, out_b):
            assert (da.xmin, da.ymin, da.xmax, da.ymax, da.confidence) == \
                   (db.xmin, db.ymin, db.xmax, db.ymax, db.confidence)


def test_oracle_draw_sequence_matches_reference():
    gt = make_gt()
    cfg = OracleConfig(sigma=2.0, p_miss=0.25)
    for k in range(30):
        out = oracle_detect(make_window(index=k, t_end=0.5), gt, cfg, seed=9)
        ref = RefStream.substream(9, k)
        x0, y0, x1, y1 = (float(v) for v in gt.bbox_at(0.5))
        if ref.unit() >= cfg.p_miss:
            x0 += cfg.sigma * ref.gaussian()
            y0 += cfg.sigma * ref.gaussian()
            x1 += cfg.sigma * ref.gaussian()
            y1 += cfg.sigma * ref.gaussian()
            if x1 < x0:
                x0, x1 = x1, x0
            if y1 < y0:
                y0, y1 = y1, y0
            lo, hi = cfg.conf_range
            conf = lo + (hi - lo) * ref.unit()
            assert len(out) == 1
            d = out[0]
            assert (d.xmin, d.ymin, d.xmax, d.ymax) == (x0, y0, x1, y1)
            assert d.confidence == conf
        else:
            assert out == []


def test_oracle_center_jitter_variance():
    # each box edge gets sigma jitter, so the center variance is sigma^2/2
    gt = make_gt(vx=0.0, vy=0.0)
    sigma = 2.0
    cfg = OracleConfig(sigma=sigma, p_miss=0.0)
    n = 10000
    errs = np.empty((n, 2))
    cx, cy = gt.center_at(0.5)
    for k in range(n):
        (d,) = oracle_detect(make_window(index=k, t_end=0.5), gt, cfg, seed=5)
        errs[k] = (d.center[0] - cx, d.center[1] - cy)
    var = errs.var(axis=0)
    want = sigma * sigma / 2.0
    assert var[0] == pytest.approx(want, rel=0.10)
    assert var[1] == pytest.approx(want, rel=0.10)
    assert abs(errs.mean()) < 0.1


def test_oracle_false_positives():
    gt = make_gt()
    frame = SensorGeometry(64, 48)
    cfg = OracleConfig(sigma=0.0, p_miss=0.0, p_fp=1.0, frame=frame)
    out = oracle_detect(make_window(index=0, t_end=0.5), gt, cfg, seed=6)
    assert len(out) == 2
    fp = out[1]
    x0, y0, x1, y1 = gt.bbox_at(0.5)
    assert fp.xmax - fp.xmin == pytest.approx(x1 - x0, abs=1e-9)
    assert 0.0 <= (fp.xmin + fp.xmax) / 2.0 <= frame.width - 1


def test_oracle_fp_requires_frame():
    with pytest.raises(ConfigError):
        OracleConfig(sigma=1.0, p_fp=0.5)


def test_oracle_config_validation():
    with pytest.raises(ConfigError):
        OracleConfig(sigma=-1.0)
    with pytest.raises(ConfigError):
        OracleConfig(p_miss=1.5)
    with pytest.raises(ConfigError):
        OracleConfig(conf_range=(0.9, 0.1))


def test_oracle_detector_wraps_function():
    gt = make_gt()
    cfg = OracleConfig(sigma=1.0, p_miss=0.0)
    detector = OracleDetector(gt, cfg, seed=12)
    w = make_window(index=7)
    got = detector.detect(w)
    want = _oracle_detect(w, gt, cfg, 12)
    assert [(d.xmin, d.confidence) for d in got] == \
           [(d.xmin, d.confidence) for d in want]
    detector.close()
