"""Kernel backend tests.

Both implementations of each hot kernel (jitted and pure numpy) must produce
bit-identical outputs, and both must agree with a naive per-event / per-pixel
reference to within float tolerance.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from evtrack import _kernels

from oracles import ref_voxel, ref_crossings

pytestmark = pytest.mark.skipif(
    not _kernels.NUMBA_AVAILABLE and not _kernels.NUMBA_DISABLED,
    reason="numba import failed")


def _random_window(rng, n, width, height, t0=0.0, t1=1.0):
    ts = np.sort(rng.uniform(t0, t1, n))
    if n:
        ts[0], ts[-1] = t0, t1   # windows span their own extent exactly
    xs = rng.integers(0, width, n).astype(np.uint16)
    ys = rng.integers(0, height, n).astype(np.uint16)
    ps = rng.choice(np.array([-1, 1], np.int8), n)
    return ts, xs, ys, ps


@pytest.mark.parametrize("bins,n", [(5, 200), (1, 64), (2, 17), (8, 1000)])
def test_voxel_backends_bit_identical(bins, n):
    if not _kernels.NUMBA_AVAILABLE:
        pytest.skip("single-backend build")
    rng = np.random.default_rng(bins * 1000 + n)
    ts, xs, ys, ps = _random_window(rng, n, 32, 24)
    g1 = np.zeros((bins, 24, 32))
    g2 = np.zeros((bins, 24, 32))
    _kernels.voxel_splat_numba(ts, xs, ys, ps, 0.0, 1.0, g1)
    _kernels.voxel_splat_numpy(ts, xs, ys, ps, 0.0, 1.0, g2)
    assert np.array_equal(g1, g2)


def test_voxel_matches_reference():
    rng = np.random.default_rng(7)
    for trial in range(20):
        bins = int(rng.integers(1, 7))
        n = int(rng.integers(1, 300))
        ts, xs, ys, ps = _random_window(rng, n, 16, 12)
        grid = np.zeros((bins, 12, 16))
        _kernels.voxel_splat(ts, xs, ys, ps, ts[0], ts[-1], grid)
        want = ref_voxel(ts, xs, ys, ps, ts[0], ts[-1], bins, 12, 16)
        np.testing.assert_allclose(grid, want, rtol=0.0, atol=1e-12)


def test_voxel_zero_duration_all_mass_in_first_bin():
    ts = np.full(10, 0.25)
    xs = np.arange(10, dtype=np.uint16)
    ys = np.zeros(10, np.uint16)
    ps = np.ones(10, np.int8)
    grid = np.zeros((5, 1, 16))
    _kernels.voxel_splat(ts, xs, ys, ps, 0.25, 0.25, grid)
    assert grid[0].sum() == 10.0
    assert np.all(grid[1:] == 0.0)


def test_voxel_empty_input_is_noop():
    grid = np.zeros((3, 4, 4))
    _kernels.voxel_splat(np.empty(0), np.empty(0, np.uint16),
                         np.empty(0, np.uint16), np.empty(0, np.int8),
                         0.0, 1.0, grid)
    assert np.all(grid == 0.0)


def _random_levels(rng, h, w, scale=1.0):
    return rng.normal(0.0, scale, (h, w))


@pytest.mark.parametrize("trial", range(6))
def test_crossing_backends_bit_identical(trial):
    if not _kernels.NUMBA_AVAILABLE:
        pytest.skip("single-backend build")
    rng = np.random.default_rng(100 + trial)
    h, w = 9, 13
    l_prev = _random_levels(rng, h, w)
    l_new = l_prev + _random_levels(rng, h, w, 0.5)
    ref = l_prev + rng.uniform(-0.05, 0.05, (h, w))
    args = (0.15, 3, 2, 0.5, 0.75)

    lp1, r1 = l_prev.copy(), ref.copy()
    lp2, r2 = l_prev.copy(), ref.copy()
    out1 = _kernels.crossing_events_numba(l_new.copy(), lp1, r1, *args)
    out2 = _kernels.crossing_events_numpy(l_new.copy(), lp2, r2, *args)
    for a, b in zip(out1, out2):
        assert np.array_equal(a, b)
    assert np.array_equal(lp1, lp2)
    assert np.array_equal(r1, r2)


def test_crossings_match_reference():
    rng = np.random.default_rng(42)
    for trial in range(10):
        h, w = 6, 8
        l_prev = _random_levels(rng, h, w)
        l_new = l_prev + _random_levels(rng, h, w, 0.6)
        ref = l_prev.copy()
        thr = 0.2

        lp, r = l_prev.copy(), ref.copy()
        t, x, y, p = _kernels.crossing_events(l_new.copy(), lp, r,
                                              thr, 0, 0, 1.0, 1.5)
        want, want_ref = ref_crossings(l_new, l_prev, ref, thr, 1.0, 1.5)

        assert len(t) == len(want)
        for i, (wt, wx, wy, wp) in enumerate(want):
            assert x[i] == wx and y[i] == wy and p[i] == wp
            assert t[i] == pytest.approx(wt, abs=1e-12)
        np.testing.assert_allclose(r, want_ref, rtol=0.0, atol=1e-12)
        np.testing.assert_array_equal(lp, l_new)


def test_crossing_offsets_applied():
    l_prev = np.zeros((2, 2))
    l_new = np.full((2, 2), 0.35)
    ref = np.zeros((2, 2))
    t, x, y, p = _kernels.crossing_events(l_new, l_prev.copy(), ref.copy(),
                                          0.1, 10, 20, 0.0, 1.0)
    assert set(np.unique(x)) == {10, 11}
    assert set(np.unique(y)) == {20, 21}
    assert np.all(p == 1)
    assert len(t) == 4 * 3   # three full 0.1-crossings per pixel


def test_reference_level_quantized_not_chased():
    # the reference level advances by whole thresholds, not to l_new
    l_prev = np.zeros((1, 1))
    l_new = np.full((1, 1), 0.25)
    ref = np.zeros((1, 1))
    _kernels.crossing_events(l_new, l_prev, ref, 0.1, 0, 0, 0.0, 1.0)
    assert ref[0, 0] == pytest.approx(0.2, abs=1e-15)


def test_env_flag_forces_numpy_backend():
    code = ("import evtrack._kernels as k; "
            "print(k.USING_NUMBA, k.voxel_splat is k.voxel_splat_numpy)")
    env = dict(os.environ, EVTRACK_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]


def test_default_backend_is_jitted_when_available():
    env = {k: v for k, v in os.environ.items() if k != "EVTRACK_NO_NUMBA"}
    code = "import evtrack._kernels as k; print(k.USING_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "True"


def test_warmup_runs():
    _kernels.warmup()
