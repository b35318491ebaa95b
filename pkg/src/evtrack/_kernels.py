"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The jitted path is used automatically when numba imports cleanly; set
``EVTRACK_NO_NUMBA=1`` before import to force the numpy fallback.  Both
paths are written to produce bit-identical outputs (same operations in the
same order) and the test suite asserts that.  ``evtrack bench`` compares
their throughput.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_ENV_FLAG = "EVTRACK_NO_NUMBA"


def _flag_set() -> bool:
    value = os.environ.get(NUMBA_ENV_FLAG, "").strip().lower()
    return value not in ("", "0", "false", "no")


NUMBA_DISABLED = _flag_set()

if NUMBA_DISABLED:
    numba = None
else:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a hard dependency
        numba = None

NUMBA_AVAILABLE = numba is not None
USING_NUMBA = NUMBA_AVAILABLE


# ---------------------------------------------------------------------------
# Voxel-grid accumulation: each event deposits polarity-signed unit mass,
# linearly split between its two nearest temporal bins.  Every event performs
# exactly two adds (the second may be +/-0.0) so the numpy fallback, which
# replays the same adds through an interleaved np.add.at, matches bitwise.
# ---------------------------------------------------------------------------

def _voxel_splat_loop(ts, xs, ys, ps, t_start, t_end, grid):
    nbins = grid.shape[0]
    dur = t_end - t_start
    scale = nbins - 1.0
    for i in range(ts.shape[0]):
        if dur > 0.0 and nbins > 1:
            c = (ts[i] - t_start) / dur * scale
        else:
            c = 0.0
        b0 = int(np.floor(c))
        w1 = c - b0
        if b0 + 1 < nbins:
            b1 = b0 + 1
            wv = w1
        else:
            b1 = b0
            wv = 0.0
        p = float(ps[i])
        grid[b0, ys[i], xs[i]] += p * (1.0 - w1)
        grid[b1, ys[i], xs[i]] += p * wv


def voxel_splat_numpy(ts, xs, ys, ps, t_start, t_end, grid):
    nbins = grid.shape[0]
    n = ts.shape[0]
    if n == 0:
        return
    dur = t_end - t_start
    if dur > 0.0 and nbins > 1:
        c = (ts - t_start) / dur * (nbins - 1.0)
    else:
        c = np.zeros(n)
    b0 = np.floor(c).astype(np.int64)
    w1 = c - b0
    in_range = b0 + 1 < nbins
    b1 = np.where(in_range, b0 + 1, b0)
    wv = np.where(in_range, w1, 0.0)
    pf = ps.astype(np.float64)

    bb = np.empty(2 * n, dtype=np.int64)
    yy = np.empty(2 * n, dtype=np.int64)
    xx = np.empty(2 * n, dtype=np.int64)
    vv = np.empty(2 * n, dtype=np.float64)
    bb[0::2] = b0
    bb[1::2] = b1
    yy[0::2] = ys
    yy[1::2] = ys
    xx[0::2] = xs
    xx[1::2] = xs
    vv[0::2] = pf * (1.0 - w1)
    vv[1::2] = pf * wv
    np.add.at(grid, (bb, yy, xx), vv)


# ---------------------------------------------------------------------------
# Contrast-threshold crossing extraction for the simulator.  Given the
# previous and new log-intensity of a pixel block and the per-pixel reference
# level, emit one polarity-signed event per full threshold crossing, with the
# timestamp linearly interpolated inside the step.  `ref` and `l_prev` are
# updated in place.  Emission order is row-major by pixel, then by crossing
# index, in both implementations.
# ---------------------------------------------------------------------------

def _crossing_count_loop(l_new, ref, threshold):
    total = 0
    for yy in range(l_new.shape[0]):
        for xx in range(l_new.shape[1]):
            d = l_new[yy, xx] - ref[yy, xx]
            ad = -d if d < 0.0 else d
            total += int(np.floor(ad / threshold))
    return total


def _crossing_fill_loop(l_new, l_prev, ref, threshold, x0, y0, t0, t1,
                        out_t, out_x, out_y, out_p):
    dur = t1 - t0
    pos = 0
    for yy in range(l_new.shape[0]):
        for xx in range(l_new.shape[1]):
            ln = l_new[yy, xx]
            base = ref[yy, xx]
            d = ln - base
            ad = -d if d < 0.0 else d
            m = int(np.floor(ad / threshold))
            if m > 0:
                s = 1.0 if d >= 0.0 else -1.0
                step = s * threshold
                lp = l_prev[yy, xx]
                denom = ln - lp
                for i in range(1, m + 1):
                    frac = (base + i * step - lp) / denom
                    if frac < 0.0:
                        frac = 0.0
                    elif frac > 1.0:
                        frac = 1.0
                    out_t[pos] = t0 + frac * dur
                    out_x[pos] = x0 + xx
                    out_y[pos] = y0 + yy
                    out_p[pos] = 1 if d >= 0.0 else -1
                    pos += 1
                ref[yy, xx] = base + m * step
            l_prev[yy, xx] = ln
    return pos


def crossing_events_numpy(l_new, l_prev, ref, threshold, x0, y0, t0, t1):
    diff = l_new - ref
    counts = np.floor(np.abs(diff) / threshold).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        l_prev[:, :] = l_new
        return (np.empty(0), np.empty(0, np.uint16),
                np.empty(0, np.uint16), np.empty(0, np.int8))
    iy, ix = np.nonzero(counts)
    m = counts[iy, ix]
    sign = np.where(diff[iy, ix] >= 0.0, 1.0, -1.0)
    step = sign * threshold
    base = ref[iy, ix].copy()
    lp = l_prev[iy, ix]
    ln = l_new[iy, ix]

    rep = np.repeat(np.arange(iy.shape[0]), m)
    first = np.cumsum(m) - m
    idx = (np.arange(total) - first[rep] + 1).astype(np.float64)
    frac = (base[rep] + idx * step[rep] - lp[rep]) / (ln[rep] - lp[rep])
    np.clip(frac, 0.0, 1.0, out=frac)

    out_t = t0 + frac * (t1 - t0)
    out_x = (x0 + ix[rep]).astype(np.uint16)
    out_y = (y0 + iy[rep]).astype(np.uint16)
    out_p = np.where(diff[iy, ix] >= 0.0, 1, -1).astype(np.int8)[rep]

    ref[iy, ix] = base + m.astype(np.float64) * step
    l_prev[:, :] = l_new
    return out_t, out_x, out_y, out_p


if NUMBA_AVAILABLE:
    _voxel_splat_numba = numba.njit(cache=True)(_voxel_splat_loop)
    _crossing_count_numba = numba.njit(cache=True)(_crossing_count_loop)
    _crossing_fill_numba = numba.njit(cache=True)(_crossing_fill_loop)

    def voxel_splat_numba(ts, xs, ys, ps, t_start, t_end, grid):
        _voxel_splat_numba(ts, xs, ys, ps, t_start, t_end, grid)

    def crossing_events_numba(l_new, l_prev, ref, threshold, x0, y0, t0, t1):
        total = _crossing_count_numba(l_new, ref, threshold)
        out_t = np.empty(total)
        out_x = np.empty(total, np.uint16)
        out_y = np.empty(total, np.uint16)
        out_p = np.empty(total, np.int8)
        _crossing_fill_numba(l_new, l_prev, ref, threshold, x0, y0, t0, t1,
                             out_t, out_x, out_y, out_p)
        return out_t, out_x, out_y, out_p
else:
    voxel_splat_numba = None
    crossing_events_numba = None


voxel_splat = voxel_splat_numba if USING_NUMBA else voxel_splat_numpy
crossing_events = crossing_events_numba if USING_NUMBA else crossing_events_numpy


def warmup():
    """Trigger JIT compilation of all kernels (no-op on the numpy path)."""
    if not USING_NUMBA:
        return
    grid = np.zeros((2, 2, 2))
    voxel_splat(np.array([0.0, 0.5]), np.array([0, 1], np.uint16),
                np.array([0, 1], np.uint16), np.array([1, -1], np.int8),
                0.0, 0.5, grid)
    block = np.zeros((2, 2))
    crossing_events(np.full((2, 2), 0.3), block.copy(), block.copy(),
                    0.1, 0, 0, 0.0, 1.0)
