import numpy as np
import pytest

from evtrack import SensorGeometry, events_array


def make_stream(rng, n, width, height, t0=0.0, t1=1.0, tie_frac=0.0):
    """Random time-sorted event array; tie_frac duplicates some timestamps."""
    t = np.sort(rng.uniform(t0, t1, size=n))
    if tie_frac > 0.0 and n > 1:
        dup = rng.random(n - 1) < tie_frac
        t[1:][dup] = t[:-1][dup]
        t = np.sort(t)
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    return events_array(t, x, y, p)


@pytest.fixture
def geom():
    return SensorGeometry(64, 48)
