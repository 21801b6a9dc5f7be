from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fractal_sio.interval import Interval, isum

finite = st.floats(-1e6, 1e6, allow_nan=False)


def _iv(a, b):
    return Interval(min(a, b), max(a, b))


def _inside(x, iv):
    return bool(np.all((iv.lo <= x) & (x <= iv.hi)))


@settings(max_examples=300, deadline=None)
@given(finite, finite, finite, finite, st.floats(0, 1), st.floats(0, 1))
def test_arithmetic_encloses_sampled_points(a, b, c, d, u, v):
    X, Y = _iv(a, b), _iv(c, d)
    # lo + u*(hi - lo) can round outside [lo, hi]
    x = float(np.clip(X.lo + u * (X.hi - X.lo), X.lo, X.hi))
    y = float(np.clip(Y.lo + v * (Y.hi - Y.lo), Y.lo, Y.hi))
    assert _inside(x + y, X + Y)
    assert _inside(x - y, X - Y)
    assert _inside(x * y, X * Y)
    assert _inside(x * x, X.square())
    assert _inside(-x, -X)


def test_exact_zero_lower_bound_survives():
    X = Interval(0.0, 2.0)
    assert (X * Interval(1.0, 3.0)).lo == 0.0
    assert X.square().lo == 0.0
    assert (X + Interval(0.0)).lo == 0.0
    assert Interval(-1.0, 1.0).square().lo == 0.0


def test_outward_rounding_is_strict():
    third = Interval(1.0) / Interval(3.0)
    assert third.lo < 1 / 3 < third.hi
    s = Interval(0.1) + Interval(0.2)
    assert s.lo < 0.1 + 0.2 <= s.hi or s.lo <= 0.1 + 0.2 < s.hi


def test_division_by_zero_interval():
    with pytest.raises(ZeroDivisionError):
        Interval(1.0) / Interval(-1.0, 1.0)


def test_sign_and_magnitudes():
    X = Interval([-3.0, -1.0, 2.0], [-2.0, 1.0, 5.0])
    assert X.sign().tolist() == [-1, 0, 1]
    assert X.mag_lower().tolist() == [2.0, 0.0, 2.0]
    assert X.mag_upper().tolist() == [3.0, 1.0, 5.0]
    assert X.contains_zero().tolist() == [False, True, False]


def test_powers_and_roots():
    X = Interval(0.25, 4.0)
    r = X.sqrt()
    assert r.lo <= 0.5 and r.hi >= 2.0
    p = X.pow_nonneg(-1.5)
    assert p.lo <= 4.0 ** -1.5 and p.hi >= 0.25 ** -1.5


def test_isum_encloses_fsum():
    rng = np.random.default_rng(0)
    lo = rng.normal(size=1000)
    X = Interval(lo, lo + rng.uniform(0, 1e-3, size=1000))
    S = isum(X)
    assert S.lo <= math.fsum(X.lo) and S.hi >= math.fsum(X.hi)


def test_rejects_reversed_bounds():
    with pytest.raises(ValueError):
        Interval(2.0, 1.0)
