"""Vectorised interval arithmetic with outward rounding.

Every operation widens its result by one ulp in each direction, except where
IEEE arithmetic is known to be exact (products with an exact zero factor and
sums that cancel to zero), so that a lower bound of exactly 0 survives.
"""

from __future__ import annotations

import math

import numpy as np

_INF = np.inf


def _down(x):
    return np.where(x == 0.0, x, np.nextafter(x, -_INF))


def _up(x):
    return np.where(x == 0.0, x, np.nextafter(x, _INF))


class Interval:
    """Array of closed intervals ``[lo, hi]`` (elementwise)."""

    __slots__ = ("lo", "hi")
    __array_priority__ = 100

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise ValueError("interval with lo > hi")
        self.lo = np.array(lo)
        self.hi = np.array(hi)

    @classmethod
    def point(cls, x):
        return cls(x, x)

    @classmethod
    def centred(cls, c, r):
        c = np.asarray(c, dtype=float)
        r = np.asarray(r, dtype=float)
        return cls(_down(c - r), _up(c + r))

    def __repr__(self):
        return f"Interval(lo={self.lo!r}, hi={self.hi!r})"

    @property
    def shape(self):
        return self.lo.shape

    def __getitem__(self, idx):
        return Interval(self.lo[idx], self.hi[idx])

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self):
        return self.hi - self.lo

    def mag_lower(self):
        """Smallest |x| over the interval (0 if it straddles zero)."""
        return np.where(self.lo > 0, self.lo, np.where(self.hi < 0, -self.hi, 0.0))

    def mag_upper(self):
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def contains_zero(self):
        return (self.lo <= 0) & (self.hi >= 0)

    def sign(self):
        """+1 where strictly positive, -1 where strictly negative, 0 otherwise."""
        return np.where(self.lo > 0, 1, np.where(self.hi < 0, -1, 0))

    # -- arithmetic -------------------------------------------------------

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __add__(self, other):
        o = _as_interval(other)
        return Interval(_down(self.lo + o.lo), _up(self.hi + o.hi))

    __radd__ = __add__

    def __sub__(self, other):
        o = _as_interval(other)
        return Interval(_down(self.lo - o.hi), _up(self.hi - o.lo))

    def __rsub__(self, other):
        return _as_interval(other) - self

    def __mul__(self, other):
        o = _as_interval(other)
        cands = (self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi)
        lo = np.minimum(np.minimum(cands[0], cands[1]), np.minimum(cands[2], cands[3]))
        hi = np.maximum(np.maximum(cands[0], cands[1]), np.maximum(cands[2], cands[3]))
        return Interval(_down(lo), _up(hi))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _as_interval(other)
        if np.any(o.contains_zero()):
            raise ZeroDivisionError("interval divisor contains zero")
        return self * Interval(_down(1.0 / o.hi), _up(1.0 / o.lo))

    def __rtruediv__(self, other):
        return _as_interval(other) / self

    def square(self):
        """Tight enclosure of x**2 (uses the dependency x*x)."""
        a = self.lo * self.lo
        b = self.hi * self.hi
        hi = np.maximum(a, b)
        lo = np.where(self.contains_zero(), 0.0, np.minimum(a, b))
        return Interval(_down(lo), _up(hi))

    def sqrt(self):
        lo = np.maximum(self.lo, 0.0)
        return Interval(_down(np.sqrt(lo)), _up(np.sqrt(np.maximum(self.hi, 0.0))))

    def pow_nonneg(self, a: float):
        """x**a for x >= 0 (clipped); np.power is widened by a few ulps."""
        lo = np.maximum(self.lo, 0.0)
        hi = np.maximum(self.hi, 0.0)
        if a >= 0:
            plo, phi = np.power(lo, a), np.power(hi, a)
        else:
            with np.errstate(divide="ignore"):
                plo, phi = np.power(hi, a), np.power(lo, a)
        return Interval(_widen(plo, -1), _widen(phi, 1))

    def hull(self, axis=None):
        return Interval(np.min(self.lo, axis=axis), np.max(self.hi, axis=axis))

    def intersect(self, other):
        o = _as_interval(other)
        return Interval(np.maximum(self.lo, o.lo), np.minimum(self.hi, o.hi))

    def is_subset(self, other):
        o = _as_interval(other)
        return (self.lo >= o.lo) & (self.hi <= o.hi)


def _widen(x, direction, ulps=4):
    eps = np.finfo(float).eps
    with np.errstate(invalid="ignore"):
        out = x * (1.0 + direction * ulps * eps)
    return np.where((x == 0.0) | ~np.isfinite(x), x, out)


def _as_interval(x):
    if isinstance(x, Interval):
        return x
    return Interval.point(x)


def stack(intervals, axis=-1):
    return Interval(np.stack([i.lo for i in intervals], axis=axis),
                    np.stack([i.hi for i in intervals], axis=axis))


def isum(terms, axis=-1):
    """Rigorous sum along ``axis`` (correctly rounded fsum, then widened)."""
    lo = np.apply_along_axis(math.fsum, axis, terms.lo) if terms.lo.ndim > 1 else math.fsum(terms.lo)
    hi = np.apply_along_axis(math.fsum, axis, terms.hi) if terms.hi.ndim > 1 else math.fsum(terms.hi)
    return Interval(_down(np.asarray(lo)), _up(np.asarray(hi)))
