"""Metric groups with dilations: the Heisenberg group H^n and Euclidean R^d.

Points are plain float arrays whose last axis holds the coordinates, so every
operation broadcasts over leading batch axes. Heisenberg points are stored as
``(p_1, ..., p_2n, p_{2n+1})`` with the group law

    p . q = (p' + q', p_t + q_t - 2 sum_i (p_i q_{i+n} - p_{i+n} q_i)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import InputError
from .interval import Interval, _as_interval

HEISENBERG = "heisenberg"
EUCLIDEAN = "euclidean"


@dataclass(frozen=True)
class GroupSpace:
    kind: str
    n: int

    def __post_init__(self):
        if self.kind not in (HEISENBERG, EUCLIDEAN):
            raise InputError(f"unknown group kind {self.kind!r}")
        if int(self.n) != self.n or self.n < 1:
            raise InputError(f"group parameter must be a positive integer, got {self.n!r}")

    @classmethod
    def heisenberg(cls, n: int) -> "GroupSpace":
        return cls(HEISENBERG, n)

    @classmethod
    def euclidean(cls, d: int) -> "GroupSpace":
        return cls(EUCLIDEAN, d)

    @property
    def is_heisenberg(self) -> bool:
        return self.kind == HEISENBERG

    @property
    def dim(self) -> int:
        """Length of the coordinate vector."""
        return 2 * self.n + 1 if self.is_heisenberg else self.n

    @property
    def homogeneous_dim(self) -> int:
        return 2 * self.n + 2 if self.is_heisenberg else self.n

    @property
    def horizontal_dim(self) -> int:
        return 2 * self.n if self.is_heisenberg else self.n

    def identity(self) -> np.ndarray:
        return np.zeros(self.dim)

    def to_config(self) -> dict:
        if self.is_heisenberg:
            return {"group": HEISENBERG, "n": self.n}
        return {"group": EUCLIDEAN, "d": self.n}

    @classmethod
    def from_config(cls, cfg: dict) -> "GroupSpace":
        if not isinstance(cfg, dict) or "group" not in cfg:
            raise InputError(f"space config must be an object with a 'group' key, got {cfg!r}")
        kind = cfg["group"]
        if kind == HEISENBERG:
            return cls.heisenberg(_positive_int(cfg.get("n"), "n"))
        if kind == EUCLIDEAN:
            return cls.euclidean(_positive_int(cfg.get("d"), "d"))
        raise InputError(f"unknown group {kind!r}")

    # -- validation -------------------------------------------------------

    def point(self, p: Any) -> np.ndarray:
        """Coerce ``p`` to a float array and check its trailing dimension."""
        arr = np.asarray(p, dtype=float)
        if arr.ndim == 0 or arr.shape[-1] != self.dim:
            raise InputError(
                f"point has shape {arr.shape}, expected trailing dimension {self.dim} for {self}"
            )
        if not np.all(np.isfinite(arr)):
            raise InputError("point coordinates must be finite")
        return arr

    # -- arithmetic -------------------------------------------------------

    def mul(self, p, q) -> np.ndarray:
        p = self.point(p)
        q = self.point(q)
        if not self.is_heisenberg:
            return p + q
        n = self.n
        out = p + q
        out[..., 2 * n] -= 2.0 * symplectic(p[..., :n], p[..., n:2 * n], q[..., :n], q[..., n:2 * n])
        return out

    def inv(self, p) -> np.ndarray:
        return -self.point(p)

    def dilate(self, r, p) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if np.any(r <= 0):
            raise InputError(f"dilation factor must be positive, got {r}")
        p = self.point(p)
        r = r[..., None]
        if not self.is_heisenberg:
            return r * p
        out = r * p
        out[..., -1] *= r[..., 0]
        return out

    def norm(self, p) -> np.ndarray:
        p = self.point(p)
        if not self.is_heisenberg:
            return np.sqrt(np.sum(p * p, axis=-1))
        h2 = np.sum(p[..., :-1] ** 2, axis=-1)
        return np.sqrt(np.sqrt(h2 * h2 + p[..., -1] ** 2))

    def dist(self, p, q) -> np.ndarray:
        return self.norm(self.mul(self.inv(p), q))

    def __str__(self) -> str:
        return f"H^{self.n}" if self.is_heisenberg else f"R^{self.n}"


def symplectic(a1, a2, b1, b2):
    """sum_i (a1_i b2_i - a2_i b1_i) over the trailing axis."""
    return np.sum(a1 * b2 - a2 * b1, axis=-1)


def _positive_int(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
        raise InputError(f"{name} must be a positive integer, got {v!r}")
    return int(v)


def group_mul(space: GroupSpace, p, q) -> np.ndarray:
    return space.mul(p, q)


def group_inv(space: GroupSpace, p) -> np.ndarray:
    return space.inv(p)


def dilate(space: GroupSpace, r, p) -> np.ndarray:
    return space.dilate(r, p)


def gauge_norm(space: GroupSpace, p) -> np.ndarray:
    return space.norm(p)


def dist(space: GroupSpace, p, q) -> np.ndarray:
    return space.dist(p, q)


# -- interval boxes -------------------------------------------------------
# Boxes are Interval arrays whose trailing axis holds coordinates. In the
# Heisenberg product each coordinate occurs once in every output component,
# so the enclosures below are exact up to outward rounding.

def box_mul(space: GroupSpace, P, Q):
    P = _as_interval(P)
    Q = _as_interval(Q)
    out = P + Q
    if not space.is_heisenberg:
        return out
    n = space.n
    acc = None
    for i in range(n):
        term = P[..., i] * Q[..., i + n] - P[..., i + n] * Q[..., i]
        acc = term if acc is None else acc + term
    last = out[..., 2 * n] - acc * 2.0
    lo = out.lo.copy()
    hi = out.hi.copy()
    lo[..., 2 * n] = last.lo
    hi[..., 2 * n] = last.hi
    return Interval(lo, hi)


def box_dilate(space: GroupSpace, r, P):
    r = np.asarray(r, dtype=float)[..., None]
    scale = np.broadcast_to(r, P.lo.shape[:-1] + (space.dim,)).copy()
    if space.is_heisenberg:
        scale[..., -1] = scale[..., -1] ** 2
    return P * Interval.point(scale)


def box_norm_lower(space: GroupSpace, P) -> np.ndarray:
    """Lower bound of the gauge norm over a box (exact up to rounding)."""
    m = P.mag_lower()
    if not space.is_heisenberg:
        return np.nextafter(np.sqrt(np.sum(m * m, axis=-1)), 0.0)
    h2 = np.sum(m[..., :-1] ** 2, axis=-1)
    val = np.sqrt(np.sqrt(h2 * h2 + m[..., -1] ** 2))
    return np.maximum(val * (1.0 - 8 * np.finfo(float).eps), 0.0)


def box_norm_upper(space: GroupSpace, P) -> np.ndarray:
    m = P.mag_upper()
    if not space.is_heisenberg:
        return np.sqrt(np.sum(m * m, axis=-1)) * (1.0 + 8 * np.finfo(float).eps)
    h2 = np.sum(m[..., :-1] ** 2, axis=-1)
    return np.sqrt(np.sqrt(h2 * h2 + m[..., -1] ** 2)) * (1.0 + 8 * np.finfo(float).eps)


def ball_box(space: GroupSpace, centre, radius):
    """Coordinate box containing the gauge ball B(centre, radius)."""
    centre = np.asarray(centre, dtype=float)
    radius = np.asarray(radius, dtype=float)[..., None]
    half = np.broadcast_to(radius, centre.shape).copy()
    if space.is_heisenberg:
        half[..., -1] = half[..., -1] ** 2
    return box_mul(space, Interval.point(centre), Interval.centred(np.zeros_like(centre), half))
