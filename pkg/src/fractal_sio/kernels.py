"""Homogeneous kernels K(x, y) = omega(x^{-1} y) / d(x, y)^s.

Three families are provided:

* ``heisenberg_riesz`` -- the horizontal gradient of the sub-Laplacian's
  fundamental solution on H^n, K = grad_H Gamma, with 2n components;
* ``coordinate_riesz`` -- x_i / |x|^{s+1} (one component);
* ``complex_power``    -- z^m / |z|^{m+s} on R^2, returned as (Re, Im).

A fourth family, ``constant`` (omega identically equal to a positive
constant), exists for diagnostics and tests.

The kernel formulas are written once against a tiny arithmetic protocol so
the same code evaluates on float arrays and on :class:`Interval` boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import InputError, SingularityError
from .group import GroupSpace
from .interval import Interval

FAMILIES = ("heisenberg_riesz", "coordinate_riesz", "complex_power", "constant")
ORIENTATIONS = ("standard", "reflected")


@dataclass(frozen=True)
class KernelSpec:
    """An s-homogeneous vector kernel on ``space``.

    ``scale`` is c_Q for the Heisenberg family and an overall amplitude for
    the others. ``orientation='reflected'`` evaluates omega at y^{-1} x
    instead of x^{-1} y, which is the convention of the convolution operator
    T(p) = int K(q^{-1} p) dsigma(q).
    """

    space: GroupSpace
    family: str
    s: float
    scale: float = 1.0
    axis: int = 0
    m: int = 3
    orientation: str = "standard"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}")
        if self.orientation not in ORIENTATIONS:
            raise InputError(f"orientation must be one of {ORIENTATIONS}")
        if not self.s > 0:
            raise InputError(f"homogeneity degree must be positive, got {self.s}")
        if self.scale == 0 or not np.isfinite(self.scale):
            raise InputError("kernel scale must be finite and nonzero")
        if self.family == "heisenberg_riesz":
            if not self.space.is_heisenberg:
                raise InputError("heisenberg_riesz requires a Heisenberg space")
            if self.s != self.space.homogeneous_dim - 1:
                raise InputError("heisenberg_riesz kernels are (Q-1)-homogeneous")
        if self.family == "complex_power" and self.space != GroupSpace.euclidean(2):
            raise InputError("complex_power requires the Euclidean plane")
        if self.family == "coordinate_riesz" and not 0 <= self.axis < self.space.dim:
            raise InputError(f"axis {self.axis} out of range for {self.space}")
        if self.family == "constant" and self.scale < 0:
            raise InputError("constant kernel must be positive")

    @property
    def num_components(self) -> int:
        if self.family == "heisenberg_riesz":
            return 2 * self.space.n
        if self.family == "complex_power":
            return 2
        return 1

    def rescaled(self, factor: float) -> "KernelSpec":
        return replace(self, scale=self.scale * factor)

    def to_config(self) -> dict:
        cfg = {"kernel": self.family}
        if self.family == "heisenberg_riesz":
            cfg["c_Q"] = self.scale
        elif self.family == "coordinate_riesz":
            cfg.update(s=self.s, axis=self.axis, scale=self.scale)
        elif self.family == "complex_power":
            cfg.update(m=self.m, s=self.s, scale=self.scale)
        else:
            cfg.update(s=self.s, scale=self.scale)
        cfg["orientation"] = self.orientation
        return cfg


def heisenberg_riesz(n: int = 1, c_Q: float | None = None, orientation: str = "standard") -> KernelSpec:
    space = GroupSpace.heisenberg(n)
    Q = space.homogeneous_dim
    return KernelSpec(space, "heisenberg_riesz", float(Q - 1),
                      scale=float(2 - Q) if c_Q is None else float(c_Q),
                      orientation=orientation)


def complex_power(m: int = 3, s: float = 1.0, scale: float = 1.0, orientation: str = "standard") -> KernelSpec:
    return KernelSpec(GroupSpace.euclidean(2), "complex_power", float(s), scale=scale, m=int(m),
                      orientation=orientation)


def coordinate_riesz(space: GroupSpace, axis: int, s: float, scale: float = 1.0) -> KernelSpec:
    return KernelSpec(space, "coordinate_riesz", float(s), scale=scale, axis=int(axis))


def constant_kernel(space: GroupSpace, s: float, value: float = 1.0) -> KernelSpec:
    return KernelSpec(space, "constant", float(s), scale=value)


def kernel_from_config(cfg: dict, space: GroupSpace | None = None) -> KernelSpec:
    if not isinstance(cfg, dict) or "kernel" not in cfg:
        raise InputError(f"kernel config must be an object with a 'kernel' key, got {cfg!r}")
    fam = cfg["kernel"]
    orient = cfg.get("orientation", "standard")
    try:
        if fam == "heisenberg_riesz":
            n = space.n if space is not None else int(cfg.get("n", 1))
            if space is not None and not space.is_heisenberg:
                raise InputError("heisenberg_riesz kernel needs a Heisenberg space")
            return heisenberg_riesz(n, cfg.get("c_Q"), orient)
        if fam == "coordinate_riesz":
            if space is None:
                space = GroupSpace.from_config(cfg["space"])
            return coordinate_riesz(space, cfg.get("axis", 0), cfg["s"], cfg.get("scale", 1.0))
        if fam == "complex_power":
            return complex_power(cfg.get("m", 3), cfg.get("s", 1.0), cfg.get("scale", 1.0), orient)
        if fam == "constant":
            if space is None:
                space = GroupSpace.from_config(cfg["space"])
            return constant_kernel(space, cfg["s"], cfg.get("value", cfg.get("scale", 1.0)))
    except (KeyError, TypeError) as exc:
        raise InputError(f"bad kernel config {cfg!r}: {exc}") from exc
    raise InputError(f"unknown kernel {fam!r}")


# -- formulas (float arrays or Interval) --------------------------------------

def _sq(x):
    return x.square() if isinstance(x, Interval) else x * x


def _pow(x, a):
    return x.pow_nonneg(a) if isinstance(x, Interval) else np.power(x, a)


def _norm4(space, p):
    """Fourth power of the gauge norm (Heisenberg) or squared norm (Euclidean)."""
    h2 = None
    for i in range(space.horizontal_dim):
        t = _sq(p[..., i])
        h2 = t if h2 is None else h2 + t
    if space.is_heisenberg:
        return h2, _sq(h2) + _sq(p[..., -1])
    return h2, h2


def _components(spec: KernelSpec, p, power_extra: float):
    """Numerators of omega and the matching norm power.

    Returns (numerators, norm_power_base, exponent) with
    K = scale * num / base**exponent. ``power_extra`` is s for K and 0 for omega.
    """
    space = spec.space
    h2, base = _norm4(space, p)
    # base is ||p||^4 (Heisenberg) or |p|^2 (Euclidean)
    root = 4.0 if space.is_heisenberg else 2.0
    fam = spec.family
    if fam == "heisenberg_riesz":
        n = space.n
        t = p[..., 2 * n]
        nums = [p[..., i] * h2 + p[..., i + n] * t for i in range(n)]
        nums += [p[..., i + n] * h2 - p[..., i] * t for i in range(n)]
        return nums, base, (3.0 + power_extra) / root
    if fam == "coordinate_riesz":
        weight = 2.0 if (space.is_heisenberg and spec.axis == space.dim - 1) else 1.0
        return [p[..., spec.axis]], base, (weight + power_extra) / root
    if fam == "complex_power":
        x, y = p[..., 0], p[..., 1]
        re, im = x, y
        for _ in range(spec.m - 1):
            re, im = re * x - im * y, re * y + im * x
        return [re, im], base, (spec.m + power_extra) / root
    return [p[..., 0] * 0.0 + 1.0], base, power_extra / root


def _evaluate(spec: KernelSpec, p, power_extra: float):
    nums, base, expo = _components(spec, p, power_extra)
    if isinstance(p, Interval):
        if np.any(base.lo <= 0):
            raise SingularityError("interval box contains the kernel singularity")
        denom = _pow(base, -expo)
        out = [num * denom * spec.scale for num in nums]
        return Interval(np.stack([o.lo for o in out], -1), np.stack([o.hi for o in out], -1))
    if np.any(base == 0):
        raise SingularityError("kernel evaluated at the identity")
    denom = np.power(base, -expo)
    return np.stack([spec.scale * num * denom for num in nums], axis=-1)


def eval_omega(spec: KernelSpec, p) -> np.ndarray:
    """Degree-zero part omega(p), one entry per kernel component."""
    return _evaluate(spec, spec.space.point(p), 0.0)


def kernel_at(spec: KernelSpec, rel):
    """K evaluated at the relative element x^{-1} y (orientation already applied)."""
    if isinstance(rel, Interval):
        return _evaluate(spec, rel, spec.s)
    return _evaluate(spec, spec.space.point(rel), spec.s)


def relative(spec: KernelSpec, x, y):
    space = spec.space
    if spec.orientation == "reflected":
        return space.mul(space.inv(y), x)
    return space.mul(space.inv(x), y)


def eval_kernel(spec: KernelSpec, x, y) -> np.ndarray:
    return kernel_at(spec, relative(spec, x, y))


def eval_gamma(space: GroupSpace, C_Q: float, p) -> np.ndarray:
    """Fundamental solution of the sub-Laplacian, C_Q ||p||^{2-Q}."""
    if not space.is_heisenberg:
        raise InputError("the fundamental solution is defined on Heisenberg spaces")
    nrm = space.norm(p)
    if np.any(nrm == 0):
        raise SingularityError("Gamma evaluated at the identity")
    return C_Q * nrm ** (2.0 - space.homogeneous_dim)


def gamma_c_Q(space: GroupSpace, C_Q: float = 1.0) -> float:
    """c_Q = (2 - Q) C_Q, the constant for which grad_H Gamma is heisenberg_riesz."""
    return (2.0 - space.homogeneous_dim) * C_Q


# -- finite differences -------------------------------------------------------

def _horizontal_directions(space: GroupSpace, p):
    """Coordinate vectors of X_1..X_n, Y_1..Y_n at p (rows)."""
    n = space.n
    dim = space.dim
    dirs = np.zeros((2 * n, dim))
    for i in range(n):
        dirs[i, i] = 1.0
        dirs[i, 2 * n] = 2.0 * p[i + n]
        dirs[i + n, i + n] = 1.0
        dirs[i + n, 2 * n] = -2.0 * p[i]
    return dirs


def _normalise(space, p, degree):
    if degree is None:
        return p, 1.0
    nrm = float(space.norm(p))
    if nrm == 0:
        raise SingularityError("cannot gauge-normalise the identity")
    return space.dilate(1.0 / nrm, p), nrm


def horizontal_gradient_fd(space: GroupSpace, f: Callable, p, h: float = 1e-5,
                           homogeneous_degree: float | None = None) -> np.ndarray:
    """Central-difference approximation of (X_1 f, ..., X_n f, Y_1 f, ..., Y_n f).

    Partial derivatives are taken along the coordinate axes and combined with
    the coefficients of the left-invariant fields. If ``homogeneous_degree``
    is given, f is assumed homogeneous under dilations and is differentiated
    at the gauge-normalised point; the result is rescaled afterwards.
    """
    if not space.is_heisenberg:
        raise InputError("horizontal gradient is defined on Heisenberg spaces")
    p = space.point(p).astype(float)
    q, nrm = _normalise(space, p, homogeneous_degree)
    dim = space.dim
    partial = np.empty(dim)
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        partial[k] = (f(q + e) - f(q - e)) / (2 * h)
    grad = _horizontal_directions(space, q) @ partial
    if homogeneous_degree is not None:
        grad = grad * nrm ** (homogeneous_degree - 1.0)
    return grad


def sublaplacian_fd(space: GroupSpace, f: Callable, p, h: float = 1e-4,
                    homogeneous_degree: float | None = None) -> float:
    """Second differences of f along the integral lines of each X_i and Y_i.

    The integral curve of X_i through p is t -> p . (t e_i), a straight line
    in coordinates, so X_i^2 f(p) is the plain second derivative along it.
    """
    if not space.is_heisenberg:
        raise InputError("sub-Laplacian is defined on Heisenberg spaces")
    p = space.point(p).astype(float)
    q, nrm = _normalise(space, p, homogeneous_degree)
    f0 = f(q)
    total = 0.0
    for v in _horizontal_directions(space, q):
        total += (f(q + h * v) - 2.0 * f0 + f(q - h * v)) / (h * h)
    if homogeneous_degree is not None:
        total *= nrm ** (homogeneous_degree - 2.0)
    return float(total)


# -- empirical standard-kernel estimates ---------------------------------------

@dataclass
class EstimateReport:
    max_size_ratio: float
    max_holder_ratio: float
    samples: int
    seed: int
    rejected: int = 0
    dilation: float = 1.0

    def to_dict(self) -> dict:
        return {
            "max_size_ratio": self.max_size_ratio,
            "max_holder_ratio": self.max_holder_ratio,
            "samples": self.samples,
            "seed": self.seed,
            "rejected": self.rejected,
            "dilation": self.dilation,
        }


def _unit_sphere(space, rng, size):
    while True:
        u = rng.uniform(-1.0, 1.0, size=(size, space.dim))
        nrm = space.norm(u)
        if np.all(nrm > 1e-6):
            return space.dilate(1.0 / nrm, u)


def verify_standard_estimates(spec: KernelSpec, samples: int = 10_000, seed: int = 0,
                              dilation: float = 1.0) -> EstimateReport:
    """Empirical suprema of |K(p)| ||p||^s and of the Hölder quotient

        |K(p^{-1} q1) - K(p^{-1} q2)| / max(d(q1,q2)/d(p,q1)^{s+1}, d(q1,q2)/d(p,q2)^{s+1}).

    Both quotients are dilation invariant; ``dilation`` rescales every sample
    before evaluation, which is how that invariance is tested.
    """
    if samples < 1:
        raise InputError("samples must be >= 1")
    space = spec.space
    rng = np.random.default_rng(seed)
    s = spec.s

    p = _unit_sphere(space, rng, samples) * rng.uniform(0.2, 2.0, size=(samples, 1))
    p = space.dilate(dilation, p)
    size_ratio = np.max(np.abs(kernel_at(spec, p)), axis=-1) * space.norm(p) ** s

    base = rng.uniform(-1.0, 1.0, size=(samples, space.dim))
    u1 = _unit_sphere(space, rng, samples)
    u2 = _unit_sphere(space, rng, samples)
    r1 = np.exp(rng.uniform(np.log(0.05), np.log(1.0), size=samples))
    r2 = r1 * np.exp(rng.uniform(np.log(1e-3), np.log(3.0), size=samples))
    q1 = space.mul(base, space.dilate(r1, u1))
    q2 = space.mul(q1, space.dilate(r2, u2))
    base, q1, q2 = (space.dilate(dilation, a) for a in (base, q1, q2))
    d12 = space.dist(q1, q2)
    d1 = space.dist(base, q1)
    d2 = space.dist(base, q2)
    ok = (d12 > 0) & (d1 > 0) & (d2 > 0)
    rejected = int(np.sum(~ok))
    base, q1, q2, d12, d1, d2 = base[ok], q1[ok], q2[ok], d12[ok], d1[ok], d2[ok]
    diff = np.max(np.abs(eval_kernel(spec, base, q1) - eval_kernel(spec, base, q2)), axis=-1)
    bound = np.maximum(d12 / d1 ** (s + 1), d12 / d2 ** (s + 1))
    holder = diff / bound
    return EstimateReport(float(np.max(size_ratio)), float(np.max(holder)) if holder.size else 0.0,
                          samples, seed, rejected, dilation)


@lru_cache(maxsize=64)
def holder_constant(spec: KernelSpec, samples: int = 4000, seed: int = 12345) -> float:
    """Empirical Hölder constant used to calibrate quadrature error indicators."""
    return verify_standard_estimates(spec, samples, seed).max_holder_ratio
