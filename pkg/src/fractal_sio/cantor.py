"""The removable Heisenberg Cantor set C_{r,N} and its certificate pipeline.

Maps: S_0 = delta_r and, for i = 0..N^2/2-1 and j = i N^{2n} + 1..(i+1) N^{2n},
S_j = tau_{(z_k, 1/2 + i/N^2)} o delta_r with k = j mod N^{2n}, where the
residue 0 stands for k = N^{2n}. The points z_1..z_{N^{2n}} run through the
grid {0, 1/N, ..., (N-1)/N}^{2n} in base-N digit order of k - 1, first axis
most significant.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError, ParameterError, SeparationError
from .group import GroupSpace
from .ifs import IFS, Budget, SelfSimilarMeasure, Similarity, separation_report, similarity_dimension
from .kernels import heisenberg_riesz
from .quadrature import check_unboundedness, complement_of, region_roots

RESIDUE_CONVENTION = "residue 0 of j mod N^(2n) is read as z-index N^(2n)"


@dataclass(frozen=True)
class CantorParams:
    n: int
    N: int
    r: float

    def __post_init__(self):
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"n must be a positive integer, got {self.n!r}")
        if isinstance(self.N, bool) or int(self.N) != self.N or self.N < 2 or self.N % 2:
            raise ParameterError(f"N must be an even positive integer, got {self.N!r}")
        if not 0 < self.r < 1:
            raise ParameterError(f"r must lie in (0, 1), got {self.r!r}")

    @property
    def space(self) -> GroupSpace:
        return GroupSpace.heisenberg(self.n)

    @property
    def boxes(self) -> int:
        return self.N ** (2 * self.n)

    @property
    def map_count(self) -> int:
        return self.N ** (2 * self.n + 2) // 2 + 1

    def z(self, k) -> np.ndarray:
        """Grid points z_k for one-based k in 1..N^(2n)."""
        k = np.asarray(k, dtype=np.int64)
        if np.any((k < 1) | (k > self.boxes)):
            raise InputError("z index out of range")
        rem = k - 1
        digits = []
        for _ in range(2 * self.n):
            digits.append(rem % self.N)
            rem = rem // self.N
        return np.stack(digits[::-1], axis=-1) / self.N

    def all_z(self) -> np.ndarray:
        return self.z(np.arange(1, self.boxes + 1))

    def z_index(self, j) -> np.ndarray:
        """One-based z-index of map j >= 1."""
        res = np.asarray(j, dtype=np.int64) % self.boxes
        return np.where(res == 0, self.boxes, res)

    def level(self, j) -> np.ndarray:
        return (np.asarray(j, dtype=np.int64) - 1) // self.boxes

    def translations(self) -> np.ndarray:
        n = self.n
        j = np.arange(1, self.map_count)
        out = np.zeros((self.map_count, 2 * n + 1))
        out[1:, :2 * n] = self.z(self.z_index(j))
        out[1:, 2 * n] = 0.5 + self.level(j) / self.N ** 2
        return out

    def to_dict(self) -> dict:
        return {"n": self.n, "N": self.N, "r": self.r, "maps": self.map_count,
                "z_convention": RESIDUE_CONVENTION}


def inequality_checks(n: int, N: int, r: float, positivity: bool = True) -> list:
    checks = [
        {"name": "r < 1/N", "lhs": r, "rhs": 1.0 / N, "pass": bool(r < 1.0 / N)},
        {"name": "1/N < 1/2", "lhs": 1.0 / N, "rhs": 0.5, "pass": bool(1.0 / N < 0.5)},
    ]
    if positivity:
        checks.append({"name": "r < 1/(16n)", "lhs": r, "rhs": 1.0 / (16 * n),
                       "pass": bool(r < 1.0 / (16 * n))})
    return checks


def build_similarities(params: CantorParams) -> IFS:
    """The IFS of the construction. Raises ParameterError when r >= 1/N."""
    if not params.r < 1.0 / params.N:
        raise ParameterError(f"violated inequality r < 1/N: r={params.r}, 1/N={1.0 / params.N}")
    tr = params.translations()
    maps = [Similarity(tuple(t), params.r) for t in tr]
    return IFS(params.space, maps, base_point=np.zeros(2 * params.n + 1))


def solve_r_for_dimension(n: int, N: int, target_a: float | None = None) -> dict:
    """r with similarity dimension target_a (default 2n+1) and itemized feasibility."""
    if target_a is None:
        target_a = 2 * n + 1
    if not target_a > 0:
        raise InputError("target_a must be positive")
    if int(n) != n or n < 1 or int(N) != N or N < 2 or N % 2:
        raise InputError("n must be a positive integer and N an even positive integer")
    M = N ** (2 * n + 2) // 2 + 1
    r = float(M ** (-1.0 / target_a))
    codim_one = math.isclose(target_a, 2 * n + 1, rel_tol=0, abs_tol=1e-12)
    checks = inequality_checks(n, N, r, positivity=codim_one)
    return {"n": n, "N": N, "target_a": float(target_a), "maps": M, "r": r,
            "feasible": all(c["pass"] for c in checks), "checks": checks}


# -- the separating function phi --------------------------------------------------

@dataclass
class PhiField:
    n: int
    N: int
    r: float
    resolution: int
    values: np.ndarray
    blend_eps: float
    residual: float
    sup_norm: float
    iterations: int
    residual_history: list = field(default_factory=list)
    offgrid_residual: float = float("nan")
    z: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return 2 * self.n

    def grid_points(self) -> np.ndarray:
        return _grid(self.resolution, self.dim)

    def evaluate(self, w) -> np.ndarray:
        """Multilinear interpolation of the grid values on [0,1]^(2n)."""
        return _interp(self.values.reshape(-1), self.resolution, self.dim, np.asarray(w, float))

    def evaluate_recursive(self, w, levels: int | None = None) -> np.ndarray:
        """The continuous fixed point phi = L(T phi), unrolled ``levels`` times.

        Truncation error is at most r^(2 levels) * 8nr.
        """
        if levels is None:
            levels = max(1, math.ceil(math.log(1e-17) / math.log(self.r ** 2)))
        geo = _BoxGeometry(self.z, self.r, self.N, self.blend_eps)
        w = np.asarray(w, dtype=float)
        acc = np.zeros(w.shape[:-1])
        coef = np.ones(w.shape[:-1])
        for _ in range(levels):
            zj, xt, blend = geo.project(w)
            acc = acc + coef * blend * _h(zj, xt, self.n)
            coef = coef * blend * self.r ** 2
            w = (xt - zj) / self.r
        return acc

    def to_dict(self, include_values: bool = False) -> dict:
        out = {
            "n": self.n, "N": self.N, "r": self.r, "resolution": self.resolution,
            "blend_eps": self.blend_eps, "blend": "linear ramp to 0 at distance blend_eps from B",
            "residual": self.residual, "offgrid_residual": self.offgrid_residual,
            "sup_norm": self.sup_norm, "iterations": self.iterations,
            "residual_history": list(self.residual_history),
        }
        if include_values:
            out["values"] = self.values.tolist()
        return out


def _grid(res: int, dim: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, res)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _stencil(res: int, dim: int, u: np.ndarray):
    """Flat indices and weights of the multilinear stencil at points u in [0,1]^dim."""
    t = np.clip(u, 0.0, 1.0) * (res - 1)
    i0 = np.minimum(np.floor(t).astype(np.int64), res - 2)
    frac = t - i0
    idx, wts = [], []
    for corner in range(2 ** dim):
        bits = [(corner >> a) & 1 for a in range(dim)]
        flat = np.zeros(u.shape[:-1], dtype=np.int64)
        wt = np.ones(u.shape[:-1])
        for a in range(dim):
            flat = flat * res + i0[..., a] + bits[a]
            wt = wt * (frac[..., a] if bits[a] else 1.0 - frac[..., a])
        idx.append(flat)
        wts.append(wt)
    return np.stack(idx, -1), np.stack(wts, -1)


def _interp(values, res, dim, u):
    idx, wts = _stencil(res, dim, u)
    return np.sum(values[idx] * wts, axis=-1)


def _h(z, w, n):
    """-2 sum_i (z_i w_{i+n} - z_{i+n} w_i)."""
    return -2.0 * np.sum(z[..., :n] * w[..., n:] - z[..., n:] * w[..., :n], axis=-1)


class _BoxGeometry:
    """Nearest-box projection for the product family Q_j = z_j + [0, r]^(2n)."""

    def __init__(self, z: np.ndarray, r: float, N: int, eps: float):
        self.z = z
        self.r = r
        self.N = N
        self.eps = eps
        self.full_grid = z.shape[0] == N ** z.shape[1] and len({tuple(v) for v in z}) == z.shape[0]

    def project(self, w):
        """(z of the nearest box, nearest point x~ of B, blend weight)."""
        if self.full_grid:
            l0 = np.clip(np.floor(w * self.N), 0, self.N - 1)
            best_z, best_d = None, None
            for shift in (-1, 0):
                l = np.clip(l0 + shift, 0, self.N - 1)
                zc = l / self.N
                d = np.maximum(np.maximum(zc - w, w - zc - self.r), 0.0)
                if best_z is None:
                    best_z, best_d = zc, d
                else:
                    take = d < best_d
                    best_z = np.where(take, zc, best_z)
                    best_d = np.where(take, d, best_d)
            zj = best_z
        else:
            lo = self.z
            d_all = np.maximum(np.maximum(lo - w[..., None, :], w[..., None, :] - lo - self.r), 0.0)
            k = np.argmin(np.sum(d_all * d_all, axis=-1), axis=-1)
            zj = lo[k]
        xt = np.clip(w, zj, zj + self.r)
        dist = np.sqrt(np.sum((w - xt) ** 2, axis=-1))
        blend = np.maximum(0.0, (self.eps - dist) / self.eps)
        return zj, xt, blend


def _phi_operator(params: CantorParams, resolution: int, z: np.ndarray):
    """Affine grid map T(phi) = sum_k W[:, k] phi[I[:, k]] + c and the B-mask."""
    dim = 2 * params.n
    r = params.r
    distinct = np.unique(z, axis=0)
    if distinct.shape[0] > 1:
        gaps = _min_box_gap(distinct, r)
        eps = 0.5 * gaps
    else:
        eps = 0.5 * (1.0 / params.N - r)
    geo = _BoxGeometry(distinct, r, params.N, eps)
    pts = _grid(resolution, dim)
    zj, xt, blend = geo.project(pts)
    u = (xt - zj) / r
    idx, wts = _stencil(resolution, dim, u)
    W = wts * (blend * r * r)[:, None]
    c = blend * _h(zj, xt, params.n)
    in_B = np.all((pts >= zj) & (pts <= zj + r), axis=-1)
    return idx, W, c, in_B, eps, geo


def _min_box_gap(z: np.ndarray, r: float) -> float:
    """Smallest Euclidean gap between distinct boxes z + [0,r]^dim."""
    if z.shape[0] > 4096:
        # product grid: the nearest neighbours differ by one grid step
        step = np.min(np.diff(np.unique(z[:, 0])))
        return float(step - r)
    d = np.maximum(np.abs(z[:, None, :] - z[None, :, :]) - r, 0.0)
    g = np.sqrt(np.sum(d * d, axis=-1))
    g[np.diag_indices_from(g)] = np.inf
    return float(np.min(g))


def solve_phi(params: CantorParams, resolution: int | None = None, tol: float = 1e-13,
              max_iter: int = 200, z_override=None, offgrid_samples: int = 2000,
              seed: int = 0) -> PhiField:
    """Grid fixed point of phi = L(r^2 phi((w - z_j)/r) + h_j(w)) by synchronous sweeps."""
    if resolution is None:
        resolution = 64 if params.n == 1 else 12
    if resolution < 2:
        raise InputError("resolution must be >= 2")
    z = params.all_z() if z_override is None else np.asarray(z_override, float).reshape(-1, 2 * params.n)
    idx, W, c, in_B, eps, geo = _phi_operator(params, resolution, z)
    phi = np.zeros(idx.shape[0])
    history = []
    initial = None
    for it in range(1, max_iter + 1):
        new = np.sum(W * phi[idx], axis=1) + c
        res = float(np.max(np.abs(phi - new)[in_B])) if in_B.any() else 0.0
        history.append(res)
        phi = new
        if initial is None:
            initial = max(res, tol)
        if res < tol:
            break
    else:
        raise NumericalError(f"phi iteration did not reach tol={tol} in {max_iter} sweeps")
    after = np.sum(W * phi[idx], axis=1) + c
    residual = float(np.max(np.abs(phi - after)[in_B])) if in_B.any() else 0.0
    field_ = PhiField(params.n, params.N, params.r, resolution,
                      phi.reshape((resolution,) * (2 * params.n)), float(eps), residual,
                      float(np.max(np.abs(phi))), it, history, z=geo.z)
    field_.offgrid_residual = _offgrid_residual(field_, offgrid_samples, seed)
    return field_


def _offgrid_residual(phi: PhiField, samples: int, seed: int) -> float:
    """Fixed-point defect at random points of B using the interpolated field."""
    if samples <= 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    z = phi.z[rng.integers(0, phi.z.shape[0], size=samples)]
    w = z + phi.r * rng.uniform(0, 1, size=z.shape)
    lhs = phi.evaluate(w)
    rhs = phi.r ** 2 * phi.evaluate((w - z) / phi.r) + _h(z, w, phi.n)
    return float(np.max(np.abs(lhs - rhs)))


def grid_residual(phi: PhiField, params: CantorParams) -> float:
    """Max over grid points w in Q_j of |phi(w) - r^2 phi((w - z_j)/r) + 2 sum(...)|."""
    z = phi.z if phi.z is not None else params.all_z()
    pts = phi.grid_points()
    geo = _BoxGeometry(np.unique(z, axis=0), params.r, params.N, phi.blend_eps)
    zj, xt, _ = geo.project(pts)
    in_B = np.all((pts >= zj) & (pts <= zj + params.r), axis=-1)
    if not in_B.any():
        return 0.0
    w, zj = pts[in_B], zj[in_B]
    vals = phi.values.reshape(-1)
    lhs = vals[in_B]
    rhs = params.r ** 2 * _interp(vals, phi.resolution, phi.dim, (w - zj) / params.r) + _h(zj, w, params.n)
    return float(np.max(np.abs(lhs - rhs)))


def b_mask(phi: PhiField, params: CantorParams) -> np.ndarray:
    z = phi.z if phi.z is not None else params.all_z()
    pts = phi.grid_points()
    geo = _BoxGeometry(np.unique(z, axis=0), params.r, params.N, phi.blend_eps)
    zj, _, _ = geo.project(pts)
    return np.all((pts >= zj) & (pts <= zj + params.r), axis=-1)


def verify_phi(phi: PhiField, params: CantorParams, tol: float = 1e-10) -> dict:
    residual = grid_residual(phi, params)
    vals = phi.values.reshape(-1)
    sup = float(np.max(np.abs(vals)))
    bound = 8 * params.n * params.r
    mask = b_mask(phi, params)
    min_B = float(np.min(vals[mask])) if mask.any() else 0.0
    positivity = bool(min_B > -0.5)
    return {
        "residual": residual,
        "residual_tol": tol,
        "sup_norm": sup,
        "bound_8nr": bound,
        "bound_4nr_over": 4 * params.n * params.r / (1 - params.r ** 2),
        "min_on_B": min_B,
        "positivity": positivity,
        "pass": bool(residual < tol and sup <= bound and positivity),
    }


def region_membership(phi: PhiField, p, method: str = "interpolated", tol: float = 0.0):
    """p' in [0,1]^(2n) and phi(p') <= p_t <= phi(p') + 1 (vectorised)."""
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 2 * phi.n + 1:
        raise InputError("point dimension does not match the field")
    h = p[..., :-1]
    inside = np.all((h >= 0) & (h <= 1), axis=-1)
    hc = np.clip(h, 0, 1)
    f = phi.evaluate(hc) if method == "interpolated" else phi.evaluate_recursive(hc)
    t = p[..., -1]
    out = inside & (f - tol <= t) & (t <= f + 1 + tol)
    return bool(out) if out.ndim == 0 else out


def sample_region(phi: PhiField, size: int, rng, method: str = "recursive") -> np.ndarray:
    h = rng.uniform(0, 1, size=(size, 2 * phi.n))
    f = phi.evaluate(h) if method == "interpolated" else phi.evaluate_recursive(h)
    return np.column_stack([h, f + rng.uniform(0, 1, size=size)])


def nesting_check(phi: PhiField, ifs: IFS, params: CantorParams, samples: int = 10_000,
                  seed: int = 0, method: str = "recursive", tol: float = 1e-12) -> dict:
    """Sampled S_j(R) in R and disjointness of S_j(R), S_k(R) for nearby k."""
    rng = np.random.default_rng(seed)
    space = ifs.space
    p = sample_region(phi, samples, rng, method)
    j = rng.integers(0, ifs.N, size=samples)
    j[:min(samples, 16)] = 0
    img = space.mul(ifs.translations[j], space.dilate(ifs.ratios[j], p))
    inside = region_membership(phi, img, method, tol)
    # a point of S_j(R) lies in S_k(R) iff it sits in k's slab over Q_k
    hits = 0
    checked = 0
    boxes = params.boxes
    for k_shift in (-boxes, boxes):
        k = j + k_shift
        ok = (j > 0) & (k >= 1) & (k < ifs.N)
        hits += _slab_hits(phi, params, ifs, img[ok], k[ok], method, tol)
        checked += int(ok.sum())
    zero = j > 0
    hits += _slab_hits(phi, params, ifs, img[zero], np.zeros(int(zero.sum()), dtype=np.int64), method, tol)
    checked += int(zero.sum())
    return {"samples": samples, "method": method, "nesting_violations": int(np.sum(~inside)),
            "disjointness_pairs": checked, "disjointness_violations": int(hits),
            "pass": bool(inside.all() and hits == 0)}


def _slab_hits(phi, params, ifs, x, k, method, tol) -> int:
    if not len(k):
        return 0
    r = params.r
    q = ifs.translations[k]
    h = x[:, :-1]
    in_box = np.all((h >= q[:, :-1] - tol) & (h <= q[:, :-1] + r + tol), axis=-1)
    f = phi.evaluate(np.clip(h, 0, 1)) if method == "interpolated" else phi.evaluate_recursive(np.clip(h, 0, 1))
    off = q[:, -1]
    t = x[:, -1]
    in_slab = (f + off - tol <= t) & (t <= f + off + r * r + tol)
    return int(np.sum(in_box & in_slab))


# -- sign certificate on cylinder boxes ---------------------------------------------------

def numerator_certificate(ifs: IFS, params: CantorParams, depth: int = 0,
                          budget: Budget | None = None) -> dict:
    """Interval bounds of q_{1+n}|q'|^2 + q_1 q_t and of q_t over the cylinder
    boxes of C minus S_0(C) at relative depth ``depth``."""
    n = params.n
    roots = region_roots(ifs, complement_of((0,)))
    from .ifs import build_frontier, ACCEPT, REFINE
    nodes, _ = build_frontier(
        ifs, roots,
        lambda ns: np.where(np.array([len(w) for w in ns.words]) - ns.extra["root_len"] >= depth,
                            ACCEPT, REFINE),
        1 + depth, budget)
    Y = ifs.cylinder_boxes(nodes)
    h2 = None
    for i in range(2 * n):
        t = Y[..., i].square()
        h2 = t if h2 is None else h2 + t
    num = Y[..., n] * h2 + Y[..., 0] * Y[..., 2 * n]
    last = Y[..., 2 * n]
    anchors = ifs.space.mul(nodes.q, ifs.space.dilate(nodes.rho, ifs.base_point))
    return {
        "cylinders": len(nodes),
        "depth": depth,
        "numerator_strictly_positive": int(np.sum(num.lo > 0)),
        "numerator_nonnegative": int(np.sum(num.lo >= 0)),
        "numerator_touching_zero": int(np.sum((num.lo <= 0) & (num.hi >= 0))),
        "numerator_negative": int(np.sum(num.hi < 0)),
        "numerator_min_lower": float(np.min(num.lo)),
        "last_coordinate_positive": int(np.sum(last.lo > 0)),
        "anchor_last_coordinate_min": float(np.min(anchors[:, -1])),
        "all_strict": bool(np.all(num.lo > 0) and np.all(last.lo > 0)),
        "all_nonnegative": bool(np.all(num.lo >= 0) and np.all(last.lo > 0)),
        "some_strict": bool(np.any(num.lo > 0)),
    }


# -- the end-to-end pipeline ---------------------------------------------------------------

STAGES = ("build_similarities", "separation", "phi", "numerator_sign", "criterion")


def removability_pipeline(n: int = 1, N: int = 18, budget: float = 1e6, target_a=None,
                          resolution: int | None = None, c_Q: float | None = None,
                          nesting_samples: int = 10_000, seed: int = 0,
                          timing: bool = False, dry_run: bool = False) -> dict:
    """Run the five stages in order and stop at the first failing one."""
    report = {"n": n, "N": N, "budget": budget, "target_a": target_a, "seed": seed,
              "z_convention": RESIDUE_CONVENTION, "stages": [], "criterion_certified": False,
              "stopped_at": None}
    if dry_run:
        report["stages"] = [{"stage": s, "status": "planned"} for s in STAGES]
        report["dry_run"] = True
        return report

    def stage(name, status, **details):
        entry = {"stage": name, "status": status, **details}
        report["stages"].append(entry)
        if status == "fail" and report["stopped_at"] is None:
            report["stopped_at"] = name
        return entry

    def clock():
        return time.perf_counter()

    t0 = clock()
    dim_info = solve_r_for_dimension(n, N, target_a)
    report["dimension"] = dim_info
    if not dim_info["feasible"]:
        failing = [c["name"] for c in dim_info["checks"] if not c["pass"]]
        stage("build_similarities", "fail", reason="infeasible parameters", failing=failing)
        return report
    params = CantorParams(n, N, dim_info["r"])
    ifs = build_similarities(params)
    measure = SelfSimilarMeasure(ifs)
    stage("build_similarities", "pass", maps=ifs.N, r=params.r, dimension=measure.s,
          **_t(timing, t0, clock()))

    t0 = clock()
    sep = separation_report(ifs)
    stage("separation", "pass" if sep.disjoint else "fail", report=sep.to_dict(), **_t(timing, t0, clock()))
    if not sep.disjoint:
        return report

    t0 = clock()
    phi = solve_phi(params, resolution)
    ver = verify_phi(phi, params)
    nest = nesting_check(phi, ifs, params, nesting_samples, seed)
    ok = ver["pass"] and nest["pass"]
    stage("phi", "pass" if ok else "fail", field=phi.to_dict(), verify=ver, nesting=nest,
          **_t(timing, t0, clock()))
    if not ok:
        return report

    t0 = clock()
    nodes_per_level = ifs.N - 1
    depth = 0
    while nodes_per_level * ifs.N ** (depth + 1) <= budget:
        depth += 1
    cert = numerator_certificate(ifs, params, depth)
    # the integrand has one sign when the numerator is >= 0 on every box and > 0 on some
    ok = cert["all_nonnegative"] and cert["some_strict"]
    stage("numerator_sign", "pass" if ok else "fail", **cert, **_t(timing, t0, clock()))
    if not ok:
        return report

    t0 = clock()
    spec = heisenberg_riesz(n, c_Q, orientation="reflected")
    try:
        crit = check_unboundedness(ifs, measure, spec, [(0,)], depth=depth, mode="interval",
                                   k_max=2, components=[n], separation=sep)[0]
    except SeparationError as exc:
        stage("criterion", "fail", reason=str(exc))
        return report
    comp = crit.per_component[0]
    expected = "positive" if spec.scale < 0 else "negative"
    certified = comp["verdict"] == "nonzero-certified"
    stage("criterion", "pass" if certified else "fail", report=crit.to_dict(),
          expected_sign=expected, **_t(timing, t0, clock()))
    report["criterion_certified"] = certified
    report["certificate_sign"] = comp["sign"]
    report["sign_matches_minus_sign_c_Q"] = comp["sign"] == expected
    report["c_Q"] = spec.scale
    report["component"] = n
    report["component_one_based"] = n + 1
    return report


def _t(enabled, a, b):
    return {"seconds": round(b - a, 3)} if enabled else {}
