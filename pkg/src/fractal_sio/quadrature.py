"""Kernel integrals against the natural self-similar measure.

Quadrature is one node per cylinder of an antichain frontier: the node is
the cylinder anchor S_v(base_point) and its weight is the cylinder mass.
Two kinds of error control are attached to every estimate:

* heuristic: sum of A_emp * diam_v * mass_v / gap_v^(s+1), with A_emp the
  empirical Hölder constant of the kernel times a safety factor;
* interval: each cylinder box is pushed through the kernel formula in interval
  arithmetic and the per-cylinder enclosures are summed. A sign certified in
  this mode does not depend on any calibrated constant.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, NumericalError, SeparationError, SingularityError
from .group import box_mul, box_norm_lower, box_norm_upper
from .ifs import (ACCEPT, DROP, IFS, REFINE, Budget, NodeSet, SelfSimilarMeasure, _dilate_iv,
                  apply_arrays, build_frontier, children, compose_arrays, fixed_point, node_enclosures,
                  roots_for, separation_report)
from .interval import Interval, _down, _up
from .kernels import KernelSpec, eval_gamma, holder_constant, kernel_at, relative, \
    verify_standard_estimates

SAFETY_FACTOR = 4.0
MODES = ("interval", "heuristic")
SIGNS = {1: "positive", -1: "negative", 0: "none"}


# -- regions ---------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """A union of cylinders: the whole set, C \\ C_w, C_{w^k} \\ C_{w^(k+1)},
    or a single shell C_u \\ C_{u+(i,)}."""

    kind: str = "whole"
    word: tuple = ()
    k: int = 0
    child: int = -1

    def __post_init__(self):
        object.__setattr__(self, "word", tuple(int(i) for i in self.word))
        if self.kind not in ("whole", "complement_of", "annulus", "shell"):
            raise InputError(f"unknown region kind {self.kind!r}")
        if self.kind in ("complement_of", "annulus") and not self.word:
            raise InputError(f"region {self.kind} needs a nonempty word")
        if self.k < 0:
            raise InputError("annulus index k must be >= 0")

    def root_words(self, N: int) -> list:
        if self.kind == "whole":
            return [()]
        if self.kind == "shell":
            return [self.word + (i,) for i in range(N) if i != self.child]
        w = self.word
        pieces = [w[:j] + (i,) for j in range(len(w)) for i in range(N) if i != w[j]]
        if self.kind == "annulus":
            prefix = w * self.k
            pieces = [prefix + p for p in pieces]
        return sorted(pieces)

    def label(self) -> str:
        if self.kind == "whole":
            return "whole"
        if self.kind == "shell":
            return f"shell({_one_based(self.word)},{self.child + 1})"
        if self.kind == "complement_of":
            return f"complement_of({_one_based(self.word)})"
        return f"annulus({_one_based(self.word)},{self.k})"


def whole() -> Region:
    return Region("whole")


def complement_of(word) -> Region:
    return Region("complement_of", tuple(word))


def annulus(word, k: int) -> Region:
    return Region("annulus", tuple(word), int(k))


def shell(prefix, child: int) -> Region:
    return Region("shell", tuple(prefix), 0, int(child))


def _one_based(word) -> str:
    return "(" + ",".join(str(i + 1) for i in word) + ")"


def parse_region(text: str) -> Region:
    """'whole', 'complement:0,1' or 'annulus:0,1:2' (zero-based words)."""
    parts = text.split(":")
    try:
        if parts[0] == "whole" and len(parts) == 1:
            return whole()
        word = tuple(int(v) for v in parts[1].split(",") if v != "")
        if parts[0] == "complement" and len(parts) == 2:
            return complement_of(word)
        if parts[0] == "annulus" and len(parts) == 3:
            return annulus(word, int(parts[2]))
    except (IndexError, ValueError):
        pass
    raise InputError(f"cannot parse region {text!r}")


# -- estimates -------------------------------------------------------------------

@dataclass
class IntegralEstimate:
    value: np.ndarray
    error_indicator: np.ndarray
    depth_used: int
    nodes: int
    certified_sign: list
    mode: str
    enclosure_lo: np.ndarray | None = None
    enclosure_hi: np.ndarray | None = None
    heuristic_error: np.ndarray | None = None
    cylinder_signs: list = field(default_factory=list)
    min_gap: float = math.inf
    a_emp: float = 0.0
    safety_factor: float = SAFETY_FACTOR
    region: str = "whole"

    def to_dict(self) -> dict:
        out = {
            "value": _floats(self.value),
            "error": _floats(self.error_indicator),
            "nodes": int(self.nodes),
            "depth": int(self.depth_used),
            "certified_sign": list(self.certified_sign),
            "mode": self.mode,
            "region": self.region,
            "min_gap": float(self.min_gap),
            "a_emp": float(self.a_emp),
            "safety_factor": float(self.safety_factor),
            "heuristic_error": _floats(self.heuristic_error),
        }
        if self.enclosure_lo is not None:
            out["enclosure"] = [[float(a), float(b)] for a, b in zip(self.enclosure_lo, self.enclosure_hi)]
            out["cylinder_signs"] = self.cylinder_signs
        return out


def _floats(v):
    return None if v is None else [float(a) for a in np.atleast_1d(v)]


def _sum_terms(terms: np.ndarray, threads: int) -> np.ndarray:
    """Column sums; lexicographic single pass, or chunked partials combined with fsum."""
    if threads <= 1 or terms.shape[0] < 2 * threads:
        return np.sum(terms, axis=0)
    chunks = np.array_split(terms, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        partials = list(pool.map(lambda c: np.sum(c, axis=0), chunks))
    return np.array([math.fsum(p[j] for p in partials) for j in range(terms.shape[1])])


def _kernel_terms(spec: KernelSpec, x, anchors, masses, threads: int) -> np.ndarray:
    def work(idx):
        return kernel_at(spec, relative(spec, x, anchors[idx])) * masses[idx, None]

    m = anchors.shape[0]
    if threads <= 1 or m < 2 * threads:
        return work(slice(None))
    parts = np.array_split(np.arange(m), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(work, parts)))


def relative_boxes(ifs: IFS, spec: KernelSpec, x, nodes: NodeSet) -> Interval:
    """Interval boxes containing the relative elements (x^{-1} y or y^{-1} x) for y in C_v."""
    Y = ifs.cylinder_boxes(nodes)
    rel = box_mul(ifs.space, Interval.point(np.broadcast_to(-np.asarray(x, float), Y.lo.shape)), Y)
    return -rel if spec.orientation == "reflected" else rel


def node_gaps(ifs: IFS, x, nodes: NodeSet) -> np.ndarray:
    """Certified lower bounds on dist(x, C_v): the better of the box and ball bounds."""
    space = ifs.space
    Y = ifs.cylinder_boxes(nodes)
    rel = box_mul(space, Interval.point(np.broadcast_to(-np.asarray(x, float), Y.lo.shape)), Y)
    box_gap = box_norm_lower(space, rel)
    anchors = apply_arrays(space, nodes.q, nodes.rho, ifs.base_point)
    ball_gap = (space.dist(x, anchors) - nodes.rho * ifs.base_radius) * (1 - 1e-12)
    return np.maximum(box_gap, ball_gap)


def _node_distance_upper(ifs: IFS, x, nodes: NodeSet) -> np.ndarray:
    space = ifs.space
    Y = ifs.cylinder_boxes(nodes)
    rel = box_mul(space, Interval.point(np.broadcast_to(-np.asarray(x, float), Y.lo.shape)), Y)
    anchors = apply_arrays(space, nodes.q, nodes.rho, ifs.base_point)
    ball = (space.dist(x, anchors) + nodes.rho * ifs.base_radius) * (1 + 1e-12)
    return np.minimum(box_norm_upper(space, rel), ball)


def region_roots(ifs: IFS, region: Region) -> NodeSet:
    """Root cylinders of a region, built shell by shell from their common prefixes."""
    if region.kind == "whole":
        roots = roots_for(ifs, [()])
    else:
        if region.kind == "shell":
            groups = [(region.word, region.child)]
        else:
            w = region.word
            lead = w * region.k if region.kind == "annulus" else ()
            groups = [(lead + w[:j], w[j]) for j in range(len(w))]
        parts = []
        for prefix, skip in groups:
            kids = children(ifs, roots_for(ifs, [prefix]))
            parts.append(kids.take([i for i in range(ifs.N) if i != skip]))
        roots = NodeSet.concat(parts, ifs.space.dim).sorted()
    roots.extra["root_len"] = np.array([len(w) for w in roots.words], dtype=np.int64)
    roots.extra["gap"] = np.full(len(roots), -np.inf)
    return roots


_with_roots = region_roots


def _rel_depth(nodes: NodeSet) -> np.ndarray:
    return np.array([len(w) for w in nodes.words]) - nodes.extra["root_len"]


def _update_gap(ifs, x, nodes):
    gap = np.maximum(node_gaps(ifs, x, nodes), nodes.extra["gap"])
    nodes.extra["gap"] = gap
    return gap


def _frontier(ifs: IFS, measure: SelfSimilarMeasure, x, region: Region, depth: int,
              mass_cutoff: float | None, extra_depth: int, budget: Budget | None) -> NodeSet:
    """Antichain of region cylinders at relative depth ``depth`` (or mass cutoff),
    refined further wherever the cylinder is not yet separated from x."""
    roots = _with_roots(ifs, region)
    max_len = max(len(w) for w in roots.words) + depth + extra_depth

    def classify(nodes):
        gap = _update_gap(ifs, x, nodes)
        if mass_cutoff is None:
            reached = _rel_depth(nodes) >= depth
        else:
            reached = measure.word_masses(nodes.words) <= mass_cutoff * measure.total
        return np.where(reached & (gap > 0), ACCEPT, REFINE)

    accepted, leftover = build_frontier(ifs, roots, classify, max_len, budget)
    if len(leftover):
        raise SingularityError(
            f"region {region.label()} could not be separated from the evaluation point "
            f"after {depth + extra_depth} refinement levels"
        )
    return accepted


def _estimate(ifs: IFS, measure: SelfSimilarMeasure, spec: KernelSpec, x, nodes: NodeSet,
              mode: str, threads: int, region: Region) -> IntegralEstimate:
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}")
    space = ifs.space
    ncomp = spec.num_components
    a_emp = SAFETY_FACTOR * holder_constant(spec)
    if not len(nodes):
        zero = np.zeros(ncomp)
        return IntegralEstimate(zero, zero.copy(), 0, 0, ["none"] * ncomp, mode,
                                zero.copy() if mode == "interval" else None,
                                zero.copy() if mode == "interval" else None,
                                zero.copy(), [{"positive": 0, "negative": 0, "straddle": 0}] * ncomp,
                                a_emp=a_emp, region=region.label())
    masses = measure.word_masses(nodes.words)
    anchors = apply_arrays(space, nodes.q, nodes.rho, ifs.base_point)
    terms = _kernel_terms(spec, x, anchors, masses, threads)
    value = _sum_terms(terms, threads)

    gap = nodes.extra["gap"]
    diam = nodes.rho * ifs.base_diam
    h_err = np.full(ncomp, math.fsum(a_emp * diam * masses / gap ** (spec.s + 1)))
    depth_used = int(np.max(_rel_depth(nodes)))

    est = IntegralEstimate(value, h_err, depth_used, len(nodes), [], mode,
                           heuristic_error=h_err, min_gap=float(np.min(gap)), a_emp=a_emp,
                           region=region.label())
    if mode == "heuristic":
        signs = np.where(np.abs(value) > h_err, np.sign(value), 0).astype(int)
        est.certified_sign = [SIGNS[int(v)] for v in signs]
        return est

    K = kernel_at(spec, relative_boxes(ifs, spec, x, nodes))
    M = Interval(masses)
    contrib = K * M[:, None]
    lo = np.array([math.fsum(contrib.lo[:, j]) for j in range(ncomp)])
    hi = np.array([math.fsum(contrib.hi[:, j]) for j in range(ncomp)])
    # fsum is correctly rounded; one more ulp outward covers it
    lo, hi = _down(lo), _up(hi)
    lo, hi = np.minimum(lo, value), np.maximum(hi, value)
    est.enclosure_lo, est.enclosure_hi = lo, hi
    est.error_indicator = np.maximum(value - lo, hi - value)
    cyl = Interval(contrib.lo, contrib.hi).sign()
    est.cylinder_signs = [
        {"positive": int(np.sum(cyl[:, j] > 0)), "negative": int(np.sum(cyl[:, j] < 0)),
         "straddle": int(np.sum(cyl[:, j] == 0))}
        for j in range(ncomp)
    ]
    signs = np.where(lo > 0, 1, np.where(hi < 0, -1, 0))
    est.certified_sign = [SIGNS[int(v)] for v in signs]
    return est


def integrate_region(ifs: IFS, measure: SelfSimilarMeasure, spec: KernelSpec, x, region=None,
                     depth: int = 4, mode: str = "interval", mass_cutoff: float | None = None,
                     threads: int = 1, extra_depth: int = 30, budget: Budget | None = None,
                     return_nodes: bool = False):
    """Integral of K(x, .) over a region of C against ``measure``.

    ``depth`` is counted relative to the region's root cylinders. Cylinders
    not yet certified apart from x are refined up to ``extra_depth`` further
    levels before a SingularityError is raised.
    """
    if spec.space != ifs.space:
        raise InputError("kernel and IFS live on different spaces")
    region = _coerce_region(region)
    if depth < 0:
        raise InputError("depth must be >= 0")
    x = ifs.space.point(x)
    nodes = _frontier(ifs, measure, x, region, depth, mass_cutoff, extra_depth, budget)
    est = _estimate(ifs, measure, spec, x, nodes, mode, threads, region)
    return (est, nodes) if return_nodes else est


def _coerce_region(region) -> Region:
    if region is None:
        return whole()
    if isinstance(region, str):
        return parse_region(region)
    if not isinstance(region, Region):
        raise InputError(f"bad region {region!r}")
    return region


def pushforward(ifs: IFS, nodes: NodeSet, prefix) -> NodeSet:
    """Nodes S_prefix(C_v): words prefix + v, maps S_prefix o S_v."""
    prefix = tuple(prefix)
    if not prefix:
        return nodes
    space = ifs.space
    base = roots_for(ifs, [prefix])
    m = len(nodes)
    q, rho = compose_arrays(space, base.q[0], base.rho[0], nodes.q, nodes.rho)
    Q0, R0 = node_enclosures(base)
    Qv, Rv = node_enclosures(nodes)
    Qb = Interval(np.broadcast_to(Q0.lo[0], Qv.lo.shape), np.broadcast_to(Q0.hi[0], Qv.hi.shape))
    Rb = Interval(np.broadcast_to(R0.lo[0], (m,)), np.broadcast_to(R0.hi[0], (m,)))
    Q = box_mul(space, Qb, _dilate_iv(space, Rb, Qv))
    R = Rb * Rv
    extra = dict(q_lo=Q.lo, q_hi=Q.hi, rho_lo=R.lo, rho_hi=R.hi,
                 root_len=nodes.extra["root_len"] + len(prefix), gap=np.full(m, -np.inf))
    return NodeSet([prefix + w for w in nodes.words], q, rho, extra)


def telescope_eta(ifs: IFS, measure: SelfSimilarMeasure, spec: KernelSpec, word, k_max: int = 3,
                  depth: int = 4, mode: str = "heuristic", mass_cutoff: float | None = None,
                  threads: int = 1, budget: Budget | None = None, return_estimates: bool = False):
    """eta_k = integral over C_{w^k} \\ C_{w^(k+1)} at x = fixed_point(w), k = 0..k_max.

    The nodes of eta_k are the S_{w^k} images of the nodes of eta_0.
    """
    word = tuple(word)
    if k_max < 0:
        raise InputError("k_max must be >= 0")
    x = fixed_point(ifs, word)
    base_region = complement_of(word)
    nodes0 = _frontier(ifs, measure, x, base_region, depth, mass_cutoff, 30, budget)
    estimates = []
    for k in range(k_max + 1):
        nodes = pushforward(ifs, nodes0, word * k)
        if k:
            _update_gap(ifs, x, nodes)
        estimates.append(_estimate(ifs, measure, spec, x, nodes, mode, threads, annulus(word, k)))
    etas = [e.value for e in estimates]
    return (etas, estimates) if return_estimates else etas


# -- the unboundedness criterion -----------------------------------------------------

@dataclass
class CriterionReport:
    word: tuple
    fixed_point: np.ndarray
    per_component: list
    eta_sequence: list
    estimate: IntegralEstimate
    c_Q: float | None = None

    @property
    def certified(self) -> bool:
        return any(c["verdict"] == "nonzero-certified" for c in self.per_component)

    def to_dict(self) -> dict:
        return {
            "word": list(self.word),
            "word_one_based": [i + 1 for i in self.word],
            "fixed_point": _floats(self.fixed_point),
            "per_component": self.per_component,
            "eta_sequence": [_floats(e) for e in self.eta_sequence],
            "estimate": self.estimate.to_dict(),
            "c_Q": self.c_Q,
        }


def kernel_c_Q(spec: KernelSpec):
    return float(spec.scale) if spec.family == "heisenberg_riesz" else None


def check_unboundedness(ifs: IFS, measure: SelfSimilarMeasure, spec: KernelSpec, words,
                        depth: int = 4, mode: str = "interval", mass_cutoff: float | None = None,
                        k_max: int = 2, components: Sequence[int] | None = None,
                        separation=None, threads: int = 1,
                        budget: Budget | None = None) -> list:
    """Evaluate the criterion integral over C \\ C_w at each word's fixed point."""
    sep = separation if separation is not None else separation_report(ifs)
    if not sep.disjoint:
        raise SeparationError(
            f"inconclusive-separation: certified gap {sep.min_gap:.3e} is not positive"
        )
    comps = list(range(spec.num_components)) if components is None else list(components)
    for c in comps:
        if not 0 <= c < spec.num_components:
            raise InputError(f"component {c} out of range")
    reports = []
    for w in words:
        w = tuple(int(i) for i in w)
        if not w:
            raise InputError("criterion words must be nonempty")
        x = fixed_point(ifs, w)
        est = integrate_region(ifs, measure, spec, x, complement_of(w), depth, mode,
                               mass_cutoff, threads, budget=budget)
        etas = telescope_eta(ifs, measure, spec, w, k_max, depth, "heuristic", mass_cutoff,
                             threads, budget) if k_max >= 0 else []
        per = []
        for c in comps:
            sign = est.certified_sign[c]
            per.append({
                "component": c,
                "component_one_based": c + 1,
                "value": float(est.value[c]),
                "error_indicator": float(est.error_indicator[c]),
                "sign": sign,
                "verdict": "nonzero-certified" if sign != "none" else "inconclusive",
            })
        reports.append(CriterionReport(w, x, per, etas, est, kernel_c_Q(spec)))
    return reports


# -- truncated and maximal operators ---------------------------------------------------

@dataclass
class TruncatedEstimate:
    value: np.ndarray
    error_indicator: float
    nodes: int
    straddlers: int
    eps: float

    def to_dict(self):
        return {"value": _floats(self.value), "error": float(self.error_indicator),
                "nodes": self.nodes, "straddlers": self.straddlers, "eps": self.eps}


def truncated_operator(ifs: IFS, measure: SelfSimilarMeasure, spec: KernelSpec, p, eps: float,
                       depth: int = 4, threads: int = 1, budget: Budget | None = None,
                       return_report: bool = False):
    """T^eps(p): integral of K(p, .) over C minus the open ball B(p, eps).

    Cylinders certified outside the ball are refined to ``depth``; those
    certified inside are dropped; cylinders straddling the sphere at ``depth``
    are left out of the value and charged to the error indicator.
    """
    if not eps > 0:
        raise InputError("eps must be positive")
    space = ifs.space
    p = space.point(p)
    roots = _with_roots(ifs, whole())

    def classify(nodes):
        gap = _update_gap(ifs, p, nodes)
        upper = _node_distance_upper(ifs, p, nodes)
        outside = gap >= eps
        inside = upper < eps
        reached = _rel_depth(nodes) >= depth
        return np.where(inside, DROP, np.where(outside & reached, ACCEPT, REFINE))

    accepted, leftover = build_frontier(ifs, roots, classify, depth, budget)
    ncomp = spec.num_components
    if len(accepted):
        masses = measure.word_masses(accepted.words)
        anchors = apply_arrays(space, accepted.q, accepted.rho, ifs.base_point)
        value = _sum_terms(_kernel_terms(spec, p, anchors, masses, threads), threads)
        a_emp = SAFETY_FACTOR * holder_constant(spec)
        gap = accepted.extra["gap"]
        err = math.fsum(a_emp * accepted.rho * ifs.base_diam * masses / gap ** (spec.s + 1))
    else:
        value = np.zeros(ncomp)
        err = 0.0
    if len(leftover):
        size = SAFETY_FACTOR * _size_constant(spec)
        err += size * eps ** (-spec.s) * math.fsum(measure.word_masses(leftover.words))
    rep = TruncatedEstimate(value, err, len(accepted), len(leftover), float(eps))
    return rep if return_report else value


def _size_constant(spec: KernelSpec) -> float:
    return verify_standard_estimates(spec, 2000, 7).max_size_ratio


def maximal_operator_estimate(ifs: IFS, measure: SelfSimilarMeasure, spec: KernelSpec, p,
                              eps_grid, depth: int = 4, threads: int = 1,
                              budget: Budget | None = None, return_sweep: bool = False):
    """max over the grid of |T^eps(p)| (Euclidean norm over components)."""
    grid = sorted(float(e) for e in eps_grid)
    if not grid:
        raise InputError("eps grid must be nonempty")
    sweep = []
    for e in grid:
        v = truncated_operator(ifs, measure, spec, p, e, depth, threads, budget)
        sweep.append((e, v, float(np.linalg.norm(v))))
    best = max(s[2] for s in sweep)
    return (best, sweep) if return_sweep else best


def locate_chain(ifs: IFS, p, length: int) -> tuple:
    """Greedy word whose cylinders follow p (nearest anchor at each level)."""
    space = ifs.space
    word = ()
    for _ in range(length):
        kids = roots_for(ifs, [word + (i,) for i in range(ifs.N)])
        anchors = apply_arrays(space, kids.q, kids.rho, ifs.base_point)
        word = word + (int(np.argmin(space.dist(p, anchors))),)
    return word


def cylindrical_maximal_estimate(ifs: IFS, measure: SelfSimilarMeasure, spec: KernelSpec, p,
                                 max_depth: int, chain=None, depth: int = 4, threads: int = 1,
                                 budget: Budget | None = None, return_shells: bool = False):
    """max over nested pairs C_v in C_w containing p, |w| < |v| <= max_depth,
    of |integral over C_w \\ C_v of K(p, .)|.

    The chain of cylinders containing p is ``chain`` (a word of length at
    least ``max_depth``) or is located by nearest anchors.
    """
    if max_depth < 1:
        raise InputError("max_depth must be >= 1")
    p = ifs.space.point(p)
    if chain is None:
        chain = locate_chain(ifs, p, max_depth)
    chain = tuple(chain)
    if len(chain) < max_depth:
        raise InputError("chain shorter than max_depth")
    shells = []
    for j in range(max_depth):
        est = integrate_region(ifs, measure, spec, p, shell(chain[:j], chain[j]), depth,
                               "heuristic", threads=threads, budget=budget)
        shells.append(est.value)
    shells = np.array(shells)
    prefix = np.vstack([np.zeros(spec.num_components), np.cumsum(shells, axis=0)])
    best = 0.0
    for a in range(max_depth):
        for b in range(a + 1, max_depth + 1):
            best = max(best, float(np.linalg.norm(prefix[b] - prefix[a])))
    return (best, shells) if return_shells else best


# -- Gamma potentials ----------------------------------------------------------------

def gamma_potential(ifs: IFS, measure: SelfSimilarMeasure, p, depth: int = 3, C_Q: float = 1.0,
                    extra_depth: int = 4, budget: Budget | None = None) -> float:
    """f(p) = integral of Gamma(q^{-1} p) dmu(q) by one node per cylinder.

    Cylinders not separated from p are refined ``extra_depth`` more levels;
    what remains is kept at its anchor unless the anchor coincides with p.
    """
    space = ifs.space
    if not space.is_heisenberg:
        raise InputError("gamma_potential needs a Heisenberg space")
    p = space.point(p)
    nodes = _potential_nodes(ifs, measure, p, depth, extra_depth, budget)
    masses = measure.word_masses(nodes.words)
    anchors = apply_arrays(space, nodes.q, nodes.rho, ifs.base_point)
    keep = np.any(anchors != p, axis=-1)
    vals = eval_gamma(space, C_Q, space.mul(space.inv(anchors[keep]), p))
    return float(np.sum(vals * masses[keep]))


def _potential_nodes(ifs, measure, p, depth, extra_depth, budget):
    roots = _with_roots(ifs, whole())

    def classify(nodes):
        gap = _update_gap(ifs, p, nodes)
        return np.where((_rel_depth(nodes) >= depth) & (gap > 0), ACCEPT, REFINE)

    accepted, leftover = build_frontier(ifs, roots, classify, depth + extra_depth, budget)
    return NodeSet.concat([accepted, leftover], ifs.space.dim).sorted()


def potential_many(ifs: IFS, measure: SelfSimilarMeasure, points, depth: int = 1,
                   C_Q: float = 1.0, chunk: int = 16) -> np.ndarray:
    """Gamma potential at many points using one shared frontier (no adaptivity).

    Everything is first left-translated so the box of C is centred at the
    origin (Gamma(q^{-1} p) is unchanged); the horizontal distances and the
    symplectic terms are then dense matrix products.
    """
    space = ifs.space
    if not space.is_heisenberg:
        raise InputError("potential_many needs a Heisenberg space")
    points = space.point(points).reshape(-1, space.dim)
    roots = _with_roots(ifs, whole())
    nodes, _ = build_frontier(
        ifs, roots, lambda ns: np.where(_rel_depth(ns) >= depth, ACCEPT, REFINE), depth)
    masses = measure.word_masses(nodes.words)
    anchors = apply_arrays(space, nodes.q, nodes.rho, ifs.base_point)
    centre = space.inv(ifs.box.mid)
    A = space.mul(centre, anchors)
    P = space.mul(centre, points)
    n = space.n
    Ah, At = A[:, :2 * n], A[:, -1]
    # sum_i (a_i y_i - b_i x_i) = P' . (-b, a)
    Aj = np.concatenate([-Ah[:, n:], Ah[:, :n]], axis=1)
    a2 = np.sum(Ah * Ah, axis=1)
    expo = (2.0 - space.homogeneous_dim) / 4.0
    out = np.empty(P.shape[0])
    for k in range(0, P.shape[0], chunk):
        Ph, Pt = P[k:k + chunk, :2 * n], P[k:k + chunk, -1]
        # in place: these blocks dominate the cost
        g = Ph @ Ah.T
        g *= -2.0
        g += a2
        g += np.sum(Ph * Ph, axis=1)[:, None]
        g *= g
        t = Ph @ Aj.T
        t *= 2.0
        t += Pt[:, None]
        t -= At
        t *= t
        g += t
        if not np.all(g > 0):
            raise SingularityError("potential evaluated at a quadrature node")
        if expo == -0.5:
            np.sqrt(g, out=g)
            np.divide(masses, g, out=g)
            out[k:k + chunk] = C_Q * np.sum(g, axis=1)
        else:
            out[k:k + chunk] = C_Q * (np.power(g, expo, out=g) @ masses)
    return out


def lipschitz_probe(ifs: IFS, measure: SelfSimilarMeasure, sample_pairs: int = 1000,
                    seed: int = 0, depth: int = 1, step: float = 0.05, C_Q: float = 1.0,
                    clearance: float = 2.0, max_rounds: int = 60) -> float:
    """max of |f(p1) - f(p2)| / d(p1, p2) over random pairs near C.

    p1 is drawn from an enlarged bounding box of C; p2 = p1 . delta_h(u) with
    h = step * base_diam. Pairs closer to a quadrature node than
    ``clearance`` times its cylinder radius are redrawn, so the one-node
    rule is not probed inside the cylinders it lumps together. The padding
    of the box grows whenever a round accepts nothing.
    """
    space = ifs.space
    if sample_pairs < 1:
        raise InputError("sample_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    roots = _with_roots(ifs, whole())
    nodes, _ = build_frontier(
        ifs, roots, lambda ns: np.where(_rel_depth(ns) >= depth, ACCEPT, REFINE), depth)
    anchors = apply_arrays(space, nodes.q, nodes.rho, ifs.base_point)
    radii = nodes.rho * ifs.base_radius * clearance
    clear = _Clearance(space, anchors, radii)
    lo, hi = ifs.box.lo, ifs.box.hi
    pad = 0.25 * (hi - lo) + 1e-3
    h = step * ifs.base_diam
    P1, P2 = [], []
    need = sample_pairs
    for _ in range(max_rounds):
        m = 4 * need
        p1 = rng.uniform(lo - pad, hi + pad, size=(m, space.dim))
        u = rng.normal(size=(m, space.dim))
        u = space.dilate(1.0 / space.norm(u), u)
        p2 = space.mul(p1, space.dilate(h, u))
        ok = clear(p1) & clear(p2)
        if not ok.any():
            pad = 2.0 * pad
            continue
        p1, p2 = p1[ok][:need], p2[ok][:need]
        P1.append(p1)
        P2.append(p2)
        need -= len(p1)
        if need == 0:
            break
    else:
        raise NumericalError(f"could not draw {sample_pairs} pairs clear of the quadrature nodes")
    p1, p2 = np.concatenate(P1), np.concatenate(P2)
    f1 = potential_many(ifs, measure, p1, depth, C_Q)
    f2 = potential_many(ifs, measure, p2, depth, C_Q)
    return float(np.max(np.abs(f1 - f2) / space.dist(p1, p2)))


class _Clearance:
    """Tests d(p, anchor_k) > radius_k for all k.

    The gauge dominates the horizontal Euclidean distance, so a k-d tree on
    horizontal coordinates yields the only anchors that can be too close.
    """

    def __init__(self, space, anchors, radii):
        self.space = space
        self.anchors = anchors
        self.radii = radii
        self.rmax = float(np.max(radii))
        self.h = space.horizontal_dim if space.is_heisenberg else space.dim
        self.tree = cKDTree(anchors[:, :self.h])

    def __call__(self, pts) -> np.ndarray:
        near = self.tree.query_ball_point(pts[:, :self.h], self.rmax)
        counts = np.fromiter((len(v) for v in near), dtype=np.int64, count=len(near))
        ok = np.ones(len(pts), dtype=bool)
        if not counts.sum():
            return ok
        rows = np.repeat(np.arange(len(pts)), counts)
        cols = np.concatenate([np.asarray(v, dtype=np.int64) for v in near if len(v)])
        d = self.space.dist(self.anchors[cols], pts[rows])
        bad = rows[d <= self.radii[cols]]
        ok[bad] = False
        return ok


# -- AD-regularity diagnostic ------------------------------------------------------------

def ad_regularity_ratios(ifs: IFS, measure: SelfSimilarMeasure, centres, radii,
                         depth: int = 4) -> np.ndarray:
    """mu(B(x, r)) / r^s estimated from a depth-``depth`` antichain (counting anchors)."""
    space = ifs.space
    roots = _with_roots(ifs, whole())
    nodes, _ = build_frontier(
        ifs, roots, lambda ns: np.where(_rel_depth(ns) >= depth, ACCEPT, REFINE), depth)
    masses = measure.word_masses(nodes.words)
    anchors = apply_arrays(space, nodes.q, nodes.rho, ifs.base_point)
    centres = space.point(centres).reshape(-1, space.dim)
    out = np.empty((centres.shape[0], len(radii)))
    for a, c in enumerate(centres):
        d = space.dist(c, anchors)
        for b, r in enumerate(radii):
            out[a, b] = masses[d <= r].sum() / r ** measure.s
    return out
