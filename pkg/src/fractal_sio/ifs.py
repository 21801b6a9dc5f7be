"""Iterated function systems of similarities S_i = tau_{q_i} o delta_{r_i}.

Words are zero-based tuples of map indices. A word w = (i_1, ..., i_k) names
the composition S_w = S_{i_1} o ... o S_{i_k}, computed by a left fold so that
breadth-first enumeration (parent composed with one more map) reproduces
:func:`word_compose` bit for bit.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import BudgetError, InputError
from .group import GroupSpace, ball_box, box_dilate, box_mul, box_norm_lower
from .interval import Interval

DEFAULT_NODE_BUDGET = 50_000_000
EPS = np.finfo(float).eps


def node_budget() -> int:
    raw = os.environ.get("FRACTAL_SIO_NODE_BUDGET")
    if raw is None:
        return DEFAULT_NODE_BUDGET
    try:
        val = int(float(raw))
    except ValueError as exc:
        raise InputError(f"FRACTAL_SIO_NODE_BUDGET must be numeric, got {raw!r}") from exc
    if val < 1:
        raise InputError("FRACTAL_SIO_NODE_BUDGET must be positive")
    return val


@dataclass(frozen=True)
class Similarity:
    translation: tuple
    ratio: float

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if not (0.0 < self.ratio < 1.0):
            raise InputError(f"similarity ratio must lie in (0, 1), got {self.ratio}")

    @property
    def q(self) -> np.ndarray:
        return np.array(self.translation)


def compose_arrays(space: GroupSpace, q_a, r_a, q_b, r_b):
    """Translation and ratio of (tau_{q_a} delta_{r_a}) o (tau_{q_b} delta_{r_b})."""
    r_a = np.asarray(r_a, dtype=float)
    return space.mul(q_a, space.dilate(r_a, q_b)), r_a * r_b


def apply_arrays(space: GroupSpace, q, r, p):
    return space.mul(q, space.dilate(r, p))


def similarity_apply(space: GroupSpace, S: Similarity, p) -> np.ndarray:
    return apply_arrays(space, S.q, S.ratio, space.point(p))


class IFS:
    """A finite family of contracting similarities on a metric group.

    ``base_point`` defaults to the fixed point of map 0, so it lies in the
    invariant set C. ``base_radius`` bounds sup_{y in C} d(base_point, y) and
    ``base_diam = 2 * base_radius`` bounds diam(C). ``box`` is a coordinate
    box containing C.
    """

    def __init__(self, space: GroupSpace, maps: Sequence[Similarity], base_point=None,
                 tighten_levels: int = 3):
        if len(maps) < 2:
            raise InputError("an IFS needs at least two maps")
        self.space = space
        self.maps = list(maps)
        self.translations = np.array([m.translation for m in self.maps], dtype=float)
        if self.translations.shape != (len(self.maps), space.dim):
            raise InputError(f"map translations must have {space.dim} coordinates")
        self.ratios = np.array([m.ratio for m in self.maps], dtype=float)
        if base_point is None:
            base_point = fixed_point_of(space, self.translations[0], self.ratios[0])
        self.base_point = space.point(base_point).astype(float)
        self.base_radius = self._radius_bound(tighten_levels)
        self.base_diam = 2.0 * self.base_radius
        self.box = self._invariant_box()

    @property
    def N(self) -> int:
        return len(self.maps)

    @classmethod
    def from_arrays(cls, space, translations, ratios, **kw) -> "IFS":
        translations = np.asarray(translations, dtype=float).reshape(-1, space.dim)
        ratios = np.broadcast_to(np.asarray(ratios, dtype=float), (translations.shape[0],))
        maps = [Similarity(tuple(t), float(r)) for t, r in zip(translations, ratios)]
        return cls(space, maps, **kw)

    def to_config(self) -> dict:
        return {
            "space": self.space.to_config(),
            "maps": [{"q": list(m.translation), "r": m.ratio} for m in self.maps],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "IFS":
        try:
            space = GroupSpace.from_config(cfg["space"])
            maps = [Similarity(tuple(m["q"]), float(m["r"])) for m in cfg["maps"]]
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad IFS config: {exc}") from exc
        return cls(space, maps)

    # -- geometry bounds ----------------------------------------------------

    def _radius_bound(self, levels: int) -> float:
        space = self.space
        x0 = self.base_point
        d1 = space.dist(x0, apply_arrays(space, self.translations, self.ratios, x0))
        R = float(np.max(d1 / (1.0 - self.ratios)))
        # R <- max_v d(x0, S_v x0) + rho_v R stays an upper bound at every level
        q, rho = self.translations, self.ratios
        for _ in range(max(levels - 1, 0)):
            if q.shape[0] * self.N > 200_000:
                break
            q, rho = compose_arrays(space, q[:, None, :], rho[:, None],
                                    self.translations[None, :, :], self.ratios[None, :])
            q = q.reshape(-1, space.dim)
            rho = rho.reshape(-1)
            dv = space.dist(x0, apply_arrays(space, q, rho, x0))
            for _ in range(60):
                R_new = float(np.max(dv + rho * R))
                if R_new >= R:
                    break
                R = R_new
        return R * (1.0 + 64 * EPS)

    def _invariant_box(self) -> Interval:
        """Iterate B <- B & hull(S_i(B)) from a ball around the base point.

        C stays inside B at every step; iteration runs until B is stationary
        so that extreme coordinates shrink all the way to their limits.
        """
        box = ball_box(self.space, self.base_point, self.base_radius)
        lo, hi = box.lo, box.hi
        for _ in range(5000):
            hlo, hhi = self._image_hull(lo, hi)
            new_lo, new_hi = np.maximum(lo, hlo), np.minimum(hi, hhi)
            if np.array_equal(new_lo, lo) and np.array_equal(new_hi, hi):
                break
            lo, hi = new_lo, new_hi
        return Interval(lo, hi)

    def _image_hull(self, lo, hi):
        """Outward bounds of hull(S_i([lo, hi])) over all maps.

        Each endpoint is evaluated in floating point and then moved outward
        by 8 eps times the sum of the magnitudes of its terms, which bounds
        the rounding of the few operations involved.
        """
        space = self.space
        q = self.translations
        r = self.ratios[:, None]
        h = space.horizontal_dim
        Dlo, Dhi = r * lo[:h], r * hi[:h]
        out_lo, out_hi = np.empty_like(lo), np.empty_like(hi)
        a_lo, a_hi = q[:, :h] + Dlo, q[:, :h] + Dhi
        m_lo = np.abs(q[:, :h]) + np.abs(Dlo)
        m_hi = np.abs(q[:, :h]) + np.abs(Dhi)
        out_lo[:h] = np.min(a_lo - 8 * EPS * m_lo, axis=0)
        out_hi[:h] = np.max(a_hi + 8 * EPS * m_hi, axis=0)
        if space.is_heisenberg:
            n = space.n
            r2 = (r * r)[:, 0]
            t_lo, t_hi = r2 * lo[-1], r2 * hi[-1]
            v_lo = q[:, -1] + t_lo
            v_hi = q[:, -1] + t_hi
            mag_lo = np.abs(q[:, -1]) + np.abs(t_lo)
            mag_hi = np.abs(q[:, -1]) + np.abs(t_hi)
            for k in range(n):
                # -2 q_k D_{k+n} + 2 q_{k+n} D_k, each linear in one D coordinate
                for coef, j in ((-2.0 * q[:, k], k + n), (2.0 * q[:, k + n], k)):
                    e1, e2 = coef * Dlo[:, j], coef * Dhi[:, j]
                    lo_term, hi_term = np.minimum(e1, e2), np.maximum(e1, e2)
                    v_lo = v_lo + lo_term
                    v_hi = v_hi + hi_term
                    mag_lo = mag_lo + np.abs(lo_term)
                    mag_hi = mag_hi + np.abs(hi_term)
            c = 8 * (2 * n + 2) * EPS
            out_lo[-1] = np.min(v_lo - c * mag_lo)
            out_hi[-1] = np.max(v_hi + c * mag_hi)
        return out_lo, out_hi

    def map_boxes(self, box: Interval) -> Interval:
        """Boxes S_i(box) for every map (shape (N, dim))."""
        space = self.space
        B = Interval(np.broadcast_to(box.lo, (self.N, space.dim)),
                     np.broadcast_to(box.hi, (self.N, space.dim)))
        return box_mul(space, Interval.point(self.translations),
                       _dilate_iv(space, Interval.point(self.ratios), B))

    def cylinder_boxes(self, nodes: "NodeSet") -> Interval:
        """Boxes containing C_v = S_v(C), built from rigorous enclosures of
        the composed translation and ratio carried by ``nodes``."""
        Q, R = node_enclosures(nodes)
        m = len(nodes)
        B = Interval(np.broadcast_to(self.box.lo, (m, self.space.dim)),
                     np.broadcast_to(self.box.hi, (m, self.space.dim)))
        return box_mul(self.space, Q, _dilate_iv(self.space, R, B))


def word_compose(ifs: IFS, word: Sequence[int]) -> Similarity | None:
    """Single similarity equal to S_w; ``None`` stands for the identity map (empty word)."""
    word = tuple(word)
    if not word:
        return None
    q, rho = _compose_word(ifs, word)
    return Similarity(tuple(q), float(rho))


def _compose_word(ifs: IFS, word):
    _check_word(ifs, word)
    q = ifs.translations[word[0]].copy()
    rho = ifs.ratios[word[0]]
    for i in word[1:]:
        q, rho = compose_arrays(ifs.space, q, rho, ifs.translations[i], ifs.ratios[i])
    return q, float(rho)


def _check_word(ifs, word):
    for i in word:
        if not (0 <= int(i) < ifs.N):
            raise InputError(f"word index {i} out of range for {ifs.N} maps")


def similarity_dimension(ratios) -> float:
    """Unique s > 0 with sum r_i^s = 1 (safeguarded Newton on log sum r_i^s)."""
    r = np.asarray(ratios, dtype=float)
    if r.size < 2:
        raise InputError("need at least two ratios")
    if np.any((r <= 0) | (r >= 1)):
        raise InputError("ratios must lie in (0, 1)")
    logs = np.log(r)

    def g(s):
        a = s * logs
        amax = a.max()
        w = np.exp(a - amax)
        return amax + math.log(math.fsum(w)), float(np.dot(w, logs) / math.fsum(w))

    lo, hi = 0.0, 1.0
    while g(hi)[0] > 0:
        lo, hi = hi, 2 * hi
    s = 0.5 * (lo + hi)
    for _ in range(200):
        val, der = g(s)
        if val > 0:
            lo = s
        else:
            hi = s
        step = s - val / der
        s_new = step if lo < step < hi else 0.5 * (lo + hi)
        if abs(s_new - s) <= 4 * EPS * s:
            s = s_new
            break
        s = s_new
    return s


def fixed_point_of(space: GroupSpace, q, rho) -> np.ndarray:
    """Closed-form fixed point of tau_q o delta_rho.

    Horizontal part x' = q'/(1 - rho); the symplectic term then vanishes and
    x_t = q_t / (1 - rho^2).
    """
    q = np.asarray(q, dtype=float)
    if not space.is_heisenberg:
        return q / (1.0 - rho)
    x = q / (1.0 - rho)
    x[..., -1] = q[..., -1] / (1.0 - rho * rho)
    return x


def fixed_point(ifs: IFS, word: Sequence[int]) -> np.ndarray:
    word = tuple(word)
    if not word:
        raise InputError("fixed point needs a nonempty word")
    q, rho = _compose_word(ifs, word)
    return fixed_point_of(ifs.space, q, rho)


def fixed_point_iterative(ifs: IFS, word: Sequence[int], tol: float = 1e-15,
                          max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of S_w by Banach iteration from the base point."""
    q, rho = _compose_word(ifs, tuple(word))
    x = ifs.base_point.copy()
    for _ in range(max_iter):
        x_new = apply_arrays(ifs.space, q, rho, x)
        if np.max(np.abs(x_new - x)) <= tol * (1.0 + np.max(np.abs(x_new))):
            return x_new
        x = x_new
    return x


# -- the natural measure and cylinders ------------------------------------------

class SelfSimilarMeasure:
    """Natural self-similar measure with weights r_i^s, scaled to ``total``."""

    def __init__(self, ifs: IFS, s: float | None = None, total: float = 1.0):
        self.ifs = ifs
        self.s = similarity_dimension(ifs.ratios) if s is None else float(s)
        self.weights = ifs.ratios ** self.s
        self.total = float(total)
        if not self.total > 0:
            raise InputError("measure total must be positive")

    def rescaled(self, factor: float) -> "SelfSimilarMeasure":
        return SelfSimilarMeasure(self.ifs, self.s, self.total * factor)

    def word_masses(self, words) -> np.ndarray:
        """Mass of each word, folded right to left so mass(i + w) = weight_i * mass(w) exactly."""
        words = list(words)
        out = np.empty(len(words))
        by_len: dict[int, list[int]] = {}
        for k, w in enumerate(words):
            by_len.setdefault(len(w), []).append(k)
        for L, idx in by_len.items():
            idx = np.asarray(idx)
            if L == 0:
                out[idx] = 1.0
                continue
            arr = np.array([words[k] for k in idx], dtype=np.int64)
            m = self.weights[arr[:, L - 1]]
            for j in range(L - 2, -1, -1):
                m = self.weights[arr[:, j]] * m
            out[idx] = m
        return out * self.total


@dataclass
class Cylinder:
    word: tuple
    composed_ratio: float
    anchor: np.ndarray
    diam_bound: float
    mass: float
    translation: np.ndarray = field(repr=False, default=None)


@dataclass
class NodeSet:
    """Cylinders as parallel arrays (the internal form used by quadrature)."""

    words: list
    q: np.ndarray
    rho: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.words)

    @classmethod
    def empty(cls, dim):
        return cls([], np.empty((0, dim)), np.empty(0))

    def take(self, idx) -> "NodeSet":
        idx = np.asarray(idx, dtype=np.int64)
        return NodeSet([self.words[i] for i in idx], self.q[idx], self.rho[idx],
                       {k: v[idx] for k, v in self.extra.items()})

    @staticmethod
    def concat(parts, dim) -> "NodeSet":
        nonempty = [p for p in parts if len(p)]
        if not nonempty:
            return parts[0].take([]) if parts else NodeSet.empty(dim)
        parts = nonempty
        keys = set(parts[0].extra)
        return NodeSet(
            [w for p in parts for w in p.words],
            np.concatenate([p.q for p in parts]),
            np.concatenate([p.rho for p in parts]),
            {k: np.concatenate([p.extra[k] for p in parts]) for k in keys},
        )

    def sorted(self) -> "NodeSet":
        order = sorted(range(len(self.words)), key=self.words.__getitem__)
        return self.take(order)

    def depths(self) -> np.ndarray:
        return np.array([len(w) for w in self.words], dtype=float)


def _dilate_iv(space: GroupSpace, R: Interval, P: Interval) -> Interval:
    """delta_R(P) for an interval of ratios R (one per row)."""
    Rc = R[..., None]
    lo = np.empty(P.lo.shape)
    hi = np.empty(P.lo.shape)
    h = space.horizontal_dim
    horiz = P[..., :h] * Rc
    lo[..., :h], hi[..., :h] = horiz.lo, horiz.hi
    if space.is_heisenberg:
        vert = P[..., h:] * Rc.square()
        lo[..., h:], hi[..., h:] = vert.lo, vert.hi
    return Interval(lo, hi)


def _compose_iv(space, Q: Interval, R: Interval, q, r):
    D = _dilate_iv(space, R, Interval.point(np.broadcast_to(q, Q.lo.shape)))
    return box_mul(space, Q, D), R * Interval.point(np.broadcast_to(r, R.lo.shape))


def node_enclosures(nodes: "NodeSet"):
    """Rigorous enclosures (Interval) of the composed translations and ratios."""
    e = nodes.extra
    return Interval(e["q_lo"], e["q_hi"]), Interval(e["rho_lo"], e["rho_hi"])


def roots_for(ifs: IFS, words) -> NodeSet:
    space = ifs.space
    words = [tuple(w) for w in words]
    qs, rhos, enc = [], [], []
    for w in words:
        _check_word(ifs, w)
        q, rho = space.identity(), 1.0
        Q, R = Interval.point(space.identity()), Interval.point(1.0)
        for i in w:
            q, rho = compose_arrays(space, q, rho, ifs.translations[i], ifs.ratios[i])
            Q, R = _compose_iv(space, Q, R, ifs.translations[i], ifs.ratios[i])
        qs.append(q)
        rhos.append(float(rho))
        enc.append((Q, R))
    dim = space.dim
    extra = {
        "q_lo": np.array([Q.lo for Q, _ in enc]).reshape(-1, dim),
        "q_hi": np.array([Q.hi for Q, _ in enc]).reshape(-1, dim),
        "rho_lo": np.array([R.lo for _, R in enc], dtype=float).reshape(-1),
        "rho_hi": np.array([R.hi for _, R in enc], dtype=float).reshape(-1),
    }
    return NodeSet(words, np.array(qs).reshape(-1, dim), np.array(rhos, dtype=float), extra)


def children(ifs: IFS, nodes: NodeSet) -> NodeSet:
    space = ifs.space
    N = ifs.N
    dim = space.dim
    q, rho = compose_arrays(space, nodes.q[:, None, :], nodes.rho[:, None],
                            ifs.translations[None, :, :], ifs.ratios[None, :])
    words = [w + (i,) for w in nodes.words for i in range(N)]
    extra = {k: np.repeat(v, N, axis=0) for k, v in nodes.extra.items()
             if k not in ("q_lo", "q_hi", "rho_lo", "rho_hi")}
    Q, R = node_enclosures(nodes)
    Q = Interval(np.repeat(Q.lo, N, axis=0), np.repeat(Q.hi, N, axis=0))
    R = Interval(np.repeat(R.lo, N), np.repeat(R.hi, N))
    m = len(words)
    Q, R = _compose_iv(space, Q, R, np.tile(ifs.translations, (len(nodes), 1)).reshape(m, dim),
                       np.tile(ifs.ratios, len(nodes)))
    extra.update(q_lo=Q.lo, q_hi=Q.hi, rho_lo=R.lo, rho_hi=R.hi)
    return NodeSet(words, q.reshape(-1, dim), rho.reshape(-1), extra)


ACCEPT, REFINE, DROP = 0, 1, 2


class Budget:
    def __init__(self, limit: int | None = None):
        self.limit = node_budget() if limit is None else int(limit)
        self.used = 0

    def charge(self, count: int):
        self.used += count
        if self.used > self.limit:
            raise BudgetError(self.limit, self.used)


def build_frontier(ifs: IFS, roots: NodeSet, classify: Callable[[NodeSet], np.ndarray],
                   max_depth: int, budget: Budget | None = None):
    """Refine ``roots`` until ``classify`` accepts or drops every node.

    ``classify`` maps a NodeSet to codes ACCEPT / REFINE / DROP. Nodes still
    asking for refinement at word length ``max_depth`` are returned as the
    second value. Accepted nodes come back in lexicographic word order.
    """
    budget = budget or Budget()
    budget.charge(len(roots))
    accepted, leftover = [], []
    level = roots
    while len(level):
        codes = np.asarray(classify(level))
        accepted.append(level.take(np.nonzero(codes == ACCEPT)[0]))
        ref = np.nonzero(codes == REFINE)[0]
        if not ref.size:
            break
        lengths = np.array([len(level.words[i]) for i in ref])
        stop = ref[lengths >= max_depth]
        go = ref[lengths < max_depth]
        leftover.append(level.take(stop))
        if not go.size:
            break
        budget.charge(go.size * ifs.N)
        level = children(ifs, level.take(go))
    dim = ifs.space.dim
    return NodeSet.concat(accepted, dim).sorted(), NodeSet.concat(leftover, dim).sorted()


def enumerate_cylinders(ifs: IFS, s: float | None = None, depth: int | None = None,
                        mass_cutoff: float | None = None, budget: int | None = None) -> Iterator[Cylinder]:
    """Cylinders at an exact depth, or the minimal antichain with mass <= cutoff.

    Yields in lexicographic word order.
    """
    if (depth is None) == (mass_cutoff is None):
        raise InputError("give exactly one of depth or mass_cutoff")
    measure = SelfSimilarMeasure(ifs, s)
    roots = roots_for(ifs, [()])
    if depth is not None:
        if depth < 0:
            raise InputError("depth must be >= 0")

        def classify(nodes):
            return np.where(np.array([len(w) for w in nodes.words]) >= depth, ACCEPT, REFINE)

        nodes, _ = build_frontier(ifs, roots, classify, depth, Budget(budget))
    else:
        if not 0 < mass_cutoff < 1:
            raise InputError("mass_cutoff must lie in (0, 1)")

        def classify(nodes):
            return np.where(measure.word_masses(nodes.words) <= mass_cutoff * measure.total, ACCEPT, REFINE)

        nodes, _ = build_frontier(ifs, roots, classify, 10_000, Budget(budget))
    masses = measure.word_masses(nodes.words)
    anchors = apply_arrays(ifs.space, nodes.q, nodes.rho, ifs.base_point)
    for k, w in enumerate(nodes.words):
        yield Cylinder(w, float(nodes.rho[k]), anchors[k], float(nodes.rho[k] * ifs.base_diam),
                       float(masses[k]), nodes.q[k])


# -- separation ------------------------------------------------------------------

@dataclass
class SeparationReport:
    min_gap: float
    alpha_lower: float
    disjoint: bool
    depth: int
    base_diam: float
    base_radius: float
    candidate_pairs: int
    margin: float
    status: str

    def to_dict(self):
        return dict(self.__dict__)


def _pair_box_bound(space, box: Interval, g, ri, rj, rounds: int) -> np.ndarray:
    """Lower bound of min ||delta_ri(a)^{-1} g delta_rj(b)|| over a, b in ``box``.

    Bisects the two parameter boxes for up to ``rounds`` rounds wherever the
    bound is not yet positive.
    """
    m = g.shape[0]
    dim = space.dim
    A = Interval(np.broadcast_to(box.lo, (m, dim)).copy(), np.broadcast_to(box.hi, (m, dim)).copy())
    B = Interval(A.lo.copy(), A.hi.copy())
    owner = np.arange(m)
    result = np.full(m, np.inf)

    def bound(A, B, own):
        X = -box_dilate(space, ri[own], A)
        Y = box_dilate(space, rj[own], B)
        return box_norm_lower(space, box_mul(space, box_mul(space, X, Interval.point(g[own])), Y))

    lb = bound(A, B, owner)
    for r in range(rounds + 1):
        done = (lb > 0) | (r == rounds)
        np.minimum.at(result, owner[done], lb[done])
        keep = ~done
        if not keep.any():
            break
        A, B, owner = A[keep], B[keep], owner[keep]
        # split both boxes along their widest coordinate: 4 children per pair
        A1, A2 = _bisect(A)
        B1, B2 = _bisect(B)
        A = _cat([A1, A1, A2, A2])
        B = _cat([B1, B2, B1, B2])
        owner = np.concatenate([owner] * 4)
        lb = bound(A, B, owner)
    return result


def _bisect(P: Interval):
    k = np.argmax(P.width, axis=-1)
    rows = np.arange(P.lo.shape[0])
    mid = 0.5 * (P.lo[rows, k] + P.hi[rows, k])
    lo1, hi1 = P.lo.copy(), P.hi.copy()
    lo2, hi2 = P.lo.copy(), P.hi.copy()
    hi1[rows, k] = mid
    lo2[rows, k] = mid
    return Interval(lo1, hi1), Interval(lo2, hi2)


def _cat(parts):
    return Interval(np.concatenate([p.lo for p in parts]), np.concatenate([p.hi for p in parts]))


def _ball_cover_bound(ifs: IFS, i, j, depth):
    """min over depth-refined sub-cylinders of d(a_u, a_v) - rad_u - rad_v."""
    space = ifs.space
    sub = roots_for(ifs, [(i,), (j,)])
    k = 1
    while k < depth and len(sub) * ifs.N <= 2 * 512:
        sub = children(ifs, sub)
        k += 1
    half = len(sub) // 2
    anchors = apply_arrays(space, sub.q, sub.rho, ifs.base_point)
    rad = sub.rho * ifs.base_radius
    d = space.dist(anchors[:half, None, :], anchors[None, half:, :])
    return float(np.min(d - rad[:half, None] - rad[None, half:]))


def separation_report(ifs: IFS, depth: int = 2, margin: float | None = None,
                      max_pairs_direct: int = 200_000) -> SeparationReport:
    """Certified lower bound on the distance between distinct first-level pieces.

    For every pair the bound is the larger of a ball-cover bound (anchors and
    radii, refined ``depth`` levels when cheap) and a box bound obtained from
    the relative displacement q_i^{-1} q_j with ``depth`` bisection rounds.
    Pairs whose horizontal boxes are farther apart than ``margin`` are
    certified directly, since the gauge dominates horizontal distance.
    """
    if depth < 1:
        raise InputError("depth must be >= 1")
    space = ifs.space
    N = ifs.N
    boxes = ifs.map_boxes(ifs.box)
    anchors = apply_arrays(space, ifs.translations, ifs.ratios, ifs.base_point)
    radius = ifs.ratios * ifs.base_radius
    h = space.horizontal_dim
    if margin is None:
        margin = 0.5 * float(np.max(radius))

    pair_iter = (_all_pairs(N) if N * (N - 1) // 2 <= max_pairs_direct
                 else _near_pairs(boxes, h, margin))
    cache: dict[bytes, float] = {}
    min_gap = np.inf
    n_cand = 0
    certified_by_margin = N * (N - 1) // 2
    for I, J in pair_iter:
        if not len(I):
            continue
        certified_by_margin -= len(I)
        n_cand += len(I)
        hgap = _horizontal_gap(boxes, I, J, h)
        ball = space.dist(anchors[I], anchors[J]) - radius[I] - radius[J]
        g = space.mul(space.inv(ifs.translations[I]), ifs.translations[J])
        keys = np.column_stack([g, ifs.ratios[I], ifs.ratios[J]])
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        vals = np.empty(len(uniq))
        todo = []
        for u in range(len(uniq)):
            key = uniq[u].tobytes()
            if key in cache:
                vals[u] = cache[key]
            else:
                todo.append(u)
        if todo:
            todo = np.array(todo)
            dim = space.dim
            bb = _pair_box_bound(space, ifs.box, uniq[todo, :dim], uniq[todo, dim],
                                 uniq[todo, dim + 1], depth)
            vals[todo] = bb
            for u, v in zip(todo, bb):
                cache[uniq[u].tobytes()] = float(v)
        bound = np.maximum(np.maximum(ball, vals[inv]), hgap)
        if depth > 1 and N <= 64:
            weak = np.nonzero(bound <= 0)[0]
            for k in weak:
                bound[k] = max(bound[k], _ball_cover_bound(ifs, int(I[k]), int(J[k]), depth))
        min_gap = min(min_gap, float(np.min(bound)))
    if certified_by_margin > 0:
        min_gap = min(min_gap, margin)
    disjoint = bool(min_gap > 0)
    alpha = min_gap / float(np.max(ifs.ratios * ifs.base_diam))
    return SeparationReport(float(min_gap), float(alpha), disjoint, depth, ifs.base_diam,
                            ifs.base_radius, n_cand, float(margin),
                            "separated" if disjoint else "inconclusive-separation")


def _horizontal_gap(boxes: Interval, I, J, h):
    lo_i, hi_i = boxes.lo[I, :h], boxes.hi[I, :h]
    lo_j, hi_j = boxes.lo[J, :h], boxes.hi[J, :h]
    gap = np.maximum(lo_j - hi_i, lo_i - hi_j)
    gap = np.maximum(gap, 0.0)
    return np.nextafter(np.sqrt(np.sum(gap * gap, axis=-1)), 0.0)


def _all_pairs(N):
    I, J = np.triu_indices(N, k=1)
    yield I, J


def _near_pairs(boxes: Interval, h: int, margin: float):
    """Pairs whose horizontal boxes are within ``margin`` (sup-norm), via grid hashing."""
    lo = boxes.lo[:, :h]
    hi = boxes.hi[:, :h]
    cell = float(np.max(hi - lo)) + margin
    keys = np.floor(lo / cell).astype(np.int64)
    cells: dict[tuple, list[int]] = {}
    for idx, k in enumerate(map(tuple, keys)):
        cells.setdefault(k, []).append(idx)
    cells_arr = {k: np.array(v) for k, v in cells.items()}
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=h) if o > (0,) * h]
    for key, members in cells_arr.items():
        I, J = np.triu_indices(len(members), k=1)
        yield _filter(lo, hi, members[I], members[J], margin)
        for off in offsets:
            other = cells_arr.get(tuple(a + b for a, b in zip(key, off)))
            if other is None:
                continue
            I = np.repeat(members, len(other))
            J = np.tile(other, len(members))
            yield _filter(lo, hi, I, J, margin)


def _filter(lo, hi, I, J, margin):
    gap = np.max(np.maximum(lo[J] - hi[I], lo[I] - hi[J]), axis=-1)
    keep = gap < margin
    return I[keep], J[keep]
