from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import gasket_ifs
from fractal_sio.errors import BudgetError, InputError
from fractal_sio.group import GroupSpace
from fractal_sio.ifs import (IFS, SelfSimilarMeasure, Similarity, enumerate_cylinders,
                             fixed_point, fixed_point_iterative, separation_report,
                             similarity_apply, similarity_dimension, word_compose)

H1 = GroupSpace.heisenberg(1)
LINE = GroupSpace.euclidean(1)


def middle_thirds():
    return IFS.from_arrays(LINE, [[0.0], [2 / 3]], 1 / 3)


def random_heisenberg_ifs(seed, N=3):
    rng = np.random.default_rng(seed)
    return IFS.from_arrays(H1, rng.uniform(-1, 1, size=(N, 3)), rng.uniform(0.1, 0.4, size=N))


def test_similarity_apply_examples():
    half = Similarity((0, 0, 0), 0.5)
    assert np.array_equal(similarity_apply(H1, half, [2, 0, 0]), [1, 0, 0])
    S = Similarity((1, 0, 0), 0.5)
    assert np.array_equal(similarity_apply(H1, S, [0, 0, 0]), [1, 0, 0])
    assert np.array_equal(similarity_apply(H1, S, [2, 0, 0]), [2, 0, 0])
    with pytest.raises(InputError):
        Similarity((0, 0, 0), 1.0)


def test_word_compose():
    f = random_heisenberg_ifs(0)
    assert word_compose(f, (1,)) == f.maps[1]
    assert word_compose(f, ()) is None
    eq = IFS.from_arrays(H1, [[0, 0, 0], [1, 0, 0]], 0.3)
    assert word_compose(eq, (0, 1, 1, 0)).ratio == pytest.approx(0.3 ** 4, rel=1e-15)
    with pytest.raises(InputError):
        word_compose(f, (5,))


def test_word_compose_associative():
    f = random_heisenberg_ifs(1)
    rng = np.random.default_rng(2)
    p = rng.uniform(-1, 1, size=(100, 3))
    for _ in range(10):
        w1 = tuple(rng.integers(0, 3, size=3))
        w2 = tuple(rng.integers(0, 3, size=2))
        whole = similarity_apply(H1, word_compose(f, w1 + w2), p)
        parts = similarity_apply(H1, word_compose(f, w1), similarity_apply(H1, word_compose(f, w2), p))
        assert np.max(np.abs(whole - parts)) < 1e-12


def test_similarity_dimension_examples():
    assert similarity_dimension([1 / 3, 1 / 3]) == pytest.approx(math.log(2) / math.log(3), abs=1e-14)
    # x + x^2 = 1 with x = 2^-s
    x = (math.sqrt(5) - 1) / 2
    assert similarity_dimension([0.5, 0.25]) == pytest.approx(-math.log2(x), abs=1e-12)
    assert similarity_dimension([0.5, 0.25]) == pytest.approx(0.6942419, abs=1e-7)
    r = 52489 ** (-1 / 3)
    assert similarity_dimension([r] * 52489) == pytest.approx(3.0, abs=1e-12)
    for N, r in ((2, 0.3), (5, 0.1), (17, 0.05)):
        assert similarity_dimension([r] * N) == pytest.approx(math.log(N) / math.log(1 / r), abs=1e-12)
    with pytest.raises(InputError):
        similarity_dimension([0.5])


def test_fixed_point_examples():
    f = IFS.from_arrays(H1, [[0, 0, 0], [1, 0, 0]], 0.5)
    assert np.array_equal(fixed_point(f, (0,)), [0, 0, 0])
    assert np.allclose(fixed_point(f, (1,)), [2, 0, 0], atol=1e-15)
    for seed in range(100):
        g = random_heisenberg_ifs(seed, N=2)
        w = (seed % 2,)
        x = fixed_point(g, w)
        assert np.max(np.abs(fixed_point_iterative(g, w) - x)) < 1e-12
        S = word_compose(g, w)
        assert np.max(np.abs(similarity_apply(H1, S, x) - x)) < 1e-12 * g.base_diam


def test_fixed_point_of_long_words():
    g = random_heisenberg_ifs(3)
    for w in ((0, 1), (2, 1, 0), (1, 1, 2, 0)):
        x = fixed_point(g, w)
        # coordinate residual; the gauge distance is only sqrt-accurate in t
        assert np.max(np.abs(similarity_apply(H1, word_compose(g, w), x) - x)) < 1e-12 * g.base_diam


def test_enumerate_depth_examples():
    f = middle_thirds()
    root = list(enumerate_cylinders(f, depth=0))
    assert len(root) == 1 and root[0].mass == 1.0
    cyl = list(enumerate_cylinders(f, math.log(2) / math.log(3), depth=2))
    assert [c.word for c in cyl] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert np.allclose([c.mass for c in cyl], 0.25, atol=1e-15)


def test_antichain_partition_of_unity():
    rng = np.random.default_rng(4)
    for seed in range(5):
        f = random_heisenberg_ifs(seed, N=int(rng.integers(2, 5)))
        cut = float(rng.uniform(0.01, 0.2))
        cyl = list(enumerate_cylinders(f, mass_cutoff=cut))
        assert abs(math.fsum(c.mass for c in cyl) - 1.0) < 1e-10
        assert all(c.mass <= cut for c in cyl)
        assert all(c.mass > cut * 1e-12 for c in cyl)
        words = [c.word for c in cyl]
        assert words == sorted(words)


def test_budget_error_names_variable(monkeypatch):
    monkeypatch.setenv("FRACTAL_SIO_NODE_BUDGET", "50")
    with pytest.raises(BudgetError, match="FRACTAL_SIO_NODE_BUDGET"):
        list(enumerate_cylinders(gasket_ifs(), depth=6))


def test_measure_self_similarity():
    f = random_heisenberg_ifs(5)
    m = SelfSimilarMeasure(f)
    assert abs(m.weights.sum() - 1.0) < 1e-12
    rng = np.random.default_rng(6)
    for _ in range(50):
        w = tuple(int(v) for v in rng.integers(0, 3, size=int(rng.integers(1, 6))))
        i = int(rng.integers(0, 3))
        assert m.word_masses([(i,) + w])[0] == m.weights[i] * m.word_masses([w])[0]


def test_cylinder_geometry_covariance():
    f = random_heisenberg_ifs(7)
    for c in enumerate_cylinders(f, depth=3):
        S = word_compose(f, c.word)
        assert np.array_equal(c.anchor, similarity_apply(H1, S, f.base_point))
        assert c.composed_ratio == pytest.approx(math.prod(f.ratios[i] for i in c.word), rel=1e-15)
        assert c.diam_bound == c.composed_ratio * f.base_diam


def test_anchors_converge_to_fixed_point():
    f = random_heisenberg_ifs(8)
    w = (1, 2)
    x = fixed_point(f, w)
    rho = word_compose(f, w).ratio
    for k in range(1, 5):
        anchor = similarity_apply(H1, word_compose(f, w * k), f.base_point)
        assert H1.dist(anchor, x) <= rho ** k * f.base_diam


def test_base_radius_bounds_deep_anchors():
    f = random_heisenberg_ifs(9)
    anchors = np.array([c.anchor for c in enumerate_cylinders(f, depth=6)])
    assert np.max(H1.dist(f.base_point, anchors)) <= f.base_radius
    assert np.all((f.box.lo <= anchors) & (anchors <= f.box.hi))


def test_separation_middle_thirds():
    rep = separation_report(middle_thirds(), depth=4)
    assert rep.disjoint
    assert rep.min_gap >= 1 / 3 - 2 * (1 / 3) ** 4
    assert rep.alpha_lower > 0


def test_separation_identical_pieces():
    f = IFS.from_arrays(H1, [[0.2, 0.1, 0.0], [0.2, 0.1, 0.0], [1.0, 0.0, 0.0]], 0.3)
    rep = separation_report(f)
    assert not rep.disjoint and rep.min_gap <= 0
    assert rep.status == "inconclusive-separation"
    with pytest.raises(InputError):
        separation_report(f, depth=0)


def test_separation_cantor_set(cq_separation):
    assert cq_separation.disjoint
    assert cq_separation.min_gap > 0 and cq_separation.depth == 2


def test_config_round_trip():
    f = random_heisenberg_ifs(10)
    g = IFS.from_config(f.to_config())
    assert np.array_equal(f.translations, g.translations)
    assert np.array_equal(f.ratios, g.ratios)
    with pytest.raises(InputError):
        IFS.from_config({"space": {"group": "heisenberg", "n": 1}, "maps": [{"q": [0, 0, 0]}]})
    with pytest.raises(InputError):
        IFS.from_arrays(H1, [[0, 0, 0]], 0.5)
