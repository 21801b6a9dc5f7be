from __future__ import annotations

import numpy as np
import pytest

from fractal_sio.errors import InputError, SingularityError
from fractal_sio.group import GroupSpace
from fractal_sio.kernels import (complex_power, constant_kernel, coordinate_riesz, eval_gamma,
                                 eval_kernel, eval_omega, gamma_c_Q, heisenberg_riesz,
                                 horizontal_gradient_fd, kernel_at, kernel_from_config,
                                 sublaplacian_fd, verify_standard_estimates)
from fractal_sio.interval import Interval

H1 = GroupSpace.heisenberg(1)
H2 = GroupSpace.heisenberg(2)


def _random_points(G, m, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-2, 2, size=(m, G.dim))


def test_omega_examples():
    spec = heisenberg_riesz(1, 1.0)
    assert np.allclose(eval_omega(spec, [1, 0, 0]), [1, 0], atol=1e-15)
    assert np.allclose(eval_omega(spec, H1.dilate(2, [1, 0, 0])), eval_omega(spec, [1, 0, 0]))
    assert np.allclose(eval_omega(complex_power(3), [1, 0]), [1, 0], atol=1e-15)
    with pytest.raises(SingularityError):
        eval_omega(spec, [0, 0, 0])


def test_omega_degree_zero():
    rng = np.random.default_rng(1)
    for spec in (heisenberg_riesz(1), heisenberg_riesz(2), complex_power(3),
                 coordinate_riesz(H1, 2, 3.0)):
        G = spec.space
        p = _random_points(G, 1000, 2)
        r = rng.uniform(0.01, 100, size=1000)
        diff = eval_omega(spec, G.dilate(r, p)) - eval_omega(spec, p)
        assert np.max(np.abs(diff)) < 1e-12


def test_kernel_examples_and_symmetries():
    spec = heisenberg_riesz(1, 1.0)
    assert np.allclose(eval_kernel(spec, [0, 0, 0], [1, 0, 0]), [1, 0], atol=1e-15)
    with pytest.raises(SingularityError):
        eval_kernel(spec, [1, 2, 3], [1, 2, 3])
    rng = np.random.default_rng(3)
    for spec in (heisenberg_riesz(1), heisenberg_riesz(2)):
        G = spec.space
        x, y, a = (_random_points(G, 500, s) for s in (4, 5, 6))
        k = eval_kernel(spec, x, y)
        moved = eval_kernel(spec, G.mul(a, x), G.mul(a, y))
        assert np.max(np.abs(moved - k) / (1 + np.abs(k))) < 1e-12
        scaled = eval_kernel(spec, G.dilate(2, x), G.dilate(2, y))
        assert np.max(np.abs(scaled - 2.0 ** -spec.s * k) / (1 + np.abs(k))) < 1e-12


def test_kernel_odd_in_horizontal_coordinates():
    # K(-p', t) = -K(p', t); note K(p^{-1}) = K(-p', -t) is not -K(p) in general
    for spec in (heisenberg_riesz(1), heisenberg_riesz(2)):
        G = spec.space
        p = _random_points(G, 1000, 7)
        flip = p.copy()
        flip[:, :-1] *= -1
        assert np.max(np.abs(kernel_at(spec, flip) + kernel_at(spec, p))) < 1e-14
    spec = heisenberg_riesz(1)
    p = np.array([0.3, 0.2, 0.9])
    assert not np.allclose(kernel_at(spec, -p), -kernel_at(spec, p))


def test_reflected_orientation():
    std = heisenberg_riesz(1)
    ref = heisenberg_riesz(1, orientation="reflected")
    x, y = _random_points(H1, 50, 8), _random_points(H1, 50, 9)
    assert np.allclose(eval_kernel(ref, x, y), eval_kernel(std, y, x), rtol=1e-14, atol=0)


def test_gamma_examples():
    assert eval_gamma(H1, 1.0, [0, 0, 4]) == pytest.approx(0.25, abs=1e-16)
    p = np.array([0.3, -0.7, 1.1])
    assert eval_gamma(H1, 1.0, -p) == eval_gamma(H1, 1.0, p)
    assert eval_gamma(H1, 1.0, H1.dilate(2, p)) == pytest.approx(0.25 * eval_gamma(H1, 1.0, p), rel=1e-15)
    with pytest.raises(SingularityError):
        eval_gamma(H1, 1.0, [0, 0, 0])
    assert gamma_c_Q(H1) == -2.0 and gamma_c_Q(H2, 0.5) == -2.0


def test_fd_gradient_examples():
    g = horizontal_gradient_fd(H1, lambda q: q[0], [0.4, -0.3, 0.2])
    assert np.allclose(g, [1, 0], atol=1e-10)
    g = horizontal_gradient_fd(H1, lambda q: q[2], [1, 2, 0])
    assert np.allclose(g, [4, -2], atol=1e-8)
    spec = heisenberg_riesz(1, gamma_c_Q(H1))
    p = np.array([0.7, 0.3, 0.5])
    g = horizontal_gradient_fd(H1, lambda q: float(eval_gamma(H1, 1.0, q)), p, h=1e-5)
    k = kernel_at(spec, p)
    assert np.max(np.abs(g - k)) / np.max(np.abs(k)) < 1e-6


def test_fd_gradient_normalised_mode():
    spec = heisenberg_riesz(1, gamma_c_Q(H1))
    p = np.array([0.02, -0.01, 0.003])
    g = horizontal_gradient_fd(H1, lambda q: float(eval_gamma(H1, 1.0, q)), p, h=1e-5,
                               homogeneous_degree=2 - H1.homogeneous_dim)
    k = kernel_at(spec, p)
    assert np.max(np.abs(g - k)) / np.max(np.abs(k)) < 1e-6


def test_sublaplacian_examples():
    assert sublaplacian_fd(H1, lambda q: q[0] ** 2, [0.3, 0.1, -0.2]) == pytest.approx(2.0, abs=1e-6)
    assert abs(sublaplacian_fd(H1, lambda q: 3.0, [0.3, 0.1, -0.2])) < 1e-12


def test_fd_second_order_convergence():
    spec = heisenberg_riesz(1, gamma_c_Q(H1))
    gamma = lambda q: float(eval_gamma(H1, 1.0, q))
    p = np.array([0.8, -0.5, 0.6])
    exact = kernel_at(spec, p)
    defects = [np.max(np.abs(horizontal_gradient_fd(H1, gamma, p, h=h) - exact)) for h in (2e-2, 1e-2)]
    assert 3.0 <= defects[0] / defects[1] <= 5.0
    lap = [abs(sublaplacian_fd(H1, gamma, p, h=h)) for h in (4e-2, 2e-2)]
    assert 3.0 <= lap[0] / lap[1] <= 5.0


def test_standard_estimates():
    spec = heisenberg_riesz(1)
    a = verify_standard_estimates(spec, 10_000, seed=0)
    b = verify_standard_estimates(spec, 10_000, seed=1)
    assert np.isfinite(a.max_size_ratio) and a.max_size_ratio > 0
    assert abs(a.max_size_ratio - b.max_size_ratio) <= 0.1 * a.max_size_ratio
    one = verify_standard_estimates(spec, 1, seed=3)
    assert one.to_dict() == verify_standard_estimates(spec, 1, seed=3).to_dict()
    d = verify_standard_estimates(spec, 2000, seed=4, dilation=2.0)
    u = verify_standard_estimates(spec, 2000, seed=4)
    assert d.max_size_ratio == pytest.approx(u.max_size_ratio, rel=1e-10)
    assert d.max_holder_ratio == pytest.approx(u.max_holder_ratio, rel=1e-10)
    with pytest.raises(InputError):
        verify_standard_estimates(spec, 0)


def test_interval_kernel_encloses_points():
    rng = np.random.default_rng(11)
    for spec in (heisenberg_riesz(1), complex_power(3), constant_kernel(H1, 3.0)):
        G = spec.space
        c = rng.uniform(0.5, 1.5, size=(200, G.dim)) * rng.choice([-1, 1], size=(200, G.dim))
        rad = rng.uniform(0, 0.1, size=(200, G.dim))
        box = Interval(c - rad, c + rad)
        pts = box.lo + rng.uniform(0, 1, size=box.shape) * (box.hi - box.lo)
        K = kernel_at(spec, box)
        k = kernel_at(spec, pts)
        assert np.all((K.lo <= k) & (k <= K.hi))


def test_config_parsing():
    spec = kernel_from_config({"kernel": "heisenberg_riesz", "c_Q": -2.0}, H1)
    assert spec.scale == -2.0 and spec.num_components == 2
    assert kernel_from_config({"kernel": "complex_power", "m": 3}).num_components == 2
    spec = kernel_from_config({"kernel": "coordinate_riesz", "s": 1.0, "axis": 0}, H1)
    assert spec.num_components == 1
    assert kernel_from_config(spec.to_config() | {"space": H1.to_config()}, H1) == spec
    with pytest.raises(InputError):
        kernel_from_config({"kernel": "bessel"}, H1)
    with pytest.raises(InputError):
        kernel_from_config({"kernel": "heisenberg_riesz"}, GroupSpace.euclidean(2))
    with pytest.raises(InputError):
        heisenberg_riesz(1, 0.0)
