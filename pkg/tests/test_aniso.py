import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anisoreg.aniso import (
    AnisoGram, gram_apply, gram_theta_all, gram_theta_directional, local_penalty, rotation,
    rotation_derivative, total_penalty,
)
from anisoreg.core import AnisoWeights, Grid
from anisoreg.operators import make_gradient
from anisoreg.smoothgrad import SmoothedGradient
from oracles import dense_d_eps

angles = st.floats(-np.pi / 2, np.pi / 2)


def test_rotation_special_values():
    np.testing.assert_allclose(rotation(0.0), np.eye(2))
    np.testing.assert_allclose(rotation(np.pi / 2) @ [1, 0], [0, -1], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(angles, st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_rotation_preserves_norm(theta, gx, gz):
    g = np.array([gx, gz])
    assert np.isclose(np.linalg.norm(rotation(theta) @ g), np.linalg.norm(g), rtol=1e-12, atol=1e-12)


def test_rotation_derivative(rng):
    np.testing.assert_allclose(rotation_derivative(0.0), [[0, 1], [-1, 0]])
    for theta in rng.uniform(-np.pi / 2, np.pi / 2, 20):
        h = 1e-6
        fd = (rotation(theta + h) - rotation(theta - h)) / (2 * h)
        np.testing.assert_allclose(rotation_derivative(theta), fd, atol=1e-8)
        np.testing.assert_allclose(rotation_derivative(theta), rotation(theta + np.pi / 2), atol=1e-15)


def test_local_penalty_axes():
    w = AnisoWeights(1.0, 1e-3)
    assert local_penalty([1, 0], 0.0, w) == pytest.approx(1.0)
    assert local_penalty([1, 0], np.pi / 2, w) == pytest.approx(1e-3)
    assert local_penalty([0, 0], 0.7, w) == 0.0


@settings(max_examples=200, deadline=None)
@given(angles, st.floats(-10, 10), st.floats(-10, 10))
def test_local_penalty_bounds(theta, gx, gz):
    w = AnisoWeights(1.0, 0.05)
    sq = gx * gx + gz * gz
    val = local_penalty([gx, gz], theta, w)
    assert w.sigma_z * sq * (1 - 1e-12) - 1e-12 <= val <= w.sigma_x * sq * (1 + 1e-12) + 1e-12


def test_total_penalty_constant_and_isotropic(rng):
    g = Grid(5, 4)
    grad = make_gradient(g)
    theta = rng.uniform(-1.5, 1.5, g.n)
    assert total_penalty(np.full(g.n, 2.0), theta, AnisoWeights(1.0, 1e-3), grad) == 0.0
    m = rng.standard_normal(g.n)
    iso = total_penalty(m, theta, AnisoWeights(1.0, 1.0), grad)
    assert iso == pytest.approx(np.sum(grad.apply(m) ** 2), rel=1e-12)


def test_total_penalty_matches_dense(rng):
    g = Grid(4, 4)
    w = AnisoWeights(1.0, 0.01)
    theta = rng.uniform(-1.5, 1.5, g.n)
    m = rng.standard_normal(g.n)
    d = dense_d_eps(g, theta, w)
    expected = m @ d.T @ d @ m
    assert total_penalty(m, theta, w, make_gradient(g)) == pytest.approx(expected, rel=1e-12)


def test_gram_matches_dense(rng):
    g = Grid(5, 5)
    w = AnisoWeights(1.0, 1e-3)
    theta = rng.uniform(-1.5, 1.5, g.n)
    d = dense_d_eps(g, theta, w)
    dense = d.T @ d
    v = rng.standard_normal(g.n)
    out = gram_apply(theta, w, v, g)
    assert np.linalg.norm(out - dense @ v) <= 1e-12 * np.linalg.norm(dense @ v)
    sparse = AnisoGram(g, theta, w).to_matrix().toarray()
    np.testing.assert_allclose(sparse, dense, atol=1e-13)


def test_gram_special_cases(rng):
    g = Grid(4, 3)
    grad = make_gradient(g)
    np.testing.assert_allclose(gram_apply(rng.uniform(-1, 1, g.n), AnisoWeights(), np.ones(g.n), g), 0.0, atol=1e-15)
    v = rng.standard_normal(g.n)
    np.testing.assert_allclose(
        gram_apply(np.zeros(g.n), AnisoWeights(1.0, 1.0), v, g), grad.adjoint(grad.apply(v)), atol=1e-13
    )


def test_gram_is_symmetric_psd(rng):
    g = Grid(4, 5)
    gram = AnisoGram(g, rng.uniform(-1.5, 1.5, g.n), AnisoWeights(1.0, 1e-2)).to_matrix().toarray()
    np.testing.assert_allclose(gram, gram.T, atol=1e-14)
    assert np.linalg.eigvalsh(gram).min() > -1e-12


def test_gram_theta_directional_matches_fd(rng):
    g = Grid(4, 4)
    w = AnisoWeights(1.0, 1e-3)
    theta = rng.uniform(-1.4, 1.4, g.n)
    u, v = rng.standard_normal(g.n), rng.standard_normal(g.n)
    h = 1e-6
    for i in range(g.n):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (u @ gram_apply(tp, w, v, g) - u @ gram_apply(tm, w, v, g)) / (2 * h)
        assert abs(gram_theta_directional(theta, w, i, u, v, g) - fd) <= 1e-7 * max(1.0, abs(fd))


def test_gram_theta_all_agrees_with_directional(rng):
    g = Grid(5, 3)
    w = AnisoWeights(1.0, 0.1)
    theta = rng.uniform(-1.5, 1.5, g.n)
    u, v = rng.standard_normal(g.n), rng.standard_normal(g.n)
    grad = make_gradient(g)
    full = gram_theta_all(theta, w, grad.components(u), grad.components(v))
    each = [gram_theta_directional(theta, w, i, u, v, g) for i in range(g.n)]
    np.testing.assert_allclose(full, each, atol=1e-13)
    smooth = SmoothedGradient(g)
    full_s = gram_theta_all(theta, w, smooth.components(u), smooth.components(v))
    each_s = [gram_theta_directional(theta, w, i, u, v, g, grad=smooth) for i in range(g.n)]
    np.testing.assert_allclose(full_s, each_s, atol=1e-13)


def test_gram_theta_vanishes_for_constant_or_isotropic(rng):
    g = Grid(3, 3)
    theta = rng.uniform(-1, 1, g.n)
    u = rng.standard_normal(g.n)
    assert gram_theta_directional(theta, AnisoWeights(), 4, u, np.ones(g.n), g) == 0.0
    assert gram_theta_directional(theta, AnisoWeights(1.0, 1.0), 4, u, u, g) == 0.0


def test_penalty_minimized_across_gradient(rng):
    w = AnisoWeights(1.0, 1e-3)
    grid = np.arange(-np.pi / 2, np.pi / 2, 1e-3)
    for g in rng.uniform(-1, 1, (50, 2)):
        vals = [local_penalty(g, t, w) for t in grid]
        best = grid[int(np.argmin(vals))]
        p = rotation(best)[0]
        assert abs(p @ g) / np.linalg.norm(g) <= 1e-3
        assert min(vals) - w.sigma_z * (g @ g) <= 1e-6
