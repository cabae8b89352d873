import numpy as np
import pytest

from anisoreg.aniso import local_penalty
from anisoreg.core import AnisoWeights, Grid, UpperParams, pack_gamma
from anisoreg.lower import CgOptions
from anisoreg.operators import make_gaussian_blur, make_identity
from anisoreg.upper import (
    UpperProblem, gradient_check, smoothed_discrepancy, smoothed_discrepancy_slope, upper_gradient,
    upper_value,
)
from oracles import dense_d_eps, dense_gradient, explicit_indirect, probe_matrix

TIGHT = CgOptions(rel_tolerance=1e-12)


def make_problem(rng, grid, G=None, alpha=0.5, beta=0.3, noise=0.3, weights=AnisoWeights(1.0, 1e-2),
                 mode="hilbert_phase", noise_bound=None):
    G = G or make_identity(grid)
    m_true = rng.standard_normal(grid.n)
    d = G.apply(m_true) + noise * rng.standard_normal(G.out_dim)
    bound = noise_bound if noise_bound is not None else noise * np.sqrt(G.out_dim)
    params = UpperParams(alpha=alpha, beta=beta, noise_bound=bound)
    return UpperProblem(G, d, grid, weights, params, lower_opts=TIGHT, smooth_mode=mode)


def random_gamma(rng, grid):
    return pack_gamma(rng.uniform(-1.4, 1.4, grid.n), 10 ** rng.uniform(-1, 0.5))


def test_soft_abs():
    assert smoothed_discrepancy(4.0, 4.0, 1e-3) == pytest.approx(5e-4)
    assert smoothed_discrepancy(7.0, 4.0, 1e-12) == pytest.approx(1.5, abs=1e-9)
    assert smoothed_discrepancy(1.0, 4.0, 1e-12) == pytest.approx(1.5, abs=1e-9)
    assert smoothed_discrepancy_slope(4.0, 4.0, 1e-3) == 0.0


def test_value_at_exact_discrepancy(rng):
    g = Grid(4, 4)
    prob = make_problem(rng, g, alpha=0.0, beta=0.0)
    gamma = random_gamma(rng, g)
    sq = upper_value(gamma, prob).sq_discrepancy
    prob = UpperProblem(prob.G, prob.d, g, prob.weights, UpperParams(0.0, 0.0, np.sqrt(sq)), lower_opts=TIGHT)
    assert upper_value(gamma, prob).value == pytest.approx(5e-4, rel=1e-6)


def test_constant_theta_has_no_smoothness_cost(rng):
    g = Grid(5, 4)
    prob = make_problem(rng, g)
    ev = upper_value(pack_gamma(np.full(g.n, 0.4), 1.0), prob)
    assert ev.smoothness_term == 0.0
    assert ev.value == ev.discrepancy_term + ev.orientation_term + ev.smoothness_term


def test_value_matches_term_by_term_oracle(rng):
    g = Grid(6, 6)
    G = make_gaussian_blur(g, 1.0)
    prob = make_problem(rng, g, G=G)
    theta = rng.uniform(-1.5, 1.5, g.n)
    mu = 0.7
    ev = upper_value(pack_gamma(theta, mu), prob)

    gmat = probe_matrix(G)
    dmat = dense_d_eps(g, theta, prob.weights)
    m = np.linalg.solve(gmat.T @ gmat + mu * dmat.T @ dmat, gmat.T @ prob.d)
    sq = np.sum((gmat @ m - prob.d) ** 2)
    p = prob.params
    first = 0.5 * np.sqrt((sq - p.noise_bound**2) ** 2 + p.delta**2)
    smooth = probe_matrix(prob.smooth_grad) @ m
    pixels = zip(smooth[: g.n], smooth[g.n:], theta)
    second = 0.5 * p.alpha * sum(local_penalty([gx, gz], t, prob.weights) for gx, gz, t in pixels)
    third = 0.5 * p.beta * np.sum((dense_gradient(g) @ theta) ** 2)
    expected = first + second + third
    assert ev.value == pytest.approx(expected, rel=1e-10)
    assert ev.discrepancy_term == pytest.approx(first, rel=1e-8)
    assert ev.orientation_term == pytest.approx(second, rel=1e-10)
    assert ev.smoothness_term == pytest.approx(third, rel=1e-12)


def test_mu_component_matches_fd(rng):
    g = Grid(6, 6)
    prob = make_problem(rng, g, alpha=0.0, beta=0.0)
    gamma = random_gamma(rng, g)
    ana = upper_gradient(gamma, prob).gradient[-1]
    h = 1e-5 * max(gamma[-1], 1.0)
    up, dn = gamma.copy(), gamma.copy()
    up[-1] += h
    dn[-1] -= h
    fd = (upper_value(up, prob).value - upper_value(dn, prob).value) / (2 * h)
    assert abs(ana - fd) <= 1e-4 * abs(fd)


@pytest.mark.parametrize("mode", ["hilbert_phase", "finite_difference", "forward"])
def test_full_gradient_matches_fd(rng, mode):
    g = Grid(4, 4)
    prob = make_problem(rng, g, mode=mode)
    for _ in range(3):
        assert gradient_check(prob, random_gamma(rng, g)) <= 1e-4


def test_discrepancy_part_vanishes_at_target(rng):
    g = Grid(4, 4)
    prob = make_problem(rng, g, alpha=0.0, beta=0.0, noise=0.0, noise_bound=1.0)
    gamma = pack_gamma(np.full(g.n, 0.3), 0.5)
    sq = upper_value(gamma, prob).sq_discrepancy
    prob = UpperProblem(prob.G, prob.d, g, prob.weights, UpperParams(0.0, 0.0, np.sqrt(sq)), lower_opts=TIGHT)
    ev = upper_gradient(gamma, prob)
    scale = np.linalg.norm(prob.G.adjoint(prob.G.apply(ev.m_star) - prob.d))
    assert np.linalg.norm(ev.grad_m) <= 1e-9 * scale


@pytest.mark.parametrize("shape", [(4, 4), (5, 5)])
def test_adjoint_equals_explicit_jacobian(rng, shape):
    g = Grid(*shape)
    prob = make_problem(rng, g, G=make_gaussian_blur(g, 0.8))
    prob.lower_opts = CgOptions(method="direct")
    gamma = random_gamma(rng, g)
    got = upper_gradient(gamma, prob).indirect_gradient
    expected = explicit_indirect(prob, gamma, upper_gradient(gamma, prob).grad_m)
    assert np.linalg.norm(got - expected) <= 1e-8 * np.linalg.norm(expected)


def test_negative_gradient_is_descent(rng):
    g = Grid(6, 5)
    prob = make_problem(rng, g)
    gamma = random_gamma(rng, g)
    ev = upper_gradient(gamma, prob)
    step = 1e-4 / np.linalg.norm(ev.gradient)
    assert upper_value(gamma - step * ev.gradient, prob).value < ev.value


def test_orientation_is_pi_periodic(rng):
    g = Grid(5, 5)
    prob = make_problem(rng, g, beta=0.0)
    gamma = random_gamma(rng, g)
    shifted = gamma.copy()
    shifted[::3] += np.pi
    shifted[-1] = gamma[-1]
    assert upper_value(shifted, prob).value == pytest.approx(upper_value(gamma, prob).value, rel=1e-9)
