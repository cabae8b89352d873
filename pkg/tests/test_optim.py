import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, rosen, rosen_der

from anisoreg.optim import (
    CONVERGED_F, CONVERGED_PG, BoxQnOptions, NonFiniteEvaluation, minimize_box, projected_gradient,
)


def clamped_quadratic(c):
    return lambda x: (float(np.sum((x - c) ** 2)), 2 * (x - c))


def run_tracking(fun, x0, lo, hi, opts=None):
    seen = []
    res = minimize_box(fun, x0, lo, hi, opts, callback=lambda k, x, f, g: seen.append((x, f)))
    return res, seen


def test_quadratic_interior_minimum():
    c = np.array([0.3, -0.2, 1.1])
    res, seen = run_tracking(clamped_quadratic(c), np.zeros(3), -2 * np.ones(3), 2 * np.ones(3))
    assert np.max(np.abs(res.x - c)) <= 1e-8
    assert res.iterations <= 30
    assert res.status in (CONVERGED_PG, CONVERGED_F)


def test_quadratic_exterior_minimum_is_projection():
    lo, hi = np.array([-1.0, 0.0, -np.inf]), np.array([1.0, np.inf, 0.5])
    c = np.array([3.0, -2.0, 0.2])
    res, seen = run_tracking(clamped_quadratic(c), np.zeros(3), lo, hi)
    np.testing.assert_allclose(res.x, np.clip(c, lo, hi), atol=1e-8)
    for x, _ in seen:
        assert np.all(x >= lo) and np.all(x <= hi)


def test_rosenbrock_matches_reference_optimizer():
    lo, hi = np.full(2, -2.0), np.full(2, 2.0)
    x0 = np.array([-1.2, 1.0])
    opts = BoxQnOptions(pg_tolerance=1e-10, f_rel_tolerance=0.0, max_outer_iterations=500)
    res, seen = run_tracking(lambda x: (rosen(x), rosen_der(x)), x0, lo, hi, opts)
    assert res.fun <= 1e-8
    reference = minimize(rosen, x0, jac=rosen_der, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                         options={"ftol": 1e-15, "gtol": 1e-12})
    np.testing.assert_allclose(res.x, reference.x, atol=1e-4)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-4)
    for x, _ in seen:
        assert np.all(x >= lo) and np.all(x <= hi)


def test_values_are_monotone():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((8, 8))
    q = a @ a.T + np.eye(8)
    b = rng.standard_normal(8)
    fun = lambda x: (0.5 * x @ q @ x - b @ x, q @ x - b)
    res = minimize_box(fun, np.zeros(8), -0.1 * np.ones(8), 0.1 * np.ones(8))
    assert np.all(np.diff(res.values) <= 0)
    reference = minimize(lambda x: fun(x)[0], np.zeros(8), jac=lambda x: fun(x)[1], method="L-BFGS-B",
                         bounds=[(-0.1, 0.1)] * 8, options={"ftol": 1e-15, "gtol": 1e-12})
    assert res.fun <= reference.fun + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_quadratic_property(c):
    c = np.array(c)
    lo, hi = -np.ones(c.size), np.ones(c.size)
    res = minimize_box(clamped_quadratic(c), np.zeros(c.size), lo, hi)
    np.testing.assert_allclose(res.x, np.clip(c, lo, hi), atol=1e-7)


def test_projected_gradient_on_bounds():
    x = np.array([0.0, 1.0, 0.5])
    g = np.array([1.0, -1.0, 2.0])
    pg = projected_gradient(x, g, np.zeros(3), np.ones(3))
    np.testing.assert_allclose(pg, [0.0, 0.0, 2.0])


def test_rejects_infeasible_start():
    with pytest.raises(ValueError):
        minimize_box(clamped_quadratic(np.zeros(2)), np.array([3.0, 0.0]), -np.ones(2), np.ones(2))


def test_non_finite_evaluation_is_reported():
    def bad(x):
        return (np.nan, np.zeros_like(x)) if x[0] > 0.5 else (float(-x[0]), np.array([-1.0]))

    with pytest.raises(NonFiniteEvaluation) as info:
        minimize_box(bad, np.zeros(1), np.zeros(1), np.ones(1))
    assert info.value.x[0] > 0.5


def test_option_validation():
    with pytest.raises(ValueError):
        BoxQnOptions(memory=0)
    with pytest.raises(ValueError):
        BoxQnOptions(sufficient_decrease=0.95)
