"""Projected limited-memory BFGS for bound-constrained minimization.

Variables at a bound whose gradient pushes outward are frozen for the
iteration; the two-loop recursion acts on the remaining free variables and
trial points are projected back onto the box.  Step lengths come from
Armijo backtracking along the projected path, with a few doubling steps
when the curvature condition is clearly violated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CONVERGED_PG = "converged_pg"
CONVERGED_F = "converged_f"
MAX_ITER = "max_iter"
LINESEARCH_FAIL = "linesearch_fail"


class NonFiniteEvaluation(FloatingPointError):
    def __init__(self, x):
        super().__init__("objective or gradient is not finite at the given point")
        self.x = np.array(x)


@dataclass
class BoxQnOptions:
    memory: int = 10
    max_outer_iterations: int = 200
    pg_tolerance: float = 1e-6
    f_rel_tolerance: float = 1e-9
    sufficient_decrease: float = 1e-4
    curvature: float = 0.9
    max_linesearch: int = 25

    def __post_init__(self):
        if self.memory < 1 or self.max_outer_iterations < 1 or self.max_linesearch < 1:
            raise ValueError("memory and iteration limits must be >= 1")
        if not (self.pg_tolerance >= 0 and self.f_rel_tolerance >= 0):
            raise ValueError("tolerances must be nonnegative")
        if not 0 < self.sufficient_decrease < self.curvature < 1:
            raise ValueError("need 0 < sufficient_decrease < curvature < 1")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    status: str
    iterations: int
    n_evaluations: int
    values: list = field(default_factory=list)
    pg_norm: float = np.nan


def projected_gradient(x, g, lower, upper) -> np.ndarray:
    """Gradient with components that point out of the box at active bounds set to zero."""
    pg = g.copy()
    pg[(x <= lower) & (g > 0)] = 0.0
    pg[(x >= upper) & (g < 0)] = 0.0
    return pg


def _two_loop(q, pairs):
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        q = q - a * y
        alphas.append(a)
    s, y, _ = pairs[-1]
    r = q * ((s @ y) / (y @ y))
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        r = r + (a - rho * (y @ r)) * s
    return r


def _direction(g, free, memory):
    d = np.zeros_like(g)
    pairs = []
    for s, y in memory:
        sy = s[free] @ y[free]
        if sy > 1e-12 * np.linalg.norm(s[free]) * np.linalg.norm(y[free]):
            pairs.append((s[free], y[free], 1.0 / sy))
    if pairs:
        d[free] = -_two_loop(g[free], pairs)
    else:
        d[free] = -g[free]
    return d, bool(pairs)


def minimize_box(f_and_grad, x0, lower, upper, opts: BoxQnOptions | None = None, callback=None) -> OptimResult:
    """Minimize ``f`` over ``lower <= x <= upper``.

    ``f_and_grad(x)`` returns ``(value, gradient)``.  ``callback(k, x, f, g)``
    is called for the starting point (``k = 0``) and after every accepted step.
    """
    opts = opts or BoxQnOptions()
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.array(x0, dtype=float)
    if np.any(x < lower) or np.any(x > upper):
        raise ValueError("starting point is not feasible")
    n_evals = 0

    def evaluate(point):
        nonlocal n_evals
        n_evals += 1
        value, grad = f_and_grad(point)
        grad = np.asarray(grad, dtype=float)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteEvaluation(point)
        return float(value), grad

    f, g = evaluate(x)
    values = [f]
    if callback is not None:
        callback(0, x.copy(), f, g)
    pg_ref = np.abs(projected_gradient(x, g, lower, upper)).max(initial=0.0)
    memory = []
    status = MAX_ITER
    k = 0
    while True:
        pg_norm = np.abs(projected_gradient(x, g, lower, upper)).max(initial=0.0)
        if pg_norm <= opts.pg_tolerance * pg_ref or pg_norm == 0.0:
            status = CONVERGED_PG
            break
        if k >= opts.max_outer_iterations:
            status = MAX_ITER
            break

        free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
        d, quasi_newton = _direction(g, free, memory)
        if g @ d >= 0:
            memory.clear()
            d, quasi_newton = _direction(g, free, memory)
        d_norm = np.linalg.norm(d)
        if d_norm == 0.0:
            # gradient entries below the representable norm
            status = CONVERGED_PG
            break
        step = 1.0 if quasi_newton else min(1.0, 1.0 / d_norm)

        accepted = None
        for _ in range(opts.max_linesearch):
            trial = np.clip(x + step * d, lower, upper)
            s = trial - x
            slope = g @ s
            if not np.any(s) or slope >= 0:
                break
            f_trial, g_trial = evaluate(trial)
            if f_trial <= f + opts.sufficient_decrease * slope:
                accepted = (trial, f_trial, g_trial)
                break
            # safeguarded quadratic interpolation along the projected segment
            denom = 2.0 * (f_trial - f - slope)
            shrink = -slope / denom if denom > 0 else 0.5
            step *= min(max(shrink, 0.1), 0.5)

        if accepted is None:
            if memory:
                log.debug("line search failed; discarding curvature memory")
                memory.clear()
                continue
            status = LINESEARCH_FAIL
            break

        trial, f_trial, g_trial = accepted
        # expand while the curvature condition fails and the projection does not bind
        for _ in range(3):
            s = trial - x
            if g_trial @ s >= opts.curvature * (g @ s):
                break
            bigger = x + 2.0 * s
            if np.any(bigger < lower) or np.any(bigger > upper):
                break
            f_big, g_big = evaluate(bigger)
            if f_big > f_trial or f_big > f + opts.sufficient_decrease * (g @ (bigger - x)):
                break
            trial, f_trial, g_trial = bigger, f_big, g_big

        s, y = trial - x, g_trial - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            memory.append((s, y))
            if len(memory) > opts.memory:
                memory.pop(0)
        f_prev = f
        x, f, g = trial, f_trial, g_trial
        k += 1
        values.append(f)
        if callback is not None:
            callback(k, x.copy(), f, g)
        if f_prev - f <= opts.f_rel_tolerance * max(abs(f_prev), abs(f), 1.0):
            status = CONVERGED_F
            break

    pg_norm = np.abs(projected_gradient(x, g, lower, upper)).max(initial=0.0)
    return OptimResult(x, f, status, k, n_evals, values, pg_norm)
