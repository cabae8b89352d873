"""Upper-level objective and its reduced gradient via one adjoint solve.

``U(gamma) = 1/2 sqrt((||G m* - d||^2 - eps^2)^2 + delta^2)
           + alpha/2 sum_i ||R(theta_i) (grad~ m*)_i||^2_Sigma
           + beta/2 ||grad theta||^2``

with ``m* = m*(gamma)`` the lower-level minimizer and ``grad~`` a smoothed
gradient.  The total gradient is the explicit part plus ``J^T grad_m U``,
where ``J = dm*/dgamma`` is never formed: a single solve ``H w = grad_m U``
gives ``J^T grad_m U = -[mu w^T (dM/dtheta_i) m*]_i, -w^T M m*``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aniso import AnisoGram, directional_components, gram_theta_all, tensor_entries
from .core import AnisoWeights, DimensionError, Grid, UpperParams, unpack_gamma
from .lower import CgOptions, LowerHessian, NumericalBreakdown
from .operators import GradientOperator, LinearOperator
from .smoothgrad import SmoothedGradient


def smoothed_discrepancy(sq_residual: float, eps2: float, delta: float) -> float:
    return 0.5 * float(np.hypot(sq_residual - eps2, delta))


def smoothed_discrepancy_slope(sq_residual: float, eps2: float, delta: float) -> float:
    """Derivative of :func:`smoothed_discrepancy` with respect to ``sq_residual``."""
    gap = sq_residual - eps2
    return 0.5 * gap / float(np.hypot(gap, delta))


def orientation_gradient(grid: Grid, mode: str):
    """Gradient operator used inside the orientation term."""
    if mode == "forward":
        return GradientOperator(grid)
    return SmoothedGradient(grid, mode)


@dataclass
class UpperProblem:
    G: LinearOperator
    d: np.ndarray
    grid: Grid
    weights: AnisoWeights
    params: UpperParams
    lower_opts: CgOptions = field(default_factory=CgOptions)
    smooth_mode: str = "hilbert_phase"
    warm_start: bool = True

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        if self.d.shape != (self.G.out_dim,):
            raise DimensionError(f"data has shape {self.d.shape}, operator expects ({self.G.out_dim},)")
        self.grad = GradientOperator(self.grid)
        self.smooth_grad = orientation_gradient(self.grid, self.smooth_mode)
        self.gtd = self.G.adjoint(self.d)
        self._last_m = None
        self._last_adjoint = None

    @property
    def eps2(self) -> float:
        return self.params.noise_bound**2


@dataclass
class UpperEval:
    value: float
    m_star: np.ndarray
    sq_discrepancy: float
    discrepancy_term: float
    orientation_term: float
    smoothness_term: float
    dxprime_norm: float
    dzprime_norm: float
    lower_iterations: int = 0
    adjoint_iterations: int = 0
    gradient: np.ndarray | None = None
    direct_gradient: np.ndarray | None = None
    indirect_gradient: np.ndarray | None = None
    grad_m: np.ndarray | None = None


def _solve_lower(prob: UpperProblem, theta, mu):
    hess = LowerHessian(prob.G, AnisoGram(prob.grid, theta, prob.weights, prob.grad), mu)
    x0 = prob._last_m if prob.warm_start else None
    res = hess.solve(prob.gtd, prob.lower_opts, x0)
    if prob.warm_start:
        prob._last_m = res.x.copy()
    return hess, res


def _evaluate(gamma, prob: UpperProblem, with_gradient: bool) -> UpperEval:
    theta, mu = unpack_gamma(prob.grid, gamma)
    hess, lower = _solve_lower(prob, theta, mu)
    m = lower.x
    params = prob.params

    residual = prob.G.apply(m) - prob.d
    sq = float(residual @ residual)
    disc = smoothed_discrepancy(sq, prob.eps2, params.delta)

    sgx, sgz = prob.smooth_grad.components(m)
    entries = tensor_entries(theta, prob.weights)
    a, b, dd = entries
    tx, tz = a * sgx + b * sgz, b * sgx + dd * sgz
    orient = 0.5 * params.alpha * float(sgx @ tx + sgz @ tz)

    tgx, tgz = prob.grad.components(theta)
    smooth = 0.5 * params.beta * float(tgx @ tgx + tgz @ tgz)

    along, across = directional_components(theta, sgx, sgz)
    ev = UpperEval(
        value=disc + orient + smooth,
        m_star=m,
        sq_discrepancy=sq,
        discrepancy_term=disc,
        orientation_term=orient,
        smoothness_term=smooth,
        dxprime_norm=float(np.linalg.norm(along)),
        dzprime_norm=float(np.linalg.norm(across)),
        lower_iterations=lower.iterations,
    )
    if not with_gradient:
        return ev

    n = prob.grid.n
    direct = np.zeros(n + 1)
    direct[:n] = 0.5 * params.alpha * gram_theta_all(theta, prob.weights, (sgx, sgz), (sgx, sgz))
    direct[:n] += params.beta * prob.grad.components_adjoint(tgx, tgz)

    slope = 2.0 * smoothed_discrepancy_slope(sq, prob.eps2, params.delta)
    grad_m = slope * prob.G.adjoint(residual)
    if params.alpha:
        grad_m += params.alpha * prob.smooth_grad.components_adjoint(tx, tz)

    x0 = prob._last_adjoint if prob.warm_start else None
    adj = hess.solve(grad_m, prob.lower_opts, x0)
    w = adj.x
    if prob.warm_start:
        prob._last_adjoint = w.copy()

    gw = prob.grad.components(w)
    gm = prob.grad.components(m)
    indirect = np.empty(n + 1)
    indirect[:n] = -mu * gram_theta_all(theta, prob.weights, gw, gm)
    indirect[n] = -float(np.sum(a * gw[0] * gm[0] + b * (gw[0] * gm[1] + gw[1] * gm[0]) + dd * gw[1] * gm[1]))

    total = direct + indirect
    if not np.all(np.isfinite(total)):
        raise NumericalBreakdown("upper-level gradient has non-finite entries")
    ev.gradient = total
    ev.direct_gradient = direct
    ev.indirect_gradient = indirect
    ev.grad_m = grad_m
    ev.adjoint_iterations = adj.iterations
    return ev


def upper_value(gamma, prob: UpperProblem) -> UpperEval:
    return _evaluate(gamma, prob, with_gradient=False)


def upper_gradient(gamma, prob: UpperProblem) -> UpperEval:
    return _evaluate(gamma, prob, with_gradient=True)


def gradient_check(prob: UpperProblem, gamma, step: float = 1e-6, floor: float = 1e-3) -> float:
    """Max componentwise relative error between ``upper_gradient`` and central differences.

    Each component's error is divided by ``max(|fd_i|, floor * max|fd|)``.
    """
    gamma = np.asarray(gamma, dtype=float)
    analytic = upper_gradient(gamma, prob).gradient
    fd = np.empty_like(gamma)
    for j in range(gamma.size):
        h = step * max(1.0, abs(gamma[j]))
        e = np.zeros_like(gamma)
        e[j] = h
        fd[j] = (upper_value(gamma + e, prob).value - upper_value(gamma - e, prob).value) / (2 * h)
    scale = np.maximum(np.abs(fd), floor * np.abs(fd).max())
    return float(np.max(np.abs(analytic - fd) / scale))
