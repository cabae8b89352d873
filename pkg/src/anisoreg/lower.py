"""Lower-level solve: ``(G^T G + mu M(theta)) m = G^T d``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .aniso import AnisoGram
from .core import AnisoWeights, Grid, ModelImage, ParameterError
from .operators import IdentityOperator, LinearOperator

DENSE_LIMIT = 4096


class SolverError(RuntimeError):
    """Base class for lower-level solver failures."""


class CgNotConverged(SolverError):
    def __init__(self, message, iterate, residual):
        super().__init__(message)
        self.iterate = iterate
        self.residual = residual


class NumericalBreakdown(SolverError):
    pass


@dataclass
class CgOptions:
    rel_tolerance: float = 1e-8
    max_iterations: int | None = None
    warm_start: np.ndarray | None = None
    method: str = "cg"

    def __post_init__(self):
        if not 0 < self.rel_tolerance < 1:
            raise ParameterError("rel_tolerance must be in (0, 1)")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")
        if self.method not in ("cg", "direct"):
            raise ParameterError(f"unknown lower solver method {self.method!r}")

    def iteration_cap(self, n: int) -> int:
        return self.max_iterations if self.max_iterations is not None else 10 * n


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float
    residual_history: list = field(default_factory=list)


def conjugate_gradient(apply, rhs, x0=None, rel_tolerance=1e-8, max_iterations=None, keep_iterates=False):
    """Plain CG for a symmetric positive definite operator given as a callable.

    Stops when ``||rhs - A x|| <= rel_tolerance * ||rhs||``.  With
    ``keep_iterates`` the iterates are stored in ``result.iterates``.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    max_iterations = 10 * n if max_iterations is None else max_iterations
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    rhs_norm = np.linalg.norm(rhs)
    result = CgResult(x, 0, 0.0)
    if keep_iterates:
        result.iterates = [x.copy()]
    if rhs_norm == 0.0:
        result.x = np.zeros(n)
        return result
    target = rel_tolerance * rhs_norm
    r = rhs - apply(x) if x0 is not None else rhs.copy()
    rr = r @ r
    result.residual_history.append(np.sqrt(rr))
    p = r.copy()
    k = 0
    while np.sqrt(rr) > target:
        if k >= max_iterations:
            raise CgNotConverged(
                f"CG did not reach relative residual {rel_tolerance:g} in {max_iterations} iterations "
                f"(residual {np.sqrt(rr) / rhs_norm:.3e})",
                x,
                np.sqrt(rr),
            )
        ap = apply(p)
        curvature = p @ ap
        if not np.isfinite(curvature) or curvature <= 0:
            raise NumericalBreakdown(f"CG breakdown: p^T A p = {curvature!r} at iteration {k}")
        step = rr / curvature
        x += step * p
        r -= step * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
        result.residual_history.append(np.sqrt(rr))
        if keep_iterates:
            result.iterates.append(x.copy())
    result.x = x
    result.iterations = k
    result.residual = float(np.sqrt(rr))
    return result


def normal_matrix(G: LinearOperator):
    """``G^T G`` as an explicit matrix, cached on the operator."""
    cached = getattr(G, "_normal_matrix", None)
    if cached is None:
        if isinstance(G, IdentityOperator):
            cached = sp.identity(G.in_dim, format="csc")
        else:
            mat = G.to_matrix()
            cached = (mat.T @ mat).tocsc() if sp.issparse(mat) else mat.T @ mat
            if sp.issparse(cached) and cached.nnz > 0.1 * cached.shape[0] ** 2:
                cached = cached.toarray()
        G._normal_matrix = cached
    return cached


class LowerHessian(LinearOperator):
    """``H v = G^T G v + mu M(theta) v``."""

    def __init__(self, G: LinearOperator, gram: AnisoGram, mu: float):
        if not mu >= 0:
            raise ParameterError("mu must be nonnegative")
        if G.in_dim != gram.in_dim:
            raise ParameterError("forward operator and Gram sizes disagree")
        self.G = G
        self.gram = gram
        self.mu = float(mu)
        self.in_dim = self.out_dim = G.in_dim
        self._factor = None

    def _apply(self, v):
        out = self.G.normal(v)
        if self.mu:
            out += self.mu * self.gram.apply(v)
        return out

    _adjoint = _apply

    def to_matrix(self):
        gtg = normal_matrix(self.G)
        reg = self.gram.to_matrix()
        if sp.issparse(gtg) and sp.issparse(reg):
            return (gtg + self.mu * reg).tocsc()
        reg = reg.toarray() if sp.issparse(reg) else reg
        gtg = gtg.toarray() if sp.issparse(gtg) else gtg
        return gtg + self.mu * reg

    def _factorize(self):
        if self._factor is None:
            mat = self.to_matrix()
            if sp.issparse(mat):
                try:
                    lu = splu(mat)
                except RuntimeError as exc:
                    raise NumericalBreakdown(f"lower Hessian is singular: {exc}") from exc
                self._factor = lu.solve
            else:
                try:
                    cho = scipy.linalg.cho_factor(mat)
                except np.linalg.LinAlgError as exc:
                    raise NumericalBreakdown(f"lower Hessian is not positive definite: {exc}") from exc
                self._factor = lambda b: scipy.linalg.cho_solve(cho, b)
        return self._factor

    def solve(self, rhs, opts: CgOptions | None = None, x0=None) -> CgResult:
        opts = opts or CgOptions()
        rhs = np.asarray(rhs, dtype=float)
        if opts.method == "direct":
            x = self._factorize()(rhs)
            if not np.all(np.isfinite(x)):
                raise NumericalBreakdown("direct lower solve produced non-finite values")
            return CgResult(x, 0, float(np.linalg.norm(rhs - self._apply(x))))
        if x0 is None:
            x0 = opts.warm_start
        return conjugate_gradient(self._apply, rhs, x0, opts.rel_tolerance, opts.iteration_cap(self.in_dim))


@dataclass
class LowerSolution:
    m_star: ModelImage
    iterations: int
    residual: float
    hessian: LowerHessian


def lower_solve(G: LinearOperator, d, theta, mu: float, w: AnisoWeights, opts: CgOptions | None = None,
                grid: Grid | None = None) -> LowerSolution:
    """Minimizer of ``1/2 ||G m - d||^2 + mu/2 m^T M(theta) m``."""
    grid = grid or G.grid
    gram = AnisoGram(grid, theta, w)
    hess = LowerHessian(G, gram, mu)
    res = hess.solve(G.adjoint(np.asarray(d, dtype=float)), opts)
    return LowerSolution(ModelImage(grid, res.x), res.iterations, res.residual, hess)


def hessian_solve(H: LowerHessian, rhs, opts: CgOptions | None = None, x0=None) -> np.ndarray:
    return H.solve(rhs, opts, x0).x


def dense_lower_solve(G: LinearOperator, d, theta, mu: float, w: AnisoWeights, grid: Grid | None = None):
    """Direct dense solve of the normal equations (small grids only)."""
    grid = grid or G.grid
    if grid.n > DENSE_LIMIT:
        raise ParameterError(f"dense solve limited to {DENSE_LIMIT} unknowns")
    hess = LowerHessian(G, AnisoGram(grid, theta, w), mu).to_matrix()
    hess = hess.toarray() if sp.issparse(hess) else hess
    gmat = G.to_matrix()
    gmat = gmat.toarray() if sp.issparse(gmat) else gmat
    return np.linalg.solve(hess, gmat.T @ np.asarray(d, dtype=float))
