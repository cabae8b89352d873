"""Rotated, weighted gradient penalty and the Gram operator of the lower-level problem.

For a pixel with gradient ``g = (g_x, g_z)`` and tilt ``theta`` the penalty is
``sigma_x <p, g>^2 + sigma_z <q, g>^2`` with ``p = (cos, sin)`` and
``q = (-sin, cos)``.  Summed over pixels this is ``m^T M(theta) m`` where
``M = grad^T A(theta) grad`` and ``A_i = R_i^T Sigma R_i`` is a symmetric 2x2
tensor per pixel.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .core import AnisoWeights, DimensionError, Grid
from .operators import GradientOperator, LinearOperator


def rotation(theta: float) -> np.ndarray:
    """Rows are ``x'(theta) = (cos, sin)`` and ``z'(theta) = (-sin, cos)``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def rotation_derivative(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, c], [-c, -s]])


def local_penalty(g, theta: float, w: AnisoWeights) -> float:
    g = np.asarray(g, dtype=float)
    along, across = rotation(theta) @ g
    return float(w.sigma_x * along**2 + w.sigma_z * across**2)


def tensor_entries(theta, w: AnisoWeights):
    """Entries ``(a, b, d)`` of ``A = [[a, b], [b, d]] = R^T Sigma R`` per pixel."""
    c, s = np.cos(theta), np.sin(theta)
    a = w.sigma_x * c * c + w.sigma_z * s * s
    b = (w.sigma_x - w.sigma_z) * c * s
    d = w.sigma_x * s * s + w.sigma_z * c * c
    return a, b, d


def tensor_derivative_entries(theta, w: AnisoWeights):
    """``dA/dtheta`` per pixel, same layout as :func:`tensor_entries`."""
    gap = w.sigma_x - w.sigma_z
    s2, c2 = np.sin(2 * theta), np.cos(2 * theta)
    return -gap * s2, gap * c2, gap * s2


def _tensor_form(entries, ux, uz, vx, vz):
    a, b, d = entries
    return a * ux * vx + b * (ux * vz + uz * vx) + d * uz * vz


def directional_components(theta, gx, gz):
    """Derivatives along ``x'`` and ``z'`` from gradient components."""
    c, s = np.cos(theta), np.sin(theta)
    return c * gx + s * gz, -s * gx + c * gz


def _theta_array(theta, grid: Grid) -> np.ndarray:
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float)
    if theta.shape != (grid.n,):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({grid.n},)")
    return theta


class AnisoGram(LinearOperator):
    """Symmetric PSD operator ``M(theta) v = grad^T A(theta) grad v``.

    ``grad`` defaults to the forward-difference gradient; any operator that
    exposes ``components``/``components_adjoint`` (e.g. a smoothed gradient)
    may be used instead.
    """

    def __init__(self, grid: Grid, theta, weights: AnisoWeights, grad=None):
        self.grid = grid
        self.theta = _theta_array(theta, grid)
        self.weights = weights
        self.grad = grad if grad is not None else GradientOperator(grid)
        self.in_dim = self.out_dim = grid.n
        self.entries = tensor_entries(self.theta, weights)

    def _apply(self, v):
        gx, gz = self.grad.components(v)
        a, b, d = self.entries
        return self.grad.components_adjoint(a * gx + b * gz, b * gx + d * gz)

    _adjoint = _apply

    def quadratic(self, v) -> float:
        gx, gz = self.grad.components(v)
        return float(np.sum(_tensor_form(self.entries, gx, gz, gx, gz)))

    def to_matrix(self):
        try:
            gx, gz = self.grad.blocks()
        except AttributeError:
            return super().to_matrix()
        a, b, d = (sp.diags(e) for e in self.entries)
        return (gx.T @ (a @ gx + b @ gz) + gz.T @ (b @ gx + d @ gz)).tocsr()


def total_penalty(m, theta, w: AnisoWeights, grad) -> float:
    """Sum of :func:`local_penalty` over all pixels, using ``grad`` for the gradient."""
    grid = grad.grid
    m = grid.check(m, "m")
    theta = _theta_array(theta, grid)
    gx, gz = grad.components(m)
    return float(np.sum(_tensor_form(tensor_entries(theta, w), gx, gz, gx, gz)))


def gram_apply(theta, w: AnisoWeights, v, grid: Grid, grad=None) -> np.ndarray:
    return AnisoGram(grid, theta, w, grad).apply(v)


def local_stencil(grid: Grid, i: int) -> sp.csr_matrix:
    """The two rows ``e_i^T grad_x`` and ``e_i^T grad_z`` as a sparse 2 x N matrix."""
    if not 0 <= i < grid.n:
        raise IndexError(f"pixel index {i} outside [0, {grid.n})")
    rows, cols, vals = [], [], []
    r, c = i % grid.n_z, i // grid.n_z
    if c < grid.n_x - 1:
        rows += [0, 0]
        cols += [i, i + grid.n_z]
        vals += [1.0, -1.0]
    if r < grid.n_z - 1:
        rows += [1, 1]
        cols += [i, i + 1]
        vals += [1.0, -1.0]
    return sp.csr_matrix((vals, (rows, cols)), shape=(2, grid.n))


def _local_gradient(grid: Grid, i: int, u) -> tuple[float, float]:
    r, c = i % grid.n_z, i // grid.n_z
    gx = u[i] - u[i + grid.n_z] if c < grid.n_x - 1 else 0.0
    gz = u[i] - u[i + 1] if r < grid.n_z - 1 else 0.0
    return gx, gz


def gram_theta_directional(theta, w: AnisoWeights, i: int, u, v, grid: Grid, grad=None) -> float:
    """``u^T (dM/dtheta_i) v`` touching only pixel ``i``'s stencil.

    With ``grad`` given (e.g. a smoothed gradient) the full components are
    computed first, since such stencils are not local.
    """
    theta = _theta_array(theta, grid)
    if not 0 <= i < grid.n:
        raise IndexError(f"pixel index {i} outside [0, {grid.n})")
    if grad is None or isinstance(grad, GradientOperator):
        ux, uz = _local_gradient(grid, i, u)
        vx, vz = _local_gradient(grid, i, v)
    else:
        ux, uz = (comp[i] for comp in grad.components(u))
        vx, vz = (comp[i] for comp in grad.components(v))
    entries = tensor_derivative_entries(theta[i], w)
    return float(_tensor_form(entries, ux, uz, vx, vz))


def gram_theta_all(theta, w: AnisoWeights, u_components, v_components) -> np.ndarray:
    """Vector of ``u^T (dM/dtheta_i) v`` for all pixels from precomputed gradients."""
    ux, uz = u_components
    vx, vz = v_components
    return _tensor_form(tensor_derivative_entries(np.asarray(theta, dtype=float), w), ux, uz, vx, vz)
