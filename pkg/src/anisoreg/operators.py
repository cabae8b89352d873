"""Linear operators: the discrete gradient and the forward maps used in the experiments."""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator as _ScipyOperator

from .core import DimensionError, Grid, ParameterError


class LinearOperator:
    """Matrix-free linear map ``R^in_dim -> R^out_dim`` with an adjoint.

    Subclasses implement ``_apply`` and ``_adjoint`` on 1D float arrays;
    ``to_matrix`` falls back to probing with unit vectors.
    """

    in_dim: int
    out_dim: int

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.in_dim,):
            raise DimensionError(f"{type(self).__name__}.apply: expected length {self.in_dim}, got {x.shape}")
        return self._apply(x)

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.out_dim,):
            raise DimensionError(f"{type(self).__name__}.adjoint: expected length {self.out_dim}, got {y.shape}")
        return self._adjoint(y)

    def normal(self, x) -> np.ndarray:
        """``A^T A x``."""
        return self.adjoint(self.apply(x))

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    @property
    def shape(self):
        return (self.out_dim, self.in_dim)

    def to_matrix(self):
        """Explicit matrix (sparse when the operator has a cheap sparse form)."""
        eye = np.eye(self.in_dim)
        return np.column_stack([self._apply(eye[:, j]) for j in range(self.in_dim)])

    def aslinearoperator(self) -> _ScipyOperator:
        return _ScipyOperator(self.shape, matvec=self.apply, rmatvec=self.adjoint, dtype=float)


class MatrixOperator(LinearOperator):
    """Wraps an explicit dense or sparse matrix."""

    def __init__(self, matrix):
        self.matrix = sp.csr_matrix(matrix) if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
        self.out_dim, self.in_dim = self.matrix.shape

    def _apply(self, x):
        return np.asarray(self.matrix @ x).ravel()

    def _adjoint(self, y):
        return np.asarray(self.matrix.T @ y).ravel()

    def to_matrix(self):
        return self.matrix


class IdentityOperator(LinearOperator):
    def __init__(self, grid: Grid):
        self.grid = grid
        self.in_dim = self.out_dim = grid.n

    def _apply(self, x):
        return x.copy()

    _adjoint = _apply

    def to_matrix(self):
        return sp.identity(self.in_dim, format="csr")


def difference_matrix(n: int) -> sp.csr_matrix:
    """1D bidiagonal difference: 1 on the diagonal, -1 above it, last row zero."""
    main = np.ones(n)
    main[-1] = 0.0
    upper = -np.ones(n - 1)
    return sp.diags([main, upper], [0, 1], shape=(n, n), format="csr")


class GradientOperator(LinearOperator):
    """Forward-difference gradient ``[D_x (x) I; I (x) D_z]`` on column-stacked images.

    ``(grad_x m)[r, c] = m[r, c] - m[r, c+1]`` and
    ``(grad_z m)[r, c] = m[r, c] - m[r+1, c]``; the last column (resp. row)
    of each block is zero.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        self.in_dim = grid.n
        self.out_dim = 2 * grid.n

    def components(self, m) -> tuple[np.ndarray, np.ndarray]:
        a = self.grid.unstack(m)
        gx = np.zeros_like(a)
        gz = np.zeros_like(a)
        gx[:, :-1] = a[:, :-1] - a[:, 1:]
        gz[:-1, :] = a[:-1, :] - a[1:, :]
        return gx.ravel(order="F"), gz.ravel(order="F")

    def components_adjoint(self, yx, yz) -> np.ndarray:
        g = self.grid
        bx = g.unstack(yx).copy()
        bz = g.unstack(yz).copy()
        bx[:, -1] = 0.0
        bz[-1, :] = 0.0
        out = bx + bz
        out[:, 1:] -= bx[:, :-1]
        out[1:, :] -= bz[:-1, :]
        return out.ravel(order="F")

    def _apply(self, x):
        return np.concatenate(self.components(x))

    def _adjoint(self, y):
        n = self.grid.n
        return self.components_adjoint(y[:n], y[n:])

    def blocks(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Sparse ``(grad_x, grad_z)`` assembled as Kronecker products."""
        g = self.grid
        gx = sp.kron(difference_matrix(g.n_x), sp.identity(g.n_z), format="csr")
        gz = sp.kron(sp.identity(g.n_x), difference_matrix(g.n_z), format="csr")
        return gx, gz

    def to_matrix(self):
        return sp.vstack(self.blocks(), format="csr")


def make_gradient(grid: Grid) -> GradientOperator:
    return GradientOperator(grid)


def make_identity(grid: Grid) -> IdentityOperator:
    return IdentityOperator(grid)


def gaussian_kernel_1d(psf_std: float) -> np.ndarray:
    """Unit-sum Gaussian samples on ``[-ceil(4 std), ceil(4 std)]``."""
    radius = int(math.ceil(4.0 * psf_std))
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / psf_std) ** 2)
    return k / k.sum()


def _toeplitz_blur(n: int, k1d: np.ndarray) -> np.ndarray:
    radius = (k1d.size - 1) // 2
    offsets = np.arange(n)[:, None] - np.arange(n)[None, :]
    inside = np.abs(offsets) <= radius
    mat = np.zeros((n, n))
    mat[inside] = k1d[offsets[inside] + radius]
    return mat


class GaussianBlur(LinearOperator):
    """Convolution with a separable Gaussian PSF and zero boundary conditions.

    The 2D kernel is the outer product of two unit-sum 1D kernels, so the
    operator factors as ``B_x (x) B_z`` and is applied as ``B_z A B_x^T``.
    """

    def __init__(self, grid: Grid, psf_std: float):
        if not psf_std > 0:
            raise ParameterError("psf_std must be positive")
        self.grid = grid
        self.psf_std = float(psf_std)
        self.in_dim = self.out_dim = grid.n
        self.kernel_1d = gaussian_kernel_1d(psf_std)
        self.blur_z = _toeplitz_blur(grid.n_z, self.kernel_1d)
        self.blur_x = _toeplitz_blur(grid.n_x, self.kernel_1d)

    @property
    def kernel(self) -> np.ndarray:
        return np.outer(self.kernel_1d, self.kernel_1d)

    def _apply(self, x):
        a = self.grid.unstack(x)
        return (self.blur_z @ a @ self.blur_x.T).ravel(order="F")

    def _adjoint(self, y):
        b = self.grid.unstack(y)
        return (self.blur_z.T @ b @ self.blur_x).ravel(order="F")

    def to_matrix(self):
        return np.kron(self.blur_x, self.blur_z)


def make_gaussian_blur(grid: Grid, psf_std: float) -> GaussianBlur:
    return GaussianBlur(grid, psf_std)


def ray_cell_lengths(grid: Grid, start, end) -> tuple[np.ndarray, np.ndarray]:
    """Exact intersection lengths of the segment ``start -> end`` with grid cells.

    Points are ``(x, z)`` in cell units; cell ``(r, c)`` covers
    ``[c, c+1] x [r, r+1]``. Returns column-stacked pixel indices and lengths.
    """
    x0, z0 = map(float, start)
    x1, z1 = map(float, end)
    dx, dz = x1 - x0, z1 - z0
    length = math.hypot(dx, dz)
    if length == 0.0:
        return np.zeros(0, dtype=int), np.zeros(0)
    ts = [np.array([0.0, 1.0])]
    for p0, dp, n in ((x0, dx, grid.n_x), (z0, dz, grid.n_z)):
        if dp != 0.0:
            lo, hi = sorted((p0, p0 + dp))
            lines = np.arange(max(math.ceil(lo), 0), min(math.floor(hi), n) + 1, dtype=float)
            ts.append((lines - p0) / dp)
    t = np.unique(np.clip(np.concatenate(ts), 0.0, 1.0))
    mid = 0.5 * (t[:-1] + t[1:])
    seg = np.diff(t) * length
    xm = x0 + mid * dx
    zm = z0 + mid * dz
    inside = (xm >= 0) & (xm <= grid.n_x) & (zm >= 0) & (zm <= grid.n_z) & (seg > 0)
    cols = np.clip(np.floor(xm[inside]).astype(int), 0, grid.n_x - 1)
    rows = np.clip(np.floor(zm[inside]).astype(int), 0, grid.n_z - 1)
    return cols * grid.n_z + rows, seg[inside]


def tomo_geometry(grid: Grid, n_sources: int, n_receivers: int) -> tuple[np.ndarray, np.ndarray]:
    """Sources equispaced on the right edge; receivers along the left then top edge."""
    zs = (np.arange(n_sources) + 0.5) * grid.n_z / n_sources
    sources = np.column_stack([np.full(n_sources, float(grid.n_x)), zs])
    arc = (np.arange(n_receivers) + 0.5) * (grid.n_z + grid.n_x) / n_receivers
    on_left = arc < grid.n_z
    receivers = np.where(
        on_left[:, None],
        np.column_stack([np.zeros(n_receivers), grid.n_z - arc]),
        np.column_stack([arc - grid.n_z, np.zeros(n_receivers)]),
    )
    return sources, receivers


class TomographyOperator(MatrixOperator):
    """Straight-ray transmission tomography; row ``s * n_receivers + r`` is ray (s, r)."""

    def __init__(self, grid: Grid, n_sources: int, n_receivers: int):
        if n_sources < 1 or n_receivers < 1:
            raise ParameterError("need at least one source and one receiver")
        self.grid = grid
        self.sources, self.receivers = tomo_geometry(grid, n_sources, n_receivers)
        rows, cols, vals = [], [], []
        for s, src in enumerate(self.sources):
            for r, rec in enumerate(self.receivers):
                idx, lengths = ray_cell_lengths(grid, src, rec)
                rows.append(np.full(idx.size, s * n_receivers + r))
                cols.append(idx)
                vals.append(lengths)
        shape = (n_sources * n_receivers, grid.n)
        matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
        ).tocsr()
        matrix.sum_duplicates()
        super().__init__(matrix)


def make_tomo(grid: Grid, n_sources: int, n_receivers: int) -> TomographyOperator:
    return TomographyOperator(grid, n_sources, n_receivers)


def dix_columns(n_x: int, keep_fraction: float, seed: int | None = None) -> np.ndarray:
    """Approximately equispaced column indices; ``seed`` jitters each pick within its slot."""
    if not 0 < keep_fraction <= 1:
        raise ParameterError("keep_fraction must be in (0, 1]")
    count = math.ceil(keep_fraction * n_x - 1e-9)
    if count < 1:
        raise ParameterError("keep_fraction selects no columns")
    if seed is None:
        offsets = np.full(count, 0.5)
    else:
        offsets = np.random.default_rng(seed).uniform(0.0, 1.0, count)
    cols = np.floor((np.arange(count) + offsets) * n_x / count).astype(int)
    return np.unique(np.clip(cols, 0, n_x - 1))


class DixOperator(LinearOperator):
    """Causal integration (lower-triangular ones) down each kept column."""

    def __init__(self, grid: Grid, columns):
        self.grid = grid
        self.columns = np.asarray(columns, dtype=int)
        if self.columns.size == 0:
            raise ParameterError("Dix operator needs at least one column")
        self.in_dim = grid.n
        self.out_dim = grid.n_z * self.columns.size

    def _apply(self, x):
        a = self.grid.unstack(x)
        return np.cumsum(a[:, self.columns], axis=0).ravel(order="F")

    def _adjoint(self, y):
        b = y.reshape(self.grid.n_z, self.columns.size, order="F")
        out = np.zeros(self.grid.shape)
        out[:, self.columns] = np.cumsum(b[::-1], axis=0)[::-1]
        return out.ravel(order="F")

    def to_matrix(self):
        g = self.grid
        select = sp.csr_matrix(
            (np.ones(self.columns.size), (np.arange(self.columns.size), self.columns)),
            shape=(self.columns.size, g.n_x),
        )
        causal = sp.csr_matrix(np.tril(np.ones((g.n_z, g.n_z))))
        return sp.kron(select, causal, format="csr")


def make_dix(grid: Grid, keep_fraction: float, seed: int | None = None) -> tuple[DixOperator, np.ndarray]:
    columns = dix_columns(grid.n_x, keep_fraction, seed)
    return DixOperator(grid, columns), columns
