"""Smoothed directional derivatives used by the orientation term of the upper level.

``hilbert_phase`` keeps only the phase of the derivative: each component has
frequency response ``i w / |w|`` (unit magnitude, zero at DC), applied to a
mirror-extended copy of the image.  ``finite_difference`` is the centered
``[1/2, 0, -1/2]`` stencil, kept for comparison.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .core import Grid, ParameterError
from .operators import LinearOperator

MODES = ("hilbert_phase", "finite_difference")


def hilbert_kernel_value(x: float, z: float) -> tuple[float, float]:
    """Continuous Hilbert-transform kernels ``(h_x, h_z)``; zero at the origin by odd symmetry."""
    r2 = x * x + z * z
    if r2 == 0.0:
        return 0.0, 0.0
    scale = -1.0 / (2.0 * np.pi * r2**1.5)
    return scale * x, scale * z


def hilbert_kernel_samples(radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Kernel samples on the integer grid ``[-radius, radius]^2`` (rows are z)."""
    t = np.arange(-radius, radius + 1, dtype=float)
    z, x = np.meshgrid(t, t, indexing="ij")
    r3 = np.hypot(x, z) ** 3
    with np.errstate(divide="ignore", invalid="ignore"):
        hx = np.where(r3 > 0, -x / (2 * np.pi * r3), 0.0)
        hz = np.where(r3 > 0, -z / (2 * np.pi * r3), 0.0)
    return hx, hz


def fd_kernels() -> tuple[np.ndarray, np.ndarray]:
    """Centered-difference stencils: ``h_x`` is 1x3, ``h_z`` is 3x1."""
    h = np.array([0.5, 0.0, -0.5])
    return h[None, :], h[:, None]


def riesz_transfer(shape) -> tuple[np.ndarray, np.ndarray]:
    """Phase-only transfer pair on an FFT grid of ``shape = (n_z, n_x)``."""
    wz = 2 * np.pi * np.fft.fftfreq(shape[0])
    wx = 2 * np.pi * np.fft.fftfreq(shape[1])
    wz, wx = np.meshgrid(wz, wx, indexing="ij")
    norm = np.hypot(wx, wz)
    norm[0, 0] = 1.0
    hx = 1j * wx / norm
    hz = 1j * wz / norm
    hx[0, 0] = hz[0, 0] = 0.0
    return hx, hz


def _centered_difference(n: int) -> sp.csr_matrix:
    mat = sp.lil_matrix((n, n))
    for j in range(1, n - 1):
        mat[j, j + 1] = 0.5
        mat[j, j - 1] = -0.5
    return mat.tocsr()


class SmoothedGradient(LinearOperator):
    """Linear map ``m -> [grad~_x m; grad~_z m]`` of length ``2N``."""

    def __init__(self, grid: Grid, mode: str = "hilbert_phase"):
        if mode not in MODES:
            raise ParameterError(f"unknown smoothed-gradient mode {mode!r}")
        self.grid = grid
        self.mode = mode
        self.in_dim = grid.n
        self.out_dim = 2 * grid.n
        if mode == "hilbert_phase":
            # Mirror about the last sample, wrap about the half-sample before the
            # first: a seamless even extension of odd period 2n - 1, so there
            # is no Nyquist bin and the transfer stays Hermitian.
            pad = ((0, grid.n_z - 1), (0, grid.n_x - 1))
            index = np.arange(grid.n).reshape(grid.shape, order="F")
            self._pad_index = np.pad(index, pad, mode="reflect")
            self.padded_shape = self._pad_index.shape
            self.transfer = riesz_transfer(self.padded_shape)
        else:
            self._blocks = (
                sp.kron(_centered_difference(grid.n_x), sp.identity(grid.n_z), format="csr"),
                sp.kron(sp.identity(grid.n_x), _centered_difference(grid.n_z), format="csr"),
            )

    def components_complex(self, m):
        """Unprojected complex filter output (hilbert mode); imaginary part is round-off."""
        spectrum = np.fft.fft2(np.asarray(m, dtype=float)[self._pad_index])
        nz, nx = self.grid.shape
        return tuple(np.fft.ifft2(h * spectrum)[:nz, :nx].ravel(order="F") for h in self.transfer)

    def components(self, m) -> tuple[np.ndarray, np.ndarray]:
        m = self.grid.check(m, "m")
        if self.mode == "finite_difference":
            return self._blocks[0] @ m, self._blocks[1] @ m
        gx, gz = self.components_complex(m)
        return gx.real.copy(), gz.real.copy()

    def components_adjoint(self, yx, yz) -> np.ndarray:
        if self.mode == "finite_difference":
            return self._blocks[0].T @ yx + self._blocks[1].T @ yz
        g = self.grid
        spectrum = np.zeros(self.padded_shape, dtype=complex)
        for h, y in zip(self.transfer, (yx, yz)):
            embedded = np.zeros(self.padded_shape)
            embedded[: g.n_z, : g.n_x] = g.unstack(y)
            spectrum += np.conj(h) * np.fft.fft2(embedded)
        back = np.fft.ifft2(spectrum).real
        return np.bincount(self._pad_index.ravel(), weights=back.ravel(), minlength=g.n)

    def _apply(self, x):
        return np.concatenate(self.components(x))

    def _adjoint(self, y):
        n = self.grid.n
        return self.components_adjoint(y[:n], y[n:])

    def blocks(self):
        if self.mode != "finite_difference":
            raise AttributeError("hilbert_phase mode has no sparse blocks")
        return self._blocks

    def to_matrix(self):
        if self.mode == "finite_difference":
            return sp.vstack(self._blocks, format="csr")
        return super().to_matrix()


def smoothed_gradient_apply(m, grid: Grid, mode: str = "hilbert_phase") -> np.ndarray:
    return SmoothedGradient(grid, mode).apply(m)
