"""Grid geometry, value types and the feasible box for the bilevel variable.

Images are stored as column-stacked vectors: pixel (row ``r``, column ``c``)
of an ``n_z x n_x`` array sits at linear index ``c * n_z + r``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HALF_PI = 0.5 * np.pi


class DimensionError(ValueError):
    """Raised when array lengths disagree with the grid."""


class ParameterError(ValueError):
    """Raised when a scalar parameter is outside its admissible range."""


@dataclass(frozen=True)
class Grid:
    """Rectangular ``n_z x n_x`` pixel grid with unit spacing."""

    n_x: int
    n_z: int

    def __post_init__(self):
        if int(self.n_x) != self.n_x or int(self.n_z) != self.n_z:
            raise ParameterError("grid sizes must be integers")
        if self.n_x < 1 or self.n_z < 1:
            raise ParameterError("grid sizes must be positive")

    @property
    def n(self) -> int:
        return self.n_x * self.n_z

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(n_z, n_x)``."""
        return (self.n_z, self.n_x)

    def index(self, row: int, col: int) -> int:
        return col * self.n_z + row

    def stack(self, array) -> np.ndarray:
        """Column-stack an ``(n_z, n_x)`` array into a length-``n`` vector."""
        array = np.asarray(array)
        if array.shape != self.shape:
            raise DimensionError(f"expected array of shape {self.shape}, got {array.shape}")
        return array.ravel(order="F")

    def unstack(self, vector) -> np.ndarray:
        vector = np.asarray(vector)
        if vector.shape != (self.n,):
            raise DimensionError(f"expected vector of length {self.n}, got shape {vector.shape}")
        return vector.reshape(self.shape, order="F")

    def check(self, vector, name="vector") -> np.ndarray:
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.n,):
            raise DimensionError(f"{name} has shape {vector.shape}, expected ({self.n},)")
        return vector


def _frozen_copy(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelImage:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_copy(self.grid.check(self.values, "values"))
        if not np.all(np.isfinite(values)):
            raise ValueError("model values must be finite")
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        return self.grid.unstack(self.values)


@dataclass(frozen=True)
class DataVector:
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_copy(self.values).ravel()
        if not np.all(np.isfinite(values)):
            raise ValueError("data values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class OrientationField:
    """Per-pixel tilt angles in radians, restricted to ``[-pi/2, pi/2]``."""

    grid: Grid
    theta: np.ndarray

    def __post_init__(self):
        theta = _frozen_copy(self.grid.check(self.theta, "theta"))
        if not np.all(np.isfinite(theta)) or np.any(np.abs(theta) > HALF_PI):
            raise ParameterError("theta must lie in [-pi/2, pi/2]")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def constant(cls, grid: Grid, angle: float = 0.0) -> "OrientationField":
        return cls(grid, np.full(grid.n, float(angle)))


@dataclass(frozen=True)
class InversionVector:
    theta: OrientationField
    mu: float

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu < 0:
            raise ParameterError("mu must be finite and nonnegative")

    @property
    def grid(self) -> Grid:
        return self.theta.grid

    def flat(self) -> np.ndarray:
        return pack_gamma(self.theta, self.mu)

    @classmethod
    def from_flat(cls, grid: Grid, gamma) -> "InversionVector":
        theta, mu = unpack_gamma(grid, gamma)
        return cls(OrientationField(grid, theta), mu)


@dataclass(frozen=True)
class AnisoWeights:
    """Weights on the rotated derivatives: ``sigma_x`` along x', ``sigma_z`` along z'."""

    sigma_x: float = 1.0
    sigma_z: float = 1e-3

    def __post_init__(self):
        if not (self.sigma_x > 0 and self.sigma_x >= self.sigma_z >= 0):
            raise ParameterError(
                f"need sigma_x >= sigma_z >= 0 and sigma_x > 0, got ({self.sigma_x}, {self.sigma_z})"
            )


@dataclass(frozen=True)
class UpperParams:
    alpha: float
    beta: float
    noise_bound: float
    delta: float = 1e-3

    def __post_init__(self):
        for name in ("alpha", "beta"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be nonnegative")
        for name in ("delta", "noise_bound"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")


@dataclass
class HistoryRecord:
    iteration: int
    upper_value: float
    sq_discrepancy: float
    mu: float
    dxprime_norm: float
    dzprime_norm: float
    rel_error: float | None = None


@dataclass
class SolveHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def append(self, record: HistoryRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("history iterations must be strictly increasing")
        if not self.records and record.iteration != 0:
            raise ValueError("history must start at iteration 0")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def pack_gamma(theta, mu: float, grid: Grid | None = None) -> np.ndarray:
    """Stack orientation angles and the regularization parameter into ``[theta; mu]``."""
    if isinstance(theta, OrientationField):
        grid = grid or theta.grid
        theta = theta.theta
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise DimensionError("theta must be one-dimensional")
    if grid is not None and theta.size != grid.n:
        raise DimensionError(f"theta has length {theta.size}, grid has {grid.n} pixels")
    return np.concatenate([theta, [float(mu)]])


def unpack_gamma(grid: Grid, gamma) -> tuple[np.ndarray, float]:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (grid.n + 1,):
        raise DimensionError(f"gamma has shape {gamma.shape}, expected ({grid.n + 1},)")
    return gamma[:-1].copy(), float(gamma[-1])


def box_bounds(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper bounds of the feasible set for ``gamma`` of length ``n + 1``."""
    lower = np.full(n + 1, -HALF_PI)
    upper = np.full(n + 1, HALF_PI)
    lower[-1] = 0.0
    upper[-1] = np.inf
    return lower, upper


def project_box(gamma) -> np.ndarray:
    """Clamp angles to ``[-pi/2, pi/2]`` and the last entry to ``[0, inf)``."""
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    lower, upper = box_bounds(gamma.size - 1)
    return np.clip(gamma, lower, upper)
