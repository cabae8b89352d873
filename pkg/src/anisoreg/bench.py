"""Synthetic phantoms, noise, error metrics, the isotropic baseline and experiment presets."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AnisoWeights, DataVector, Grid, HistoryRecord, ModelImage, OrientationField, ParameterError,
    SolveHistory, UpperParams, box_bounds, pack_gamma,
)
from .lower import CgOptions
from .operators import make_dix, make_gaussian_blur, make_identity, make_tomo
from .optim import BoxQnOptions, minimize_box
from .smoothgrad import SmoothedGradient
from .upper import UpperProblem, upper_gradient

log = logging.getLogger(__name__)

PROBLEMS = ("denoise", "deblur", "tomo", "dix")
PHANTOMS = ("stripes", "piecewise_layers", "crossing_lines", "velocity_layers")


@dataclass
class Phantom:
    image: ModelImage
    true_theta: OrientationField | None
    descriptor: str


def _pixel_centers(grid: Grid):
    z, x = np.meshgrid(np.arange(grid.n_z) + 0.5, np.arange(grid.n_x) + 0.5, indexing="ij")
    return x, z


def _wrap_angle(theta):
    """Map angles to ``[-pi/2, pi/2]`` modulo pi."""
    return (np.asarray(theta) + 0.5 * np.pi) % np.pi - 0.5 * np.pi


def stripes(grid: Grid, angle: float, wavelength: float = 8.0) -> Phantom:
    """Sinusoidal stripes elongated along ``(cos angle, sin angle)`` in ``(x, z)``."""
    x, z = _pixel_centers(grid)
    across = -math.sin(angle) * x + math.cos(angle) * z
    img = np.sin(2 * np.pi * across / wavelength)
    theta = OrientationField.constant(grid, float(_wrap_angle(angle)))
    return Phantom(ModelImage(grid, grid.stack(img)), theta, f"stripes({math.degrees(angle):g})")


def piecewise_layers(grid: Grid, angle: float, n_layers: int = 6, seed: int = 0) -> Phantom:
    """Dipping layers of constant value, smoothed over about one pixel."""
    x, z = _pixel_centers(grid)
    across = -math.sin(angle) * (x - grid.n_x / 2) + math.cos(angle) * (z - grid.n_z / 2)
    extent = 0.5 * (abs(math.sin(angle)) * grid.n_x + abs(math.cos(angle)) * grid.n_z)
    edges = np.linspace(-extent, extent, n_layers + 1)[1:-1]
    levels = np.random.default_rng(seed).uniform(0.2, 1.0, n_layers)
    img = np.full(grid.shape, levels[0])
    for edge, lo, hi in zip(edges, levels[:-1], levels[1:]):
        img += (hi - lo) * 0.5 * (1 + np.tanh((across - edge) / 0.75))
    theta = OrientationField.constant(grid, float(_wrap_angle(angle)))
    return Phantom(ModelImage(grid, grid.stack(img)), theta, f"piecewise_layers({math.degrees(angle):g})")


def crossing_lines(grid: Grid, angles=(math.pi / 6, -math.pi / 4), spacing: float = 10.0, width: float = 1.2) -> Phantom:
    """Two families of thin bright lines; orientation is undefined where they cross."""
    x, z = _pixel_centers(grid)
    img = np.zeros(grid.shape)
    for angle in angles:
        across = -math.sin(angle) * x + math.cos(angle) * z
        dist = np.abs((across + 0.5 * spacing) % spacing - 0.5 * spacing)
        img = np.maximum(img, np.exp(-0.5 * (dist / width) ** 2))
    return Phantom(ModelImage(grid, grid.stack(img)), None, "crossing_lines")


def velocity_layers(grid: Grid, amplitude: float = 6.0, period: float | None = None,
                    n_layers: int = 7, v_top: float = 1.5, v_bottom: float = 4.5) -> Phantom:
    """Gently folded layered interval velocity increasing with depth.

    Layer boundaries follow ``z = z_k + amplitude * sin(2 pi x / period)``, so
    the true tilt is ``atan(dz/dx)`` of that curve.
    """
    period = period or 1.5 * grid.n_x
    x, z = _pixel_centers(grid)
    fold = amplitude * np.sin(2 * np.pi * x / period)
    depth = (z - fold) / grid.n_z
    edges = np.linspace(0, 1, n_layers + 1)[1:-1]
    steps = np.linspace(v_top, v_bottom, n_layers)
    img = np.full(grid.shape, steps[0])
    for edge, lo, hi in zip(edges, steps[:-1], steps[1:]):
        img += (hi - lo) * 0.5 * (1 + np.tanh((depth - edge) * grid.n_z / 0.75))
    slope = amplitude * 2 * np.pi / period * np.cos(2 * np.pi * x / period)
    theta = OrientationField(grid, grid.stack(np.arctan(slope)))
    return Phantom(ModelImage(grid, grid.stack(img)), theta, "velocity_layers")


def make_phantom(grid: Grid, kind: str, angle_deg: float = 30.0) -> Phantom:
    angle = math.radians(angle_deg)
    if kind == "stripes":
        return stripes(grid, angle)
    if kind == "piecewise_layers":
        return piecewise_layers(grid, angle)
    if kind == "crossing_lines":
        return crossing_lines(grid)
    if kind == "velocity_layers":
        return velocity_layers(grid)
    raise ParameterError(f"unknown phantom {kind!r}")


def add_noise(clean, rel_level: float, seed: int | None = None) -> tuple[DataVector, float]:
    """White Gaussian noise rescaled so that ``||e|| / ||clean|| == rel_level``."""
    clean = np.asarray(getattr(clean, "values", clean), dtype=float)
    if rel_level < 0:
        raise ParameterError("noise level must be nonnegative")
    if rel_level == 0:
        return DataVector(clean), 0.0
    clean_norm = np.linalg.norm(clean)
    if clean_norm == 0:
        raise ParameterError("cannot scale relative noise on zero data")
    e = np.random.default_rng(seed).standard_normal(clean.size)
    e *= rel_level * clean_norm / np.linalg.norm(e)
    return DataVector(clean + e), float(np.linalg.norm(e))


def rel_error(m, m_true) -> float:
    m = np.asarray(getattr(m, "values", m), dtype=float)
    m_true = np.asarray(getattr(m_true, "values", m_true), dtype=float)
    if m.shape != m_true.shape:
        raise ParameterError("images have different sizes")
    ref = np.linalg.norm(m_true)
    if ref == 0:
        raise ParameterError("reference image is zero")
    return float(np.linalg.norm(m - m_true) / ref)


def theta_error(theta, theta_true, mask) -> float:
    """Median angular error modulo pi over ``mask``, in radians."""
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float)
    theta_true = np.asarray(getattr(theta_true, "theta", theta_true), dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ParameterError("empty mask")
    delta = np.abs(theta - theta_true)[mask] % np.pi
    return float(np.median(np.minimum(delta, np.pi - delta)))


def significant_gradient_mask(m, grid: Grid, fraction: float = 0.1, mode: str = "hilbert_phase") -> np.ndarray:
    gx, gz = SmoothedGradient(grid, mode).components(np.asarray(getattr(m, "values", m)))
    mag = np.hypot(gx, gz)
    return mag >= fraction * mag.max()


@dataclass
class BaselineResult:
    m: np.ndarray
    mu: float
    sq_discrepancy: float
    status: str
    iterations: int
    history: list = field(default_factory=list)


def bracket_discrepancy(prob: UpperProblem, mu_max: float = 1e6, factor: float = 10.0, mu_min: float = 1e-8):
    """Scan ``mu`` downward until the isotropic residual drops below the noise bound.

    Returns ``(lo, hi)`` with ``sq(lo) < eps^2 <= sq(hi)`` (``lo`` may be 0 when
    the scan reaches ``mu_min``).
    """
    theta0 = np.zeros(prob.grid.n)
    hi = mu_max
    while hi > mu_min:
        lo = hi / factor
        sq = upper_gradient(pack_gamma(theta0, lo), prob).sq_discrepancy
        if sq < prob.eps2:
            return lo, hi
        hi = lo
    return 0.0, hi


def isotropic_baseline(G, d, noise_bound: float, grid: Grid | None = None, mu0: float | None = None,
                       delta: float = 1e-3, lower_opts: CgOptions | None = None,
                       opts: BoxQnOptions | None = None, mu_floor_fraction: float = 1e-3) -> BaselineResult:
    """Gradient-regularized Tikhonov with ``mu`` chosen by the smoothed discrepancy principle.

    Without ``mu0`` the start is the geometric midpoint of a decade bracket
    around the discrepancy crossing; the one-variable box quasi-Newton solve
    then refines it.  ``mu`` is kept above ``mu_floor_fraction * mu0`` so the
    lower level stays uniquely solvable for rank-deficient ``G``.
    """
    grid = grid or G.grid
    prob = UpperProblem(
        G, np.asarray(getattr(d, "values", d)), grid, AnisoWeights(1.0, 1.0),
        UpperParams(alpha=0.0, beta=0.0, noise_bound=noise_bound, delta=delta),
        lower_opts or CgOptions(), smooth_mode="forward",
    )
    theta0 = np.zeros(grid.n)
    if mu0 is None:
        lo, hi = bracket_discrepancy(prob)
        mu0 = float(np.sqrt(lo * hi)) if lo > 0 else hi

    def objective(mu_vec):
        ev = upper_gradient(pack_gamma(theta0, mu_vec[0]), prob)
        return ev.value, ev.gradient[-1:]

    trace = []
    opts = opts or BoxQnOptions(max_outer_iterations=100, pg_tolerance=1e-8, f_rel_tolerance=1e-12)
    res = minimize_box(objective, [mu0], [mu_floor_fraction * mu0], [np.inf], opts,
                       callback=lambda k, x, f, g: trace.append((k, float(x[0]), f)))
    ev = upper_gradient(pack_gamma(theta0, res.x[0]), prob)
    return BaselineResult(ev.m_star, float(res.x[0]), ev.sq_discrepancy, res.status, res.iterations, trace)


@dataclass
class ExperimentPreset:
    problem: str = "denoise"
    n_x: int = 64
    n_z: int = 64
    phantom: str = "stripes"
    phantom_angle: float = 30.0
    phantom_scale: float = 1.0
    noise_level: float = 0.16
    sigma_x: float = 1.0
    sigma_z: float = 0.1
    alpha: float = 10.0
    beta: float = 15.0
    delta: float = 1e-3
    psf_std: float = 2.0
    n_sources: int = 20
    n_receivers: int = 32
    keep_fraction: float = 0.06
    mu0: float | None = None
    mu_floor_fraction: float = 1e-3
    seed: int = 0
    smooth_mode: str = "hilbert_phase"
    lower_method: str = "cg"
    cg_tolerance: float = 1e-8
    max_outer_iterations: int = 200
    memory: int = 10
    pg_tolerance: float = 1e-6
    f_rel_tolerance: float = 1e-9

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ParameterError(f"problem must be one of {PROBLEMS}")
        if self.phantom not in PHANTOMS:
            raise ParameterError(f"phantom must be one of {PHANTOMS}")
        if self.noise_level < 0:
            raise ParameterError("noise_level must be nonnegative")
        if self.n_x < 2 or self.n_z < 2:
            raise ParameterError("grid must be at least 2x2")

    def replace(self, **changes) -> "ExperimentPreset":
        return dataclasses.replace(self, **changes)


# Desk-scale presets.  Noise levels and sigma weights follow the full-size
# reference experiments (REFERENCE_PARAMETERS); alpha and beta are rescaled
# because the orientation and discrepancy terms scale differently with image
# size and contrast.
PRESETS = {
    "denoise-stripes-small": ExperimentPreset(alpha=1.0, beta=1.5),
    "denoise-high-noise": ExperimentPreset(noise_level=1.6),
    "deblur": ExperimentPreset(
        problem="deblur", phantom="piecewise_layers", phantom_scale=10.0, noise_level=1e-2,
        sigma_z=1e-3, alpha=4e-4, beta=4.0, psf_std=18.0, max_outer_iterations=300,
    ),
    "tomo": ExperimentPreset(
        problem="tomo", n_x=48, n_z=48, phantom="piecewise_layers", phantom_scale=30.0,
        noise_level=2.5e-5, sigma_z=1e-3, alpha=1e-2, beta=100.0, n_sources=20,
        n_receivers=32, lower_method="direct", max_outer_iterations=500,
    ),
    "dix": ExperimentPreset(
        problem="dix", phantom="velocity_layers", noise_level=1.2e-3, sigma_z=1e-3,
        alpha=1.0, beta=2e3, keep_fraction=0.06,
    ),
}

REFERENCE_PARAMETERS = {
    "denoise": dict(noise_level=1.6, sigma_z=1e-1, alpha=10.0, beta=15.0, iso_rel_error=0.3171),
    "deblur": dict(noise_level=1e-2, sigma_z=1e-3, alpha=4e-3, beta=4e-3, iso_rel_error=0.0882),
    "tomo": dict(noise_level=2.5e-5, sigma_z=1e-3, alpha=1.0, beta=0.3, iso_rel_error=0.1902),
    "dix": dict(noise_level=1.2e-3, sigma_z=1e-3, alpha=1.0, beta=2e3, iso_rel_error=0.2401),
}


def build_forward(preset: ExperimentPreset, grid: Grid):
    if preset.problem == "denoise":
        return make_identity(grid)
    if preset.problem == "deblur":
        return make_gaussian_blur(grid, preset.psf_std)
    if preset.problem == "tomo":
        return make_tomo(grid, preset.n_sources, preset.n_receivers)
    return make_dix(grid, preset.keep_fraction)[0]


@dataclass
class ExperimentResult:
    preset: ExperimentPreset
    grid: Grid
    m_true: np.ndarray
    data: np.ndarray
    noise_norm: float
    m_aniso: np.ndarray
    theta: np.ndarray
    mu: float
    m_iso: np.ndarray
    mu_iso: float
    history: SolveHistory
    status: str
    metrics: dict


def run_experiment(preset: ExperimentPreset, progress=None) -> ExperimentResult:
    """Build the synthetic problem, run the isotropic baseline and the bilevel solve."""
    grid = Grid(preset.n_x, preset.n_z)
    phantom = make_phantom(grid, preset.phantom, preset.phantom_angle)
    m_true = preset.phantom_scale * phantom.image.values
    G = build_forward(preset, grid)
    data, noise_norm = add_noise(G.apply(m_true), preset.noise_level, preset.seed)
    d = data.values
    if noise_norm == 0:
        raise ParameterError("the discrepancy target needs a positive noise level")
    lower_opts = CgOptions(rel_tolerance=preset.cg_tolerance, method=preset.lower_method)

    iso = isotropic_baseline(G, d, noise_norm, grid, delta=preset.delta, lower_opts=lower_opts,
                             mu_floor_fraction=preset.mu_floor_fraction)
    log.info("isotropic baseline: mu=%.4g relerr=%.4f", iso.mu, rel_error(iso.m, m_true))

    prob = UpperProblem(
        G, d, grid, AnisoWeights(preset.sigma_x, preset.sigma_z),
        UpperParams(preset.alpha, preset.beta, noise_norm, preset.delta),
        lower_opts, smooth_mode=preset.smooth_mode,
    )
    mu0 = preset.mu0 if preset.mu0 is not None else (iso.mu if iso.mu > 0 else 1.0)
    gamma0 = pack_gamma(np.zeros(grid.n), mu0)
    cache = {}

    def objective(gamma):
        ev = upper_gradient(gamma, prob)
        cache[gamma.tobytes()] = ev
        while len(cache) > 8:
            cache.pop(next(iter(cache)))
        return ev.value, ev.gradient

    history = SolveHistory()

    def record(k, gamma, f, g):
        ev = cache[gamma.tobytes()]
        rec = HistoryRecord(k, ev.value, ev.sq_discrepancy, float(gamma[-1]),
                            ev.dxprime_norm, ev.dzprime_norm, rel_error(ev.m_star, m_true))
        history.append(rec)
        if progress is not None:
            progress(rec)

    qn = BoxQnOptions(memory=preset.memory, max_outer_iterations=preset.max_outer_iterations,
                      pg_tolerance=preset.pg_tolerance, f_rel_tolerance=preset.f_rel_tolerance)
    lower, upper = box_bounds(grid.n)
    lower[-1] = preset.mu_floor_fraction * mu0
    res = minimize_box(objective, gamma0, lower, upper, qn, callback=record)
    final = cache.get(res.x.tobytes()) or upper_gradient(res.x, prob)

    theta = res.x[:-1]
    metrics = {
        "rel_error_aniso": rel_error(final.m_star, m_true),
        "rel_error_iso": rel_error(iso.m, m_true),
        "mu_aniso": float(res.x[-1]),
        "mu_iso": iso.mu,
        "sq_discrepancy": final.sq_discrepancy,
        "noise_bound_sq": noise_norm**2,
        "upper_value": final.value,
        "iterations": res.iterations,
        "status": res.status,
        "noise_level": preset.noise_level,
        "sigma_x": preset.sigma_x,
        "sigma_z": preset.sigma_z,
        "alpha": preset.alpha,
        "beta": preset.beta,
        "delta": preset.delta,
    }
    if phantom.true_theta is not None:
        mask = significant_gradient_mask(m_true, grid)
        metrics["theta_error_deg"] = math.degrees(theta_error(theta, phantom.true_theta, mask))
    return ExperimentResult(preset, grid, m_true, d, noise_norm, final.m_star, theta, float(res.x[-1]),
                            iso.m, iso.mu, history, res.status, metrics)
