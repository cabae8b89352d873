"""Command-line driver: ``anisoreg solve`` runs one experiment and writes its outputs.

Config files are flat ``key = value`` text (``#`` starts a comment, strings
may be quoted).  Precedence: preset defaults < config file < flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bench import PHANTOMS, PRESETS, PROBLEMS, ExperimentPreset, add_noise, build_forward, make_phantom, run_experiment
from .core import AnisoWeights, Grid, ParameterError, UpperParams
from .lower import CgOptions, SolverError
from .optim import NonFiniteEvaluation
from .smoothgrad import MODES, hilbert_kernel_samples
from .upper import UpperProblem, gradient_check

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
FORMATS = ("pgm", "bin")
DEFAULT_PRESET = {"denoise": "denoise-stripes-small", "deblur": "deblur", "tomo": "tomo", "dix": "dix"}
GRAD_CHECK_TOLERANCE = 1e-4

log = logging.getLogger("anisoreg")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(ExperimentPreset):
    preset: str = ""
    out_dir: str = "out"
    formats: str = "pgm,bin"
    verbosity: int = 1
    grad_check: bool = False


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str, where: str):
    kind = str(_FIELD_TYPES[key])
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if "None" in kind and text.lower() in ("none", ""):
            return None
        if kind.startswith("bool"):
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {key} = {raw.strip()!r} as {kind}") from None


def _read_pairs(path: Path) -> list[tuple[str, str, str]]:
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = body.split("=", 1)
        pairs.append((key.strip(), value, f"{path}:{lineno}"))
    return pairs


def _validate(cfg: RunConfig) -> None:
    checks = [
        ("problem", cfg.problem in PROBLEMS, f"one of {PROBLEMS}"),
        ("phantom", cfg.phantom in PHANTOMS, f"one of {PHANTOMS}"),
        ("n_x", cfg.n_x >= 2, ">= 2"),
        ("n_z", cfg.n_z >= 2, ">= 2"),
        ("noise_level", cfg.noise_level > 0, "> 0"),
        ("sigma_x", cfg.sigma_x > 0, "> 0"),
        ("sigma_z", 0 <= cfg.sigma_z <= cfg.sigma_x, "in [0, sigma_x]"),
        ("alpha", cfg.alpha >= 0, ">= 0"),
        ("beta", cfg.beta >= 0, ">= 0"),
        ("delta", cfg.delta > 0, "> 0"),
        ("phantom_scale", cfg.phantom_scale > 0, "> 0"),
        ("psf_std", cfg.psf_std > 0, "> 0"),
        ("n_sources", cfg.n_sources >= 1, ">= 1"),
        ("n_receivers", cfg.n_receivers >= 1, ">= 1"),
        ("keep_fraction", 0 < cfg.keep_fraction <= 1, "in (0, 1]"),
        ("mu0", cfg.mu0 is None or cfg.mu0 > 0, "> 0 or none"),
        ("mu_floor_fraction", 0 <= cfg.mu_floor_fraction < 1, "in [0, 1)"),
        ("smooth_mode", cfg.smooth_mode in MODES + ("forward",), f"one of {MODES + ('forward',)}"),
        ("lower_method", cfg.lower_method in ("cg", "direct"), "cg or direct"),
        ("cg_tolerance", 0 < cfg.cg_tolerance < 1, "in (0, 1)"),
        ("max_outer_iterations", cfg.max_outer_iterations >= 1, ">= 1"),
        ("memory", cfg.memory >= 1, ">= 1"),
        ("pg_tolerance", cfg.pg_tolerance >= 0, ">= 0"),
        ("f_rel_tolerance", cfg.f_rel_tolerance >= 0, ">= 0"),
        ("verbosity", cfg.verbosity >= 0, ">= 0"),
        ("formats", bool(cfg.formats) and set(cfg.formats.split(",")) <= set(FORMATS), f"comma list from {FORMATS}"),
    ]
    for name, ok, expected in checks:
        if not ok:
            raise ConfigError(f"{name} = {getattr(cfg, name)!r} out of range (expected {expected})")


def parse_config(path=None, overrides=(), **flags) -> RunConfig:
    """Resolve a :class:`RunConfig` from a config file, ``key=value`` overrides and flags."""
    entries = []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        entries += _read_pairs(path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        entries.append((key.strip(), value, f"override {item!r}"))
    entries += [(k, str(v), f"flag --{k.replace('_', '-')}") for k, v in flags.items() if v is not None]

    values = {}
    for key, raw, where in entries:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _convert(key, raw, where)

    preset_name = values.get("preset") or DEFAULT_PRESET.get(values.get("problem", "denoise"))
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    base = dataclasses.asdict(PRESETS[preset_name])
    base["preset"] = preset_name
    base.update(values)
    try:
        cfg = RunConfig(**base)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, str):
            text = json.dumps(value)
        elif value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def preset_of(cfg: RunConfig) -> ExperimentPreset:
    names = {f.name for f in dataclasses.fields(ExperimentPreset)}
    return ExperimentPreset(**{k: v for k, v in dataclasses.asdict(cfg).items() if k in names})


def write_pgm(path: Path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary graymap, linearly mapping ``[lo, hi]`` (default min..max) to 0..255."""
    lo = float(image.min()) if lo is None else lo
    hi = float(image.max()) if hi is None else hi
    scaled = np.zeros(image.shape) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.clip(np.rint(255 * scaled), 0, 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    path.write_bytes(header + pixels.tobytes())


def write_image(out: Path, stem: str, grid: Grid, vector: np.ndarray, formats, pgm_range=(None, None)) -> None:
    if "bin" in formats:
        np.asarray(vector, dtype="<f8").tofile(out / f"{stem}.bin")
        meta = {"n_x": grid.n_x, "n_z": grid.n_z, "column_stacked": True, "dtype": "float64", "endianness": "little"}
        (out / f"{stem}.json").write_text(json.dumps(meta, indent=2) + "\n")
    if "pgm" in formats:
        write_pgm(out / f"{stem}.pgm", grid.unstack(vector), *pgm_range)


HISTORY_COLUMNS = ("iter", "U", "sq_discrepancy", "mu", "relerr", "dxprime_norm", "dzprime_norm")


def write_history(path: Path, history) -> None:
    rows = [",".join(HISTORY_COLUMNS)]
    for r in history:
        rel = "" if r.rel_error is None else repr(r.rel_error)
        rows.append(",".join([str(r.iteration), repr(r.upper_value), repr(r.sq_discrepancy), repr(r.mu), rel,
                              repr(r.dxprime_norm), repr(r.dzprime_norm)]))
    path.write_text("\n".join(rows) + "\n")


def write_outputs(out: Path, cfg: RunConfig, result) -> None:
    formats = cfg.formats.split(",")
    grid = result.grid
    write_image(out, "model_aniso", grid, result.m_aniso, formats)
    write_image(out, "model_iso", grid, result.m_iso, formats)
    write_image(out, "theta", grid, result.theta, formats, pgm_range=(-0.5 * np.pi, 0.5 * np.pi))
    write_history(out / "history.csv", result.history)
    (out / "config_echo.txt").write_text(dump_config(cfg))
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2) + "\n")


def _ensure_writable(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    probe.write_text("")
    probe.unlink()
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")


def grad_check(cfg: RunConfig, seed: int | None = None) -> float:
    """Max relative finite-difference error of the upper gradient on a 4x4 instance."""
    grid = Grid(4, 4)
    preset = preset_of(cfg).replace(n_x=4, n_z=4)
    m_true = preset.phantom_scale * make_phantom(grid, preset.phantom, preset.phantom_angle).image.values
    G = build_forward(preset, grid)
    data, noise = add_noise(G.apply(m_true), preset.noise_level, preset.seed)
    prob = UpperProblem(G, data.values, grid, AnisoWeights(preset.sigma_x, preset.sigma_z),
                        UpperParams(preset.alpha, preset.beta, max(noise, 1e-12), preset.delta),
                        CgOptions(rel_tolerance=1e-12), smooth_mode=preset.smooth_mode, warm_start=False)
    rng = np.random.default_rng(preset.seed if seed is None else seed)
    gamma = np.concatenate([rng.uniform(-1.2, 1.2, grid.n), [rng.uniform(0.5, 2.0)]])
    return gradient_check(prob, gamma)


def main_solve(cfg: RunConfig) -> int:
    try:
        if cfg.grad_check:
            err = grad_check(cfg)
            print(f"max relative finite-difference error: {err:.3e} (tolerance {GRAD_CHECK_TOLERANCE:g})")
            return EXIT_OK if err <= GRAD_CHECK_TOLERANCE else EXIT_SOLVER
        out = Path(cfg.out_dir)
        _ensure_writable(out)

        def progress(rec):
            if cfg.verbosity >= 2:
                print(f"iter {rec.iteration:4d}  U={rec.upper_value:.6g}  |r|^2={rec.sq_discrepancy:.6g}  "
                      f"mu={rec.mu:.4g}  relerr={rec.rel_error:.4f}")

        result = run_experiment(preset_of(cfg), progress)
        write_outputs(out, cfg, result)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, NonFiniteEvaluation, ParameterError, FloatingPointError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    m = result.metrics
    if cfg.verbosity >= 1:
        print(f"status: {m['status']} after {m['iterations']} iterations")
        print(f"rel_error anisotropic: {m['rel_error_aniso']:.4f}")
        print(f"rel_error isotropic:   {m['rel_error_iso']:.4f}")
        print(f"mu anisotropic: {m['mu_aniso']:.6g}   mu isotropic: {m['mu_iso']:.6g}")
        if "theta_error_deg" in m:
            print(f"median theta error: {m['theta_error_deg']:.2f} deg")
        print(f"outputs written to {cfg.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anisoreg")
    sub = parser.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", help="run an experiment")
    solve.add_argument("--problem", choices=PROBLEMS)
    solve.add_argument("--config", type=Path)
    solve.add_argument("--out", dest="out_dir")
    solve.add_argument("--seed", type=int)
    solve.add_argument("--preset", choices=sorted(PRESETS))
    solve.add_argument("--grad-check", action="store_true", default=None)
    solve.add_argument("-v", "--verbose", action="count", default=0)
    solve.add_argument("overrides", nargs="*", metavar="key=value")
    kernels = sub.add_parser("kernels", help="print Hilbert-transform kernel samples")
    kernels.add_argument("--radius", type=int, default=3)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "kernels":
        hx, hz = hilbert_kernel_samples(args.radius)
        np.set_printoptions(precision=5, suppress=True, linewidth=120)
        print("h_x:\n", hx, "\nh_z:\n", hz, sep="")
        return EXIT_OK
    try:
        flags = {"problem": args.problem, "out_dir": args.out_dir, "seed": args.seed,
                 "preset": args.preset, "grad_check": args.grad_check}
        if args.verbose:
            flags["verbosity"] = 1 + args.verbose
        cfg = parse_config(args.config, args.overrides, **flags)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if cfg.verbosity >= 2 else logging.WARNING)
    return main_solve(cfg)


if __name__ == "__main__":
    sys.exit(main())
