import csv
import json

import numpy as np
import pytest

from anisoreg.bench import PRESETS
from anisoreg.cli import (
    HISTORY_COLUMNS, ConfigError, RunConfig, dump_config, grad_check, main, parse_config,
)

SMALL = ["n_x=16", "n_z=16", "max_outer_iterations=15"]


def write(path, text):
    path.write_text(text)
    return path


def test_minimal_config_fills_defaults(tmp_path):
    cfg = parse_config(write(tmp_path / "c.txt", 'problem = "denoise"\n'))
    preset = PRESETS["denoise-stripes-small"]
    assert cfg.problem == "denoise"
    assert cfg.alpha == preset.alpha and cfg.beta == preset.beta
    assert cfg.noise_level == preset.noise_level and cfg.delta == 1e-3
    assert cfg.out_dir and cfg.formats


def test_range_error_names_key(tmp_path):
    with pytest.raises(ConfigError, match="alpha"):
        parse_config(write(tmp_path / "c.txt", "problem = denoise\nalpha = -1\n"))


def test_unknown_key_and_bad_value_report_line(tmp_path):
    with pytest.raises(ConfigError, match=r"c\.txt:2"):
        parse_config(write(tmp_path / "c.txt", "problem = denoise\ncolour = blue\n"))
    with pytest.raises(ConfigError, match="beta"):
        parse_config(write(tmp_path / "c.txt", "beta = lots\n"))
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.txt")


def test_flags_override_file(tmp_path):
    cfg = parse_config(write(tmp_path / "c.txt", "problem = dix\nbeta = 5\n"), ["beta=7"], seed=9)
    assert cfg.beta == 7.0 and cfg.seed == 9 and cfg.problem == "dix"
    assert cfg.keep_fraction == PRESETS["dix"].keep_fraction


def test_dump_round_trip(tmp_path):
    cfg = parse_config(None, ["problem=tomo", "alpha=0.25", "mu0=3.5", "formats=bin"])
    again = parse_config(write(tmp_path / "echo.txt", dump_config(cfg)))
    assert again == cfg
    assert isinstance(again, RunConfig)


def test_solve_writes_documented_files(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["solve", "--preset", "denoise-stripes-small", "--out", str(out), *SMALL])
    assert code == 0
    for stem in ("model_aniso", "model_iso", "theta"):
        assert (out / f"{stem}.pgm").exists()
        raw = np.fromfile(out / f"{stem}.bin", dtype="<f8")
        meta = json.loads((out / f"{stem}.json").read_text())
        assert raw.size == meta["n_x"] * meta["n_z"] == 256
        assert meta["column_stacked"] is True
    assert (out / "config_echo.txt").exists()
    with open(out / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    iters = [int(r[0]) for r in rows[1:]]
    assert iters[0] == 0 and all(b > a for a, b in zip(iters, iters[1:]))
    metrics = json.loads((out / "metrics.json").read_text())
    printed = capsys.readouterr().out
    assert "rel_error anisotropic" in printed and "theta error" in printed
    assert metrics["rel_error_aniso"] > 0


def test_unwritable_output_exits_4(tmp_path):
    blocker = write(tmp_path / "file", "x")
    assert main(["solve", "--problem", "denoise", "--out", str(blocker / "sub"), *SMALL]) == 4


def test_config_error_exits_2(tmp_path):
    assert main(["solve", "--problem", "denoise", "alpha=-1"]) == 2
    assert main(["solve", "--problem", "nonsense"]) == 2


def test_solver_error_exits_3(tmp_path, monkeypatch, capsys):
    import anisoreg.cli as cli
    from anisoreg.lower import CgNotConverged

    def failing(preset, progress=None):
        raise CgNotConverged("CG stalled", np.zeros(1), 1.0)

    monkeypatch.setattr(cli, "run_experiment", failing)
    assert main(["solve", "--problem", "denoise", "--out", str(tmp_path)]) == 3
    assert "CG stalled" in capsys.readouterr().err


def test_grad_check_flag(capsys):
    assert main(["solve", "--problem", "denoise", "--grad-check"]) == 0
    printed = capsys.readouterr().out
    err = float(printed.split(":")[1].split()[0])
    assert err <= 1e-4


@pytest.mark.parametrize("problem", ["deblur", "tomo", "dix"])
def test_grad_check_other_problems(problem):
    assert grad_check(parse_config(None, [f"problem={problem}"])) <= 1e-4


def test_kernels_command(capsys):
    assert main(["kernels", "--radius", "1"]) == 0
    assert "h_x" in capsys.readouterr().out
