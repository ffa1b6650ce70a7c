import csv
import math

import numpy as np
import pytest

from sobolev_diffeo.cli import (
    EXIT_CONFIG,
    EXIT_DEGENERATE,
    EXIT_OK,
    ConfigError,
    SCHEMA,
    main,
    parse_config_text,
)
from sobolev_diffeo.io import load_diffeo, write_landmarks


def run(tmp_path, command, config="", *flags):
    cfg = tmp_path / "run.ini"
    cfg.write_text(config)
    out = tmp_path / "out"
    code = main([command, "--config", str(cfg), "--out", str(out), *flags])
    return code, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def summary(out):
    return dict(read_rows(out / "summary.csv")[1:])


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_defaults_cover_every_section():
    cfg = parse_config_text("", "flow")
    assert set(cfg.values) == set(SCHEMA)
    assert cfg.get("grid", "n") == "64"


@pytest.mark.parametrize("text, line, column", [
    ("[grid]\nn = 64\nlength = abc\n", 3, 10),
    ("[grid]\nn = 64\nbogus = 1\n", 3, 1),
    ("[nope]\n", 1, 2),
    ("[grid]\nthis line is wrong\n", 2, 1),
    ("n = 64\n", 1, 1),
])
def test_config_errors_carry_location(text, line, column):
    with pytest.raises(ConfigError) as info:
        cfg = parse_config_text(text, "flow")
        cfg.grid
    assert info.value.line == line
    assert info.value.column == column


def test_config_error_exit_code_and_csv(tmp_path):
    code, out = run(tmp_path, "flow", "[run]\nseed = 1\n[metric]\norder = two\n")
    assert code == EXIT_CONFIG
    rows = read_rows(out / "error.csv")
    assert rows[0][:5] == ["kind", "message", "line", "column", "exit_code"]
    assert rows[1][0] == "config" and rows[1][2:5] == ["4", "9", "2"]


def test_inadmissible_order_rejected(tmp_path):
    code, out = run(tmp_path, "flow", "[grid]\nn = 32,32\n[metric]\norder = 2.0\n")
    assert code == EXIT_CONFIG
    assert "order" in read_rows(out / "error.csv")[1][1]


def test_flags_override_file(tmp_path):
    code, out = run(tmp_path, "flow", "[grid]\nn = 16\n", "--grid", "32")
    assert code == EXIT_OK
    assert load_diffeo(out / "diffeo.sgf").grid.sizes == (32,)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def test_flow_zero_is_identity(tmp_path):
    code, out = run(tmp_path, "flow", "[flow]\nvelocity = zero\n")
    assert code == EXIT_OK
    phi = load_diffeo(out / "diffeo.sgf")
    assert not np.any(phi.displacement.values)
    for name in ("velocity.tvel", "displacement.csv", "energy.csv", "deformation.png", "summary.csv"):
        assert (out / name).stat().st_size > 0


def test_flow_degenerate_exit(tmp_path):
    code, out = run(tmp_path, "flow", "[flow]\nvelocity = sine:5\nsubsteps = 1\nmass_cap = inf\n")
    assert code == EXIT_DEGENERATE
    rows = read_rows(out / "error.csv")
    assert rows[1][0] == "degenerate_flow"
    assert {"time", "location", "value"} <= set(rows[0])
    assert not (out / "diffeo.sgf").exists()


def test_stale_error_file_removed(tmp_path):
    run(tmp_path, "flow", "[metric]\norder = x\n")
    code, out = run(tmp_path, "flow", "")
    assert code == EXIT_OK and not (out / "error.csv").exists()


def test_selfcheck(tmp_path):
    code, out = run(tmp_path, "selfcheck")
    assert code == EXIT_OK
    rows = read_rows(out / "selfcheck.csv")
    assert len(rows) > 10 and all(r[-1] == "1" for r in rows[1:])
    assert (out / "selfcheck.png").exists()


DISTANCE = "[grid]\nn = 32\n[solver]\nsteps = 4\n[distance]\ntarget = translation:0.5\n"


def test_distance_translation_bound(tmp_path):
    code, out = run(tmp_path, "distance", DISTANCE)
    assert code == EXIT_OK
    rows = read_rows(out / "summary.csv")
    assert rows[1][0] == "distance"
    assert float(rows[1][1]) <= 0.5 * math.sqrt(2 * math.pi) + 1e-3
    for name in ("velocity.tvel", "trace.csv", "energy.csv", "trace.png", "speed.png"):
        assert (out / name).exists()


def test_distance_rerun_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    run(a, "distance", DISTANCE)
    run(b, "distance", DISTANCE)
    for name in ("summary.csv", "velocity.tvel", "trace.csv", "trace.png"):
        assert (a / "out" / name).read_bytes() == (b / "out" / name).read_bytes()


def test_landmarks(tmp_path):
    write_landmarks(tmp_path / "src.csv", np.array([[1.0, 1.0], [2.0, 2.5]]))
    write_landmarks(tmp_path / "tgt.csv", np.array([[1.2, 1.1], [2.1, 2.3]]))
    code, out = run(tmp_path, "landmarks", "[landmarks]\nsource = src.csv\ntarget = tgt.csv\n")
    assert code == EXIT_OK
    assert float(summary(out)["distance"]) > 0
    for name in ("momenta.csv", "endpoint.csv", "trace.csv", "landmarks.png"):
        assert (out / name).exists()


def test_landmarks_missing_file(tmp_path):
    code, out = run(tmp_path, "landmarks", "[landmarks]\nsource = nope.csv\ntarget = nope.csv\n")
    assert code == EXIT_CONFIG


def test_karcher_1d(tmp_path):
    cfg = "[grid]\nn = 32\n[karcher]\nimages = bump:2.9:0.5 bump:3.4:0.5\nsteps = 2\nmax_sweeps = 3\n"
    code, out = run(tmp_path, "karcher", cfg)
    assert code in (EXIT_OK, 3)
    sweeps = [float(r[1]) for r in read_rows(out / "sweeps.csv")[1:]]
    assert all(b <= a for a, b in zip(sweeps, sweeps[1:]))
    for name in ("mean.sgf", "mean.csv", "distances.csv", "images.png", "sweeps.png"):
        assert (out / name).exists()


@pytest.mark.slow
def test_register_2d(tmp_path):
    cfg = ("[grid]\nn = 32,32\n[metric]\norder = 2.5\n"
           "[register]\nsource = bump:2.9,2.9:0.6\ntarget = bump:3.3,3.3:0.6\nmax_iter = 60\n")
    code, out = run(tmp_path, "register", cfg)
    assert code in (EXIT_OK, 3)
    s = summary(out)
    assert float(s["mismatch"]) < float(s["initial_mismatch"])
    for name in ("warped.sgf", "warped.csv", "diffeo.sgf", "images.png", "deformation.png"):
        assert (out / name).exists()
