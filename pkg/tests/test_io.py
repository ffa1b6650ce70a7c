import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sobolev_diffeo.flow import Diffeo, TimeVelocity
from sobolev_diffeo.io import (
    FormatError,
    atomic_write,
    decode_sgf,
    encode_sgf,
    field_csv,
    load_diffeo,
    load_field,
    load_velocity,
    read_field_csv,
    read_landmarks,
    save_diffeo,
    save_field,
    save_velocity,
    write_landmarks,
)
from sobolev_diffeo.rng import stream
from sobolev_diffeo.spectral import GridSpec, ScalarField, VectorField, random_field


def test_sgf_header_format():
    grid = GridSpec((4, 6), (1.5, 2.0))
    data = encode_sgf(grid, np.zeros((1, 4, 6)))
    head, body = data.split(b"\n", 1)
    assert head == b"SGF1 2 4 6 1.5 2.0 1"
    assert len(body) == 8 * 24


@given(seed=st.integers(0, 2**32 - 1), dim=st.sampled_from([1, 2]), comps=st.integers(1, 3))
@settings(max_examples=20)
def test_sgf_roundtrip_bit_exact(seed, dim, comps):
    rng = stream(seed, "sgf")
    grid = GridSpec.uniform(8, dim=dim, length=float(rng.uniform(1, 10)))
    blocks = rng.standard_normal((comps,) + grid.shape)
    sgf = decode_sgf(encode_sgf(grid, blocks))
    assert sgf.grid == grid
    assert np.array_equal(sgf.blocks, blocks)
    assert sgf.extension == []


@pytest.mark.parametrize("data", [
    b"",
    b"SGF2 1 4 1.0 1\n" + bytes(32),
    b"SGF1 1 four 1.0 1\n" + bytes(32),
    b"SGF1 1 4 1.0\n" + bytes(32),
    b"SGF1 1 4 1.0 1\n" + bytes(24),
])
def test_sgf_malformed(data):
    with pytest.raises(FormatError):
        decode_sgf(data)


def test_field_and_diffeo_files(tmp_path, grid2):
    rng = stream(0, "files")
    s = ScalarField(grid2, rng.standard_normal(grid2.shape))
    v = VectorField(grid2, random_field(grid2, rng, amplitude=0.05))
    save_field(tmp_path / "s.sgf", s)
    save_field(tmp_path / "v.sgf", v)
    assert np.array_equal(load_field(tmp_path / "s.sgf").values, s.values)
    assert np.array_equal(load_field(tmp_path / "v.sgf").values, v.values)
    save_diffeo(tmp_path / "d.sgf", Diffeo(v))
    assert np.array_equal(load_diffeo(tmp_path / "d.sgf").displacement.values, v.values)
    with pytest.raises(FormatError):
        load_diffeo(tmp_path / "s.sgf")


def test_velocity_roundtrip(tmp_path, metric1):
    rng = stream(1, "tvel")
    knots = np.array([0.0, 0.2, 0.7, 1.0])
    u = TimeVelocity(knots, np.stack([random_field(metric1.grid, rng) for _ in range(3)]), metric1)
    save_velocity(tmp_path / "u.tvel", u)
    back = load_velocity(tmp_path / "u.tvel", metric1.order)
    assert np.array_equal(back.knots, knots)
    assert np.array_equal(back.values, u.values)
    with pytest.raises(FormatError):
        load_field(tmp_path / "u.tvel")
    save_field(tmp_path / "f.sgf", VectorField(metric1.grid, u.values[0]))
    with pytest.raises(FormatError):
        load_velocity(tmp_path / "f.sgf", 2.0)


@pytest.mark.parametrize("dim", [1, 2])
def test_field_csv_roundtrip(tmp_path, dim):
    grid = GridSpec((6,) * dim, (2.5,) * dim)
    rng = stream(dim, "csv")
    for f in (ScalarField(grid, rng.standard_normal(grid.shape)), VectorField(grid, random_field(grid, rng))):
        path = tmp_path / "f.csv"
        path.write_text(field_csv(f))
        back = read_field_csv(path)
        assert back.grid.sizes == grid.sizes
        assert np.allclose(back.grid.lengths, grid.lengths, rtol=1e-14)
        assert np.array_equal(back.values, f.values)


def test_field_csv_header():
    text = field_csv(VectorField(GridSpec.uniform(4, dim=2), np.zeros((2, 4, 4))))
    assert text.splitlines()[0] == "x1,x2,v1,v2"
    assert len(text.splitlines()) == 17


def test_landmark_csv_roundtrip(tmp_path):
    q = np.array([[0.1, 0.2], [1.0, -3.0]])
    p = np.array([[0.5, 0.0], [0.25, 1e-20]])
    write_landmarks(tmp_path / "a.csv", q, p, ids=["a", "b"])
    ids, q2, p2 = read_landmarks(tmp_path / "a.csv")
    assert ids == ["a", "b"]
    assert np.array_equal(q2, q) and np.array_equal(p2, p)
    write_landmarks(tmp_path / "b.csv", q)
    _, _, none = read_landmarks(tmp_path / "b.csv")
    assert none is None


def test_landmark_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,x1,x2\n0,1.0,oops\n")
    with pytest.raises(FormatError, match=":2:"):
        read_landmarks(bad)
    bad.write_text("id,x1,x2\n0,1.0\n")
    with pytest.raises(FormatError):
        read_landmarks(bad)
    bad.write_text("")
    with pytest.raises(FormatError):
        read_landmarks(bad)


def test_atomic_write_replaces_and_cleans(tmp_path):
    path = tmp_path / "sub" / "x.txt"
    atomic_write(path, "one", mode="w")
    atomic_write(path, "two", mode="w")
    assert path.read_text() == "two"
    with pytest.raises(TypeError):
        atomic_write(path, "text", mode="wb")
    assert path.read_text() == "two"
    assert os.listdir(path.parent) == ["x.txt"]
