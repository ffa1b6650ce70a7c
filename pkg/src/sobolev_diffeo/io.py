"""File formats.

SGF1 grid-field files: one ASCII header line

    SGF1 d n_1..n_d L_1..L_d comps [TVEL1 N t_0..t_N]

followed by ``comps`` blocks of little-endian float64 values in row-major
order.  The optional ``TVEL1`` extension stores a piecewise-constant time
velocity with ``comps = N * d`` (interval-major).
"""

from __future__ import annotations

import csv
import io as _io
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .flow import Diffeo, TimeVelocity
from .spectral import GridSpec, InvalidInputError, MetricSpec, ScalarField, VectorField


class FormatError(InvalidInputError):
    pass


def atomic_write(path, data, mode="wb"):
    """Write to a temporary sibling and rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class SgfFile:
    grid: GridSpec
    blocks: np.ndarray  # (comps, *sizes)
    extension: list


def encode_sgf(grid: GridSpec, blocks, extension=()) -> bytes:
    blocks = np.asarray(blocks, dtype="<f8")
    if blocks.shape[1:] != grid.shape:
        raise FormatError(f"blocks shape {blocks.shape} does not match grid {grid.shape}")
    tokens = ["SGF1", str(grid.dim)]
    tokens += [str(n) for n in grid.sizes]
    tokens += [repr(float(L)) for L in grid.lengths]
    tokens.append(str(blocks.shape[0]))
    tokens += [str(t) for t in extension]
    return (" ".join(tokens) + "\n").encode("ascii") + np.ascontiguousarray(blocks).tobytes()


def decode_sgf(data: bytes) -> SgfFile:
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise FormatError("missing SGF1 header line")
    tokens = head.decode("ascii").split()
    if not tokens or tokens[0] != "SGF1":
        raise FormatError("not an SGF1 file")
    try:
        d = int(tokens[1])
        sizes = [int(t) for t in tokens[2:2 + d]]
        lengths = [float(t) for t in tokens[2 + d:2 + 2 * d]]
        comps = int(tokens[2 + 2 * d])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed SGF1 header: {head!r}") from exc
    grid = GridSpec(tuple(sizes), tuple(lengths))
    expected = comps * grid.npoints * 8
    if len(body) != expected:
        raise FormatError(f"SGF1 payload has {len(body)} bytes, expected {expected}")
    blocks = np.frombuffer(body, dtype="<f8").astype(float).reshape((comps,) + grid.shape)
    return SgfFile(grid, blocks, tokens[3 + 2 * d:])


def write_sgf(path, grid, blocks, extension=()):
    atomic_write(path, encode_sgf(grid, blocks, extension))


def read_sgf(path) -> SgfFile:
    with open(path, "rb") as fh:
        return decode_sgf(fh.read())


def save_field(path, f):
    blocks = f.values[None] if isinstance(f, ScalarField) else f.values
    write_sgf(path, f.grid, blocks)


def load_field(path):
    sgf = read_sgf(path)
    if sgf.extension:
        raise FormatError("file carries a TVEL1 velocity, not a single field")
    if sgf.blocks.shape[0] == 1:
        return ScalarField(sgf.grid, sgf.blocks[0])
    return VectorField(sgf.grid, sgf.blocks)


def save_diffeo(path, phi: Diffeo):
    write_sgf(path, phi.grid, phi.displacement.values)


def load_diffeo(path) -> Diffeo:
    sgf = read_sgf(path)
    if sgf.blocks.shape[0] != sgf.grid.dim:
        raise FormatError(f"a diffeo needs {sgf.grid.dim} components, file has {sgf.blocks.shape[0]}")
    return Diffeo(VectorField(sgf.grid, sgf.blocks))


def save_velocity(path, u: TimeVelocity):
    n = u.steps
    ext = ["TVEL1", str(n)] + [repr(float(t)) for t in u.knots]
    write_sgf(path, u.grid, u.values.reshape((n * u.grid.dim,) + u.grid.shape), ext)


def load_velocity(path, order: float) -> TimeVelocity:
    sgf = read_sgf(path)
    ext = sgf.extension
    if not ext or ext[0] != "TVEL1":
        raise FormatError("missing TVEL1 header extension")
    n = int(ext[1])
    knots = np.array([float(t) for t in ext[2:3 + n]])
    if len(knots) != n + 1:
        raise FormatError("TVEL1 time grid is truncated")
    grid = sgf.grid
    values = sgf.blocks.reshape((n, grid.dim) + grid.shape)
    return TimeVelocity(knots, values, MetricSpec(grid, order))


def field_csv(f) -> str:
    """One row per grid point: coordinates, then values."""
    grid = f.grid
    blocks = f.values[None] if isinstance(f, ScalarField) else f.values
    coords = grid.coords.reshape(grid.dim, -1)
    vals = blocks.reshape(blocks.shape[0], -1)
    names = [f"x{i + 1}" for i in range(grid.dim)]
    names += ["value"] if isinstance(f, ScalarField) else [f"v{i + 1}" for i in range(blocks.shape[0])]
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in np.vstack([coords, vals]).T:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write(path, buf.getvalue(), mode="w")


def read_landmarks(path, dim=None):
    """``id, x1..xd[, p1..pd]`` rows -> ``(ids, q, p or None)``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise FormatError(f"{path}: no landmark rows")
    header = [c.strip() for c in rows[0]]
    if header[0] == "id":
        rows = rows[1:]
        xs = [c for c in header if c.startswith("x")]
        d = len(xs)
    else:
        d = dim if dim is not None else len(header) - 1
    ids, q, p = [], [], []
    for lineno, row in enumerate(rows, start=2):
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if len(vals) not in (d, 2 * d):
            raise FormatError(f"{path}:{lineno}: expected {d} or {2 * d} numbers")
        ids.append(row[0])
        q.append(vals[:d])
        p.append(vals[d:] if len(vals) == 2 * d else None)
    momenta = None if any(v is None for v in p) else np.array(p)
    return ids, np.array(q), momenta


def write_landmarks(path, q, p=None, ids=None):
    q = np.atleast_2d(q)
    d = q.shape[1]
    header = ["id"] + [f"x{i + 1}" for i in range(d)]
    if p is not None:
        header += [f"p{i + 1}" for i in range(d)]
    ids = ids or [str(i) for i in range(len(q))]
    rows = []
    for i, qi in enumerate(q):
        row = [ids[i]] + [float(v) for v in qi]
        if p is not None:
            row += [float(v) for v in np.atleast_2d(p)[i]]
        rows.append(row)
    write_csv(path, header, rows)


def read_field_csv(path, lengths=None):
    """Inverse of :func:`field_csv`; the grid is recovered from the coordinates."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"{path}: empty field CSV")
    header = [c.strip() for c in rows[0]]
    d = sum(1 for c in header if c.startswith("x"))
    if d not in (1, 2):
        raise FormatError(f"{path}: expected coordinate columns x1[, x2]")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    axes = [np.unique(data[:, i]) for i in range(d)]
    sizes = tuple(len(a) for a in axes)
    if lengths is None:
        lengths = tuple(n * (a[1] - a[0]) for n, a in zip(sizes, axes))
    grid = GridSpec(sizes, tuple(lengths))
    if len(data) != grid.npoints:
        raise FormatError(f"{path}: {len(data)} rows for a {sizes} grid")
    idx = tuple(np.searchsorted(axes[i], data[:, i]) for i in range(d))
    comps = data.shape[1] - d
    blocks = np.zeros((comps,) + grid.shape)
    for c in range(comps):
        blocks[c][idx] = data[:, d + c]
    if header[d:] == ["value"]:
        return ScalarField(grid, blocks[0])
    return VectorField(grid, blocks)


def save_geodesic_result(directory, result):
    """``velocity.tvel``, ``trace.csv`` and ``summary.csv`` inside ``directory``."""
    os.makedirs(directory, exist_ok=True)
    save_velocity(os.path.join(directory, "velocity.tvel"), result.velocity)
    write_csv(os.path.join(directory, "trace.csv"), ["step", "objective"],
              [(i, float(v)) for i, v in enumerate(result.trace)])
    write_csv(os.path.join(directory, "summary.csv"), ["key", "value"], result.summary_rows())
