"""Periodic grids, Fourier transforms and Sobolev multiplier operators.

Everything lives on the flat torus ``prod_i [0, L_i)`` with ``d in {1, 2}``.
Frequencies are ``xi = 2 pi k / L`` for integer ``k in {-n/2, ..., n/2-1}``,
stored in numpy FFT order.  The transform is scaled so that
``sum |f_hat|^2`` equals the grid quadrature ``(prod h) * sum |f|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np


class InvalidInputError(ValueError):
    """Raised when arguments violate a documented precondition."""


class AdmissibilityError(InvalidInputError):
    """Raised when a Sobolev order does not satisfy s > d/2 + 1."""


# ---------------------------------------------------------------------------
# grids and fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    sizes: tuple
    lengths: tuple

    def __post_init__(self):
        sizes = tuple(int(n) for n in np.atleast_1d(self.sizes))
        lengths = tuple(float(x) for x in np.atleast_1d(self.lengths))
        if len(lengths) == 1 and len(sizes) > 1:
            lengths = lengths * len(sizes)
        if len(sizes) not in (1, 2) or len(lengths) != len(sizes):
            raise InvalidInputError(f"grid must be 1D or 2D, got sizes={sizes} lengths={lengths}")
        for n in sizes:
            if n < 4 or n % 2:
                raise InvalidInputError(f"grid sizes must be even and >= 4, got {n}")
        for length in lengths:
            if not length > 0 or not np.isfinite(length):
                raise InvalidInputError(f"period lengths must be positive, got {length}")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "lengths", lengths)

    @classmethod
    def uniform(cls, n, dim=1, length=2 * np.pi):
        return cls((n,) * dim, (length,) * dim)

    @property
    def dim(self) -> int:
        return len(self.sizes)

    @property
    def shape(self) -> tuple:
        return self.sizes

    @property
    def npoints(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def spacing(self) -> tuple:
        return tuple(L / n for L, n in zip(self.lengths, self.sizes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @cached_property
    def axes(self) -> list:
        return [np.arange(n) * h for n, h in zip(self.sizes, self.spacing)]

    @cached_property
    def coords(self) -> np.ndarray:
        """Node positions, shape ``(d, *sizes)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def wavenumbers(self) -> list:
        """Per-axis angular frequencies in FFT order."""
        return [2 * np.pi * np.fft.fftfreq(n, d=L / n) for n, L in zip(self.sizes, self.lengths)]

    @cached_property
    def xi(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.wavenumbers, indexing="ij"))

    @cached_property
    def xi_norm2(self) -> np.ndarray:
        return np.sum(self.xi**2, axis=0)

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on lattice points that carry an unpaired Nyquist index."""
        mask = np.zeros(self.sizes, dtype=bool)
        for axis, n in enumerate(self.sizes):
            idx = [slice(None)] * self.dim
            idx[axis] = n // 2
            mask[tuple(idx)] = True
        return mask

    @property
    def transform_scale(self) -> float:
        return float(np.sqrt(self.cell_volume / self.npoints))


def _check_values(values, shape, what):
    values = np.asarray(values, dtype=float)
    if values.shape != tuple(shape):
        raise InvalidInputError(f"{what}: expected shape {tuple(shape)}, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError(f"{what}: non-finite entries")
    return values


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.values, self.grid.shape, "ScalarField"))

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, fn(*grid.coords))


@dataclass(frozen=True)
class VectorField:
    grid: GridSpec
    values: np.ndarray  # (d, *sizes)

    def __post_init__(self):
        shape = (self.grid.dim,) + self.grid.shape
        object.__setattr__(self, "values", _check_values(self.values, shape, "VectorField"))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.dim,) + grid.shape))

    @classmethod
    def constant(cls, grid, c):
        c = np.broadcast_to(np.asarray(c, dtype=float), (grid.dim,))
        return cls(grid, c.reshape((grid.dim,) + (1,) * grid.dim) * np.ones((grid.dim,) + grid.shape))

    @property
    def components(self) -> list:
        return [ScalarField(self.grid, c) for c in self.values]

    def __add__(self, other):
        _same_grid(self, other)
        return VectorField(self.grid, self.values + other.values)

    def __sub__(self, other):
        _same_grid(self, other)
        return VectorField(self.grid, self.values - other.values)

    def __mul__(self, scalar):
        return VectorField(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return VectorField(self.grid, -self.values)


Field = Union[ScalarField, VectorField]


@dataclass(frozen=True)
class SpectralCoeffs:
    grid: GridSpec
    coeffs: np.ndarray  # complex, shape sizes, FFT order


def _same_grid(a, b):
    if a.grid != b.grid:
        raise InvalidInputError(f"grid mismatch: {a.grid} vs {b.grid}")


def _as_stack(f: Field) -> np.ndarray:
    """Field values as ``(c, *sizes)``."""
    if isinstance(f, VectorField):
        return f.values
    if isinstance(f, ScalarField):
        return f.values[None]
    raise InvalidInputError(f"expected a field, got {type(f).__name__}")


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------


def sobolev_multiplier(grid: GridSpec, order: float) -> np.ndarray:
    return (1.0 + grid.xi_norm2) ** float(order)


@dataclass(frozen=True)
class MetricSpec:
    """The ``H^s`` inner product ``sum_xi (1 + |xi|^2)^s Re(u_hat conj(v_hat))``.

    ``strict=False`` skips the ``s > d/2 + 1`` check; norms of any real order
    are useful as diagnostics even when they do not define a group metric.
    """

    grid: GridSpec
    order: float
    strict: bool = True
    multiplier: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = float(self.order)
        object.__setattr__(self, "order", s)
        bound = self.grid.dim / 2 + 1
        if self.strict and not s > bound:
            raise AdmissibilityError(
                f"Sobolev order s={s} is not admissible in dimension d={self.grid.dim}: need s > d/2 + 1 = {bound}"
            )
        object.__setattr__(self, "multiplier", sobolev_multiplier(self.grid, s))

    def with_order(self, order, strict=False):
        return MetricSpec(self.grid, order, strict=strict)


# ---------------------------------------------------------------------------
# transforms and inner products
# ---------------------------------------------------------------------------


def _axes(grid):
    return tuple(range(-grid.dim, 0))


def _fft(values, grid):
    return np.fft.fftn(values, axes=_axes(grid)) * grid.transform_scale


def _ifft(coeffs, grid):
    return np.fft.ifftn(coeffs / grid.transform_scale, axes=_axes(grid))


def transform(f: ScalarField) -> SpectralCoeffs:
    if not isinstance(f, ScalarField):
        raise InvalidInputError("transform expects a ScalarField")
    return SpectralCoeffs(f.grid, _fft(f.values, f.grid))


def inverse_transform(c: SpectralCoeffs) -> ScalarField:
    coeffs = np.asarray(c.coeffs)
    if coeffs.shape != c.grid.shape:
        raise InvalidInputError(f"coefficient shape {coeffs.shape} does not match grid {c.grid.shape}")
    return ScalarField(c.grid, _ifft(coeffs, c.grid).real)


def hs_inner_values(a, b, grid, order) -> float:
    """Sobolev inner product of raw ``(c, *sizes)`` stacks."""
    mult = sobolev_multiplier(grid, order) if np.isscalar(order) else order
    fa = _fft(a, grid)
    fb = fa if b is a else _fft(b, grid)
    return float(np.sum(mult * (fa * fb.conj()).real))


def _order_or_multiplier(metric):
    if isinstance(metric, MetricSpec):
        return metric.multiplier
    return float(metric)


def sobolev_inner(u: Field, v: Field, metric) -> float:
    """``<u, v>_{H^s}``; ``metric`` is a MetricSpec or a bare order ``s``."""
    _same_grid(u, v)
    if type(u) is not type(v):
        raise InvalidInputError("cannot pair a scalar field with a vector field")
    if isinstance(metric, MetricSpec):
        _same_grid(u, metric)
    return hs_inner_values(_as_stack(u), _as_stack(v), u.grid, _order_or_multiplier(metric))


def sobolev_norm(u: Field, metric) -> float:
    return float(np.sqrt(max(sobolev_inner(u, u, metric), 0.0)))


def l2_inner(u: Field, v: Field) -> float:
    """Grid quadrature ``(prod h) sum u.v``."""
    _same_grid(u, v)
    return float(u.grid.cell_volume * np.sum(_as_stack(u) * _as_stack(v)))


def apply_multiplier(values, grid, mult) -> np.ndarray:
    return np.fft.ifftn(np.fft.fftn(values, axes=_axes(grid)) * mult, axes=_axes(grid)).real


def apply_operator(u: Field, metric: MetricSpec, direction: str = "L") -> Field:
    """Apply ``L = (1 - Laplacian)^s`` or its inverse ``K``."""
    _same_grid(u, metric)
    if direction == "L":
        mult = metric.multiplier
    elif direction == "K":
        mult = 1.0 / metric.multiplier
    else:
        raise InvalidInputError(f"direction must be 'L' or 'K', got {direction!r}")
    out = apply_multiplier(_as_stack(u), u.grid, mult)
    return VectorField(u.grid, out) if isinstance(u, VectorField) else ScalarField(u.grid, out[0])


def cutoff_filter(u: Field, k: float) -> Field:
    """Keep only the modes with ``|xi| <= k``."""
    k = float(k)
    if not k >= 0:
        raise InvalidInputError(f"cutoff radius must be >= 0, got {k}")
    mask = (u.grid.xi_norm2 <= k * k).astype(float)
    out = apply_multiplier(_as_stack(u), u.grid, mask)
    return VectorField(u.grid, out) if isinstance(u, VectorField) else ScalarField(u.grid, out[0])


def derivative_values(values, grid, axis) -> np.ndarray:
    """Spectral derivative along ``axis`` of a ``(..., *sizes)`` array."""
    ik = 1j * grid.wavenumbers[axis].copy()
    ik[grid.sizes[axis] // 2] = 0.0  # unpaired Nyquist mode
    shape = [1] * grid.dim
    shape[axis] = -1
    return apply_multiplier(values, grid, ik.reshape(shape))


def spectral_derivative(f: ScalarField, axis: int) -> ScalarField:
    if not 0 <= axis < f.grid.dim:
        raise InvalidInputError(f"axis {axis} out of range for d={f.grid.dim}")
    return ScalarField(f.grid, derivative_values(f.values, f.grid, axis))


def jacobian_values(disp, grid) -> np.ndarray:
    """``D(Id + f)`` as ``(d, d, *sizes)`` with entry ``[i, j] = d_j (x_i + f_i)``."""
    d = grid.dim
    jac = np.empty((d, d) + grid.shape)
    for j in range(d):
        jac[:, j] = derivative_values(disp, grid, j)
    for i in range(d):
        jac[i, i] += 1.0
    return jac


def det_values(jac) -> np.ndarray:
    if jac.shape[0] == 1:
        return jac[0, 0].copy()
    return jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------


def _bspline_weights(frac):
    """Cubic B-spline weights for nodes i-1..i+2 and their derivatives."""
    f2 = frac * frac
    f3 = f2 * frac
    g = 1.0 - frac
    w = np.empty((4,) + frac.shape)
    w[0] = g * g * g / 6
    w[1] = 0.5 * f3 - f2 + 2.0 / 3.0
    w[3] = f3 / 6
    w[2] = 1.0 - w[0] - w[1] - w[3]
    dw = np.empty((4,) + frac.shape)
    dw[0] = -0.5 * g * g
    dw[1] = 1.5 * f2 - 2 * frac
    dw[3] = 0.5 * f2
    dw[2] = -dw[0] - dw[1] - dw[3]
    return w, dw


class Interpolant:
    """Periodic interpolant of a ``(c, *sizes)`` stack.

    ``mode="spline"`` is the interpolating cubic B-spline (prefiltered in
    Fourier space, four taps per axis).  ``mode="trig"`` evaluates the
    trigonometric polynomial through the nodes and is exact for band-limited
    data.  Positions are ``(d, *pshape)`` arrays in domain units and are
    wrapped periodically.
    """

    def __init__(self, grid: GridSpec, values, mode="spline"):
        values = np.asarray(values, dtype=float)
        if values.shape[-grid.dim:] != grid.shape:
            raise InvalidInputError(f"values shape {values.shape} does not match grid {grid.shape}")
        if mode not in ("spline", "trig"):
            raise InvalidInputError(f"unknown interpolation mode {mode!r}")
        self.grid = grid
        self.mode = mode
        self.ncomp = values.shape[0]
        if mode == "spline":
            self.coeffs = apply_multiplier(values, grid, 1.0 / _spline_symbol(grid))
        else:
            self.coeffs = np.fft.fftn(values, axes=_axes(grid)) / grid.npoints

    # -- spline -------------------------------------------------------------

    def _spline_taps(self, X, need_dw):
        grid = self.grid
        flat = []
        ws, dws = [], []
        spacing = grid.spacing
        for a in range(grid.dim):
            t = X[a].ravel() / spacing[a]
            base = np.floor(t)
            w, dw = _bspline_weights(t - base)
            ws.append(w)
            dws.append(dw / spacing[a] if need_dw else None)
            idx = (base.astype(np.int64)[None, :] + np.arange(-1, 3)[:, None]) % grid.sizes[a]
            flat.append(idx)
        if grid.dim == 1:
            index = flat[0]
        else:
            index = (flat[0][:, None, :] * grid.sizes[1] + flat[1][None, :, :]).reshape(16, -1)
        return index, ws, dws

    def _spline_eval(self, X, jac):
        grid = self.grid
        index, ws, dws = self._spline_taps(X, jac)
        c = self.coeffs.reshape(self.ncomp, -1)
        taps = c[:, index]  # (c, 4^d, P)
        if grid.dim == 1:
            val = np.einsum("ktp,tp->kp", taps, ws[0])
            der = np.einsum("ktp,tp->kp", taps, dws[0])[:, None] if jac else None
        else:
            w = (ws[0][:, None] * ws[1][None, :]).reshape(16, -1)
            val = np.einsum("ktp,tp->kp", taps, w)
            if jac:
                w0 = (dws[0][:, None] * ws[1][None, :]).reshape(16, -1)
                w1 = (ws[0][:, None] * dws[1][None, :]).reshape(16, -1)
                der = np.stack([np.einsum("ktp,tp->kp", taps, w0), np.einsum("ktp,tp->kp", taps, w1)], axis=1)
            else:
                der = None
        return val, der

    def _spline_scatter(self, X, cot):
        grid = self.grid
        index, ws, _ = self._spline_taps(X, False)
        w = ws[0] if grid.dim == 1 else (ws[0][:, None] * ws[1][None, :]).reshape(16, -1)
        cot = cot.reshape(self.ncomp, -1)
        out = np.empty((self.ncomp, grid.npoints))
        for k in range(self.ncomp):
            out[k] = np.bincount(index.ravel(), weights=(w * cot[k][None, :]).ravel(), minlength=grid.npoints)
        return out.reshape((self.ncomp,) + grid.shape)

    # -- trigonometric ------------------------------------------------------

    def _exponentials(self, X):
        return [np.exp(1j * np.outer(X[a].ravel(), k)) for a, k in enumerate(self.grid.wavenumbers)]

    def _trig_eval(self, X, jac):
        grid = self.grid
        E = self._exponentials(X)
        ks = grid.wavenumbers
        if grid.dim == 1:
            val = (self.coeffs @ E[0].T).real
            der = ((self.coeffs * (1j * ks[0])) @ E[0].T).real[:, None] if jac else None
            return val, der
        val = np.empty((self.ncomp, E[0].shape[0]))
        der = np.empty((self.ncomp, 2, E[0].shape[0])) if jac else None
        for c in range(self.ncomp):
            A = E[0] @ self.coeffs[c]  # (P, n1)
            val[c] = np.sum(A * E[1], axis=1).real
            if jac:
                der[c, 0] = np.sum(((E[0] * (1j * ks[0])) @ self.coeffs[c]) * E[1], axis=1).real
                der[c, 1] = np.sum(A * (E[1] * (1j * ks[1])), axis=1).real
        return val, der

    def _trig_scatter(self, X, cot):
        E = self._exponentials(X)
        cot = cot.reshape(self.ncomp, -1)
        if self.grid.dim == 1:
            return cot @ E[0]
        return np.einsum("cp,pk,pl->ckl", cot, E[0], E[1])

    # -- public -------------------------------------------------------------

    def __call__(self, X, jac=False):
        """Values ``(c, *pshape)`` and optionally gradients ``(c, d, *pshape)``."""
        X = np.asarray(X, dtype=float)
        pshape = X.shape[1:]
        if self.mode == "spline":
            val, der = self._spline_eval(X, jac)
        else:
            val, der = self._trig_eval(X, jac)
        val = val.reshape((self.ncomp,) + pshape)
        if jac:
            return val, der.reshape((self.ncomp, self.grid.dim) + pshape)
        return val

    def jac_scatter(self, X, cot):
        """``(gradients at X, scatter(X, cot))`` sharing one tap computation."""
        X = np.asarray(X, dtype=float)
        pshape = X.shape[1:]
        grid = self.grid
        cot = np.asarray(cot).reshape(self.ncomp, -1)
        if self.mode == "trig":
            _, der = self._trig_eval(X, True)
            acc = self._trig_scatter(X, cot)
            return der.reshape((self.ncomp, grid.dim) + pshape), acc
        index, ws, dws = self._spline_taps(X, True)
        c = self.coeffs.reshape(self.ncomp, -1)
        taps = c[:, index]
        if grid.dim == 1:
            w = ws[0]
            der = np.einsum("ktp,tp->kp", taps, dws[0])[:, None]
        else:
            w = (ws[0][:, None] * ws[1][None, :]).reshape(16, -1)
            w0 = (dws[0][:, None] * ws[1][None, :]).reshape(16, -1)
            w1 = (ws[0][:, None] * dws[1][None, :]).reshape(16, -1)
            der = np.stack([np.einsum("ktp,tp->kp", taps, w0), np.einsum("ktp,tp->kp", taps, w1)], axis=1)
        acc = np.empty((self.ncomp, grid.npoints))
        flat = index.ravel()
        for k in range(self.ncomp):
            acc[k] = np.bincount(flat, weights=(w * cot[k][None, :]).ravel(), minlength=grid.npoints)
        return der.reshape((self.ncomp, grid.dim) + pshape), acc.reshape((self.ncomp,) + grid.shape)

    def scatter(self, X, cot):
        """Accumulator for :meth:`finish`; sum several before finishing once."""
        X = np.asarray(X, dtype=float)
        if self.mode == "spline":
            return self._spline_scatter(X, np.asarray(cot))
        return self._trig_scatter(X, np.asarray(cot))

    def finish(self, acc) -> np.ndarray:
        if self.mode == "spline":
            return apply_multiplier(acc, self.grid, 1.0 / _spline_symbol(self.grid))
        return np.fft.fftn(acc, axes=_axes(self.grid)).real / self.grid.npoints

    def pullback(self, X, cot) -> np.ndarray:
        """Gradient of ``sum(cot * self(X))`` with respect to the nodal values."""
        return self.finish(self.scatter(X, cot))


def _spline_symbol(grid):
    """Fourier symbol of nodal B-spline sampling, ``prod (2 + cos(k h)) / 3``."""
    out = np.ones(grid.shape)
    for a, n in enumerate(grid.sizes):
        sym = (2.0 + np.cos(2 * np.pi * np.fft.fftfreq(n))) / 3.0
        shape = [1] * grid.dim
        shape[a] = -1
        out = out * sym.reshape(shape)
    return out


def sample_at(f: Field, points: Sequence, mode: str = "spline") -> np.ndarray:
    """Evaluate a field at arbitrary positions.

    ``points`` has shape ``(P, d)`` (a single ``d``-vector is also accepted).
    Returns ``(P,)`` for scalar fields and ``(P, d)`` for vector fields.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if f.grid.dim == 1 and pts.shape[-1] != 1 and pts.shape[0] == 1:
        pts = pts.T
    if pts.shape[-1] != f.grid.dim:
        raise InvalidInputError(f"points must have {f.grid.dim} coordinates, got shape {pts.shape}")
    if np.isnan(pts).any():
        raise InvalidInputError("NaN sample position")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("non-finite sample position")
    vals = Interpolant(f.grid, _as_stack(f), mode)(pts.T)
    out = vals[0] if isinstance(f, ScalarField) else vals.T
    return out[0] if single else out


def random_field(grid: GridSpec, rng, kmax=4.0, amplitude=1.0, ncomp=None, decay=2.0) -> np.ndarray:
    """Random smooth band-limited stack with modes ``|xi| <= kmax``."""
    ncomp = grid.dim if ncomp is None else ncomp
    shape = (ncomp,) + grid.shape
    noise = rng.standard_normal(shape)
    mask = (grid.xi_norm2 <= kmax * kmax) & ~grid.nyquist_mask
    weight = mask / (1.0 + grid.xi_norm2) ** (decay / 2)
    vals = apply_multiplier(noise, grid, weight)
    scale = np.max(np.abs(vals))
    return amplitude * vals / scale if scale > 0 else vals
