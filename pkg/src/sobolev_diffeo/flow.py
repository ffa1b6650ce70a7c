"""Flows of time-dependent vector fields on the periodic grid.

A diffeomorphism is stored as its periodic displacement ``f`` with
``phi = Id + f``.  Flows are computed by following the characteristics
``x' = u(t, x)`` from every grid node; velocities are piecewise constant in
time so each interval is an autonomous ODE.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .spectral import (
    GridSpec,
    Interpolant,
    InvalidInputError,
    MetricSpec,
    ScalarField,
    VectorField,
    det_values,
    hs_inner_values,
    jacobian_values,
)


class DegenerateFlowError(RuntimeError):
    """The Jacobian determinant of a computed map became non-positive."""

    def __init__(self, message, time=None, location=None, value=None):
        super().__init__(message)
        self.time = time
        self.location = location
        self.value = value


class NoConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeVelocity:
    """Piecewise-constant velocity: ``values[j]`` acts on ``[knots[j], knots[j+1])``."""

    knots: np.ndarray
    values: np.ndarray  # (N, d, *sizes)
    metric: MetricSpec

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        grid = self.metric.grid
        if knots.ndim != 1 or len(knots) < 2 or not np.all(np.diff(knots) > 0):
            raise InvalidInputError("time knots must be strictly increasing with at least two entries")
        expected = (len(knots) - 1, grid.dim) + grid.shape
        if values.shape != expected:
            raise InvalidInputError(f"velocity values: expected shape {expected}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("velocity values must be finite")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, metric, steps=8):
        g = metric.grid
        return cls(np.linspace(0.0, 1.0, steps + 1), np.zeros((steps, g.dim) + g.shape), metric)

    @classmethod
    def stationary(cls, field_values, metric, steps=1):
        if isinstance(field_values, VectorField):
            field_values = field_values.values
        field_values = np.asarray(field_values, dtype=float)
        return cls(np.linspace(0.0, 1.0, steps + 1), np.repeat(field_values[None], steps, axis=0), metric)

    @classmethod
    def from_fields(cls, knots, fields, metric):
        return cls(knots, np.stack([f.values for f in fields]), metric)

    @property
    def grid(self) -> GridSpec:
        return self.metric.grid

    @property
    def steps(self) -> int:
        return len(self.knots) - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.knots)

    @property
    def fields(self) -> list:
        return [VectorField(self.grid, v) for v in self.values]

    def speeds(self) -> np.ndarray:
        """``H^s`` norm of each interval's field."""
        return np.array([np.sqrt(max(hs_inner_values(v, v, self.grid, self.metric.multiplier), 0.0)) for v in self.values])

    def l1_norm(self) -> float:
        return float(np.sum(self.dts * self.speeds()))

    def scaled(self, factor) -> "TimeVelocity":
        return TimeVelocity(self.knots, self.values * factor, self.metric)

    def reversed(self) -> "TimeVelocity":
        """``v(t) = -u(a + b - t)`` on the same time span ``[a, b]``."""
        a, b = self.knots[0], self.knots[-1]
        return TimeVelocity((a + b - self.knots)[::-1], -self.values[::-1], self.metric)

    def restrict(self, t0, t1) -> "TimeVelocity":
        """Restriction to ``[t0, t1]``, splitting intervals at the ends."""
        a, b = self.knots[0], self.knots[-1]
        if not a <= t0 < t1 <= b:
            raise InvalidInputError(f"[{t0}, {t1}] is not a subinterval of [{a}, {b}]")
        inner = self.knots[(self.knots > t0) & (self.knots < t1)]
        knots = np.concatenate([[t0], inner, [t1]])
        idx = np.clip(np.searchsorted(self.knots, knots[:-1], side="right") - 1, 0, self.steps - 1)
        return TimeVelocity(knots, self.values[idx], self.metric)

    @staticmethod
    def concatenate(pieces) -> "TimeVelocity":
        knots = [pieces[0].knots]
        for prev, piece in zip(pieces, pieces[1:]):
            if not np.isclose(prev.knots[-1], piece.knots[0], rtol=0, atol=1e-14):
                raise InvalidInputError("pieces are not contiguous in time")
            knots.append(piece.knots[1:])
        return TimeVelocity(np.concatenate(knots), np.concatenate([p.values for p in pieces]), pieces[0].metric)


def _check_det(det, grid, time=None):
    idx = int(np.argmin(det))
    value = float(det.flat[idx])
    if not value > 0:
        loc = tuple(float(c.flat[idx]) for c in grid.coords)
        when = "" if time is None else f" at t={time:.6g}"
        raise DegenerateFlowError(
            f"Jacobian determinant {value:.3g} <= 0{when} near x={loc}; "
            "the step size is too coarse or the field too large",
            time=time, location=loc, value=value,
        )


@dataclass(frozen=True)
class Diffeo:
    """``phi = Id + displacement`` with its cached Jacobian determinant."""

    displacement: VectorField
    jac_det: Optional[ScalarField] = field(default=None, compare=False)

    def __post_init__(self):
        if self.jac_det is None:
            disp = self.displacement
            det = det_values(jacobian_values(disp.values, disp.grid))
            _check_det(det, disp.grid)
            object.__setattr__(self, "jac_det", ScalarField(disp.grid, det))

    @classmethod
    def identity(cls, grid):
        return cls(VectorField.zeros(grid))

    @classmethod
    def translation(cls, grid, c):
        return cls(VectorField.constant(grid, c))

    @classmethod
    def from_values(cls, grid, disp):
        return cls(VectorField(grid, disp))

    @property
    def grid(self) -> GridSpec:
        return self.displacement.grid

    @property
    def positions(self) -> np.ndarray:
        return self.grid.coords + self.displacement.values


@dataclass(frozen=True)
class FlowOptions:
    """Integrator settings.

    Each interval uses ``max(substeps_per_interval, ceil(dt * |u_j| / mass_cap))``
    internal steps, so no step carries more than ``mass_cap`` of ``int |u|_{H^s} dt``.
    """

    substeps_per_interval: int = 4
    scheme: str = "rk4"
    mass_cap: float = 0.25
    interp: str = "spline"

    def __post_init__(self):
        if int(self.substeps_per_interval) < 1:
            raise InvalidInputError("substeps_per_interval must be >= 1")
        if self.scheme not in ("euler", "rk4"):
            raise InvalidInputError(f"unknown scheme {self.scheme!r}")
        if not self.mass_cap > 0:
            raise InvalidInputError("mass_cap must be > 0")
        if self.interp not in ("spline", "trig"):
            raise InvalidInputError(f"unknown interpolation mode {self.interp!r}")


# ---------------------------------------------------------------------------
# characteristics and their adjoint
# ---------------------------------------------------------------------------


def substep_counts(u: TimeVelocity, opts: FlowOptions, speeds=None) -> np.ndarray:
    speeds = u.speeds() if speeds is None else speeds
    base = int(opts.substeps_per_interval)
    if not math.isfinite(opts.mass_cap):
        return np.full(u.steps, base)
    return np.maximum(base, np.ceil(u.dts * speeds / opts.mass_cap - 1e-12).astype(int))


class Characteristics:
    """Integrates ``x' = u(t, x)`` from given starting positions.

    With ``record=True`` the stage positions are kept so :meth:`backward`
    can return the exact gradient of the discrete map (reverse accumulation
    through every rk4/euler stage).
    """

    def __init__(self, u: TimeVelocity, opts: FlowOptions, substeps=None):
        self.u = u
        self.opts = opts
        self.substeps = substep_counts(u, opts) if substeps is None else np.asarray(substeps, dtype=int)
        self.interps = [Interpolant(u.grid, v, opts.interp) for v in u.values]
        self.tape = None

    def _step(self, f, X, h, record):
        if self.opts.scheme == "euler":
            if record is not None:
                record.append((X,))
            return X + h * f(X)
        k1 = f(X)
        z2 = X + 0.5 * h * k1
        k2 = f(z2)
        z3 = X + 0.5 * h * k2
        k3 = f(z3)
        z4 = X + h * k3
        k4 = f(z4)
        if record is not None:
            record.append((X, z2, z3, z4))
        return X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def forward(self, X0, t_end=None, record=False, at_knots=False, check=None):
        """Positions at ``t_end`` (default: end of the time span).

        ``at_knots`` additionally returns the positions at every knot reached.
        ``check`` is a callable applied at each knot (used for determinant checks).
        """
        u = self.u
        t_end = u.knots[-1] if t_end is None else float(t_end)
        if not u.knots[0] - 1e-14 <= t_end <= u.knots[-1] + 1e-14:
            raise InvalidInputError(f"t={t_end} outside the time span [{u.knots[0]}, {u.knots[-1]}]")
        X = np.array(X0, dtype=float)
        self.tape = [] if record else None
        frames = [X.copy()] if at_knots else None
        for j in range(u.steps):
            t0, t1 = u.knots[j], u.knots[j + 1]
            if t_end <= t0:
                break
            partial = t_end < t1
            span = (min(t1, t_end) - t0)
            m = int(self.substeps[j])
            if partial:
                m = max(1, int(math.ceil(m * span / (t1 - t0))))
            h = span / m
            steps = [] if record else None
            f = self.interps[j]
            for _ in range(m):
                X = self._step(f, X, h, steps)
            if record:
                self.tape.append((j, h, steps))
            if check is not None:
                check(X, min(t1, t_end))
            if at_knots and not partial:
                frames.append(X.copy())
        return (X, frames) if at_knots else X

    def backward(self, Xbar):
        """Gradients ``(dvalues, dX0)`` of ``sum(Xbar * X_end)``."""
        if self.tape is None:
            raise RuntimeError("forward(record=True) must run before backward")
        u = self.u
        grad = np.zeros_like(u.values)
        xbar = np.array(Xbar, dtype=float)
        for j, h, steps in reversed(self.tape):
            f = self.interps[j]
            acc = None
            for stages in reversed(steps):
                if self.opts.scheme == "euler":
                    (X,) = stages
                    J, s = f.jac_scatter(X, h * xbar)
                    acc = s if acc is None else acc + s
                    xbar = xbar + h * np.einsum("cd...,c...->d...", J, xbar)
                    continue
                X, z2, z3, z4 = stages
                kb = [(h / 6.0) * xbar, (h / 3.0) * xbar, (h / 3.0) * xbar, (h / 6.0) * xbar]
                new = xbar.copy()
                # stage k evaluates u at z_k = X + c_k h k_{k-1}
                for k, z, c in ((3, z4, 1.0), (2, z3, 0.5), (1, z2, 0.5), (0, X, 0.0)):
                    J, s = f.jac_scatter(z, kb[k])
                    acc = s if acc is None else acc + s
                    zbar = np.einsum("cd...,c...->d...", J, kb[k])
                    new += zbar
                    if k > 0:
                        kb[k - 1] = kb[k - 1] + (c * h) * zbar
                xbar = new
            if acc is not None:
                grad[j] += f.finish(acc)
        return grad, xbar


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _det_checker(grid):
    coords = grid.coords

    def check(X, t):
        _check_det(det_values(jacobian_values(X - coords, grid)), grid, time=t)

    return check


def integrate_flow(u: TimeVelocity, t: float = 1.0, opts: FlowOptions = FlowOptions()) -> Diffeo:
    """``Fl_t(u)``: the flow from the start of ``u``'s time span up to ``t``.

    Raises
    ------
    DegenerateFlowError
        If ``det D phi <= 0`` at some node at any knot reached.
    """
    grid = u.grid
    chars = Characteristics(u, opts)
    X = chars.forward(grid.coords, t_end=t, check=_det_checker(grid))
    return Diffeo(VectorField(grid, X - grid.coords))


def flow_frames(u: TimeVelocity, opts: FlowOptions = FlowOptions(), start: Optional[Diffeo] = None) -> list:
    """``[Fl_{t_j}(u) o start for each knot t_j]``.

    Characteristics start from ``start``'s node positions, which realizes the
    composition with ``start`` without an extra interpolation.
    """
    grid = u.grid
    X0 = grid.coords if start is None else start.positions
    chars = Characteristics(u, opts)
    _, frames = chars.forward(X0, at_knots=True, check=_det_checker(grid))
    return [Diffeo(VectorField(grid, X - grid.coords)) for X in frames]


def compose(outer: Diffeo, inner: Diffeo, mode: str = "spline") -> Diffeo:
    """``outer o inner``, interpolating ``outer``'s displacement."""
    if outer.grid != inner.grid:
        raise InvalidInputError(f"grid mismatch: {outer.grid} vs {inner.grid}")
    grid = outer.grid
    f_in = inner.displacement.values
    f_out = outer.displacement.values
    if not np.any(f_in):
        return outer
    axes = tuple(range(1, grid.dim + 1))
    if np.all(np.ptp(f_out, axis=axes) == 0):
        # spatially constant outer displacement: a translation
        return Diffeo(VectorField(grid, f_in + f_out))
    sampled = Interpolant(grid, f_out, mode)(inner.positions)
    return Diffeo(VectorField(grid, f_in + sampled))


def _operator_norm_max(disp, grid):
    jac = jacobian_values(disp, grid)
    for i in range(grid.dim):
        jac[i, i] -= 1.0
    if grid.dim == 1:
        return float(np.max(np.abs(jac)))
    mats = np.moveaxis(jac.reshape(2, 2, -1), -1, 0)
    return float(np.max(np.linalg.norm(mats, ord=2, axis=(1, 2))))


def invert(phi: Diffeo, velocity: Optional[TimeVelocity] = None, opts: FlowOptions = FlowOptions(),
           tol: float = 1e-10, max_iter: int = 200, mode: str = "spline") -> Diffeo:
    """Inverse diffeomorphism.

    With ``velocity`` given (``phi = Fl_1(velocity)``) the inverse is the flow
    of the reversed field ``-u(1 - t)``.  Otherwise the fixed point
    ``g = -f o (Id + g)`` is iterated.
    """
    if velocity is not None:
        return integrate_flow(velocity.reversed(), velocity.knots[-1], opts)
    grid = phi.grid
    f = phi.displacement.values
    if not np.any(f):
        return phi
    axes = tuple(range(1, grid.dim + 1))
    if np.all(np.ptp(f, axis=axes) == 0):
        return Diffeo(VectorField(grid, -f))
    lip = _operator_norm_max(f, grid)
    if lip >= 1.0:
        raise NoConvergenceError(f"fixed-point inversion is not a contraction: sup |Df| = {lip:.3g} >= 1")
    interp = Interpolant(grid, f, mode)
    g = -f
    coords = grid.coords
    for _ in range(max_iter):
        g_new = -interp(coords + g)
        delta = float(np.max(np.abs(g_new - g)))
        g = g_new
        if delta < tol:
            return Diffeo(VectorField(grid, g))
    raise NoConvergenceError(f"fixed-point inversion did not reach tol={tol} in {max_iter} iterations")


def decompose_velocity(u: TimeVelocity, eps: float) -> list:
    """Split the time span so each piece carries ``int |u|_{H^s} dt < eps``.

    Cut times are ``t_j = sup F^{-1}(j M / N)`` with ``F(t) = int_0^t |u|``,
    ``M = F(end)`` and ``N = floor(M / eps) + 1`` pieces.
    """
    eps = float(eps)
    if not eps > 0:
        raise InvalidInputError(f"eps must be > 0, got {eps}")
    speeds = u.speeds()
    cum = np.concatenate([[0.0], np.cumsum(u.dts * speeds)])
    total = cum[-1]
    if total < eps:
        return [u]
    # exact rational floor: a rounded float quotient can land one piece short or long
    n = math.floor(Fraction(float(total)) / Fraction(eps)) + 1
    cuts = [u.knots[0]]
    for j in range(1, n):
        level = j * total / n
        i = int(np.searchsorted(cum, level, side="right")) - 1
        i = min(i, u.steps - 1)
        t = u.knots[i] + (level - cum[i]) / speeds[i] if speeds[i] > 0 else u.knots[i + 1]
        cuts.append(t)
    cuts.append(u.knots[-1])
    return [u.restrict(a, b) for a, b in zip(cuts, cuts[1:])]


def jacobian_min(phi: Diffeo) -> float:
    return float(np.min(phi.jac_det.values))
