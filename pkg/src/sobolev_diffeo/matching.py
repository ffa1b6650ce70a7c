"""Large-deformation matching: kernels, landmarks, images and Karcher means."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flow import Characteristics, Diffeo, FlowOptions, TimeVelocity, _check_det, integrate_flow
from .geodesic import GeodesicResult
from .metric import path_energy
from .optim import minimize
from .spectral import (
    GridSpec,
    Interpolant,
    InvalidInputError,
    MetricSpec,
    ScalarField,
    VectorField,
    apply_multiplier,
    det_values,
    hs_inner_values,
    jacobian_values,
)

log = logging.getLogger(__name__)


class LandmarkIntegrationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Kernel:
    """Translation-invariant scalar kernel ``k(x, y) = g(x - y) Id``.

    ``gaussian``: ``g(r) = exp(-|r|^2 / sigma^2)``, periodized over the three
    nearest images per axis when ``lengths`` is given.
    ``sobolev``: the Green's function of ``L = (1 - Laplacian)^s`` on the
    torus, ``g(r) = V^{-1} sum_xi (1 + |xi|^2)^{-s} cos(xi . r)`` over the
    grid lattice without the unpaired Nyquist modes.
    """

    kind: str
    sigma: float = 1.0
    lengths: Optional[tuple] = None
    metric: Optional[MetricSpec] = field(default=None, compare=False)
    dim: int = 1

    def __post_init__(self):
        if self.kind == "gaussian":
            if not self.sigma > 0:
                raise InvalidInputError("gaussian kernel needs sigma > 0")
            if self.lengths is not None:
                object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
                object.__setattr__(self, "dim", len(self.lengths))
        elif self.kind == "sobolev":
            if self.metric is None:
                raise InvalidInputError("sobolev kernel needs a MetricSpec")
            object.__setattr__(self, "dim", self.metric.grid.dim)
            object.__setattr__(self, "lengths", self.metric.grid.lengths)
        else:
            raise InvalidInputError(f"unknown kernel kind {self.kind!r}")

    @classmethod
    def gaussian(cls, sigma, dim=1, lengths=None):
        return cls("gaussian", sigma=float(sigma), lengths=lengths, dim=dim if lengths is None else len(lengths))

    @classmethod
    def sobolev(cls, metric):
        return cls("sobolev", metric=metric)

    # spectral data of the Sobolev Green's function
    def _modes(self):
        grid = self.metric.grid
        keep = ~grid.nyquist_mask
        xi = grid.xi.reshape(grid.dim, -1)[:, keep.ravel()]
        weight = (1.0 / self.metric.multiplier).ravel()[keep.ravel()] / grid.volume
        return xi, weight

    def _images(self, r):
        """Offsets ``r`` reduced to the fundamental cell, plus neighbouring images."""
        L = np.asarray(self.lengths).reshape((-1,) + (1,) * (r.ndim - 1))
        r = r - L * np.round(r / L)
        shifts = np.array(np.meshgrid(*[[-1.0, 0.0, 1.0]] * self.dim, indexing="ij")).reshape(self.dim, -1)
        return [r + (s.reshape((-1,) + (1,) * (r.ndim - 1)) * L) for s in shifts.T]

    def derivatives(self, r, order=0):
        """``g``, and up to ``order`` derivatives, at offsets ``r`` of shape ``(d, ...)``."""
        r = np.asarray(r, dtype=float)
        if self.kind == "sobolev":
            xi, weight = self._modes()
            flat = r.reshape(self.dim, -1)
            phase = xi.T @ flat  # (M, P)
            cos, sin = np.cos(phase), np.sin(phase)
            g = (weight @ cos).reshape(r.shape[1:])
            out = [g]
            if order >= 1:
                out.append(-np.einsum("m,am,mp->ap", weight, xi, sin).reshape(r.shape))
            if order >= 2:
                out.append(-np.einsum("m,am,bm,mp->abp", weight, xi, xi, cos).reshape((self.dim, self.dim) + r.shape[1:]))
            return out
        s2 = self.sigma**2
        parts = self._images(r) if self.lengths is not None else [r]
        g = 0.0
        dg = 0.0
        hg = 0.0
        eye = np.eye(self.dim).reshape((self.dim, self.dim) + (1,) * (r.ndim - 1))
        for ri in parts:
            e = np.exp(-np.sum(ri * ri, axis=0) / s2)
            g = g + e
            if order >= 1:
                dg = dg + (-2.0 / s2) * ri * e
            if order >= 2:
                hg = hg + e * (4.0 / s2**2 * ri[:, None] * ri[None, :] - 2.0 / s2 * eye)
        out = [g]
        if order >= 1:
            out.append(dg)
        if order >= 2:
            out.append(hg)
        return out

    def __call__(self, x, y) -> np.ndarray:
        """``k(x, y)`` as a ``d x d`` matrix."""
        r = (np.asarray(x, dtype=float) - np.asarray(y, dtype=float)).reshape(self.dim, 1)
        return float(self.derivatives(r)[0][0]) * np.eye(self.dim)

    def gram(self, points) -> np.ndarray:
        """Block Gram matrix ``[k(x_i, x_j)]`` of shape ``(n d, n d)``."""
        q = np.asarray(points, dtype=float).reshape(-1, self.dim)
        scal = self.derivatives((q[:, None, :] - q[None, :, :]).transpose(2, 0, 1))[0]
        return np.kron(scal, np.eye(self.dim))


# ---------------------------------------------------------------------------
# landmarks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LandmarkState:
    q: np.ndarray  # (n, d)
    p: np.ndarray  # (n, d)

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape or q.shape[0] < 1:
            raise InvalidInputError(f"positions {q.shape} and momenta {p.shape} must match, n >= 1")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise LandmarkIntegrationError("non-finite landmark state")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)


@dataclass
class LandmarkTrajectory:
    times: np.ndarray
    q: np.ndarray  # (S+1, n, d)
    p: np.ndarray

    def state(self, i=-1) -> LandmarkState:
        return LandmarkState(self.q[i], self.p[i])


def _pair_offsets(q):
    return (q[:, None, :] - q[None, :, :]).transpose(2, 0, 1)  # (d, n, n)


def hamiltonian(kernel: Kernel, state: LandmarkState) -> float:
    g = kernel.derivatives(_pair_offsets(state.q))[0]
    return 0.5 * float(np.einsum("ij,id,jd->", g, state.p, state.p))


def _rhs(kernel, q, p):
    g, dg = kernel.derivatives(_pair_offsets(q), order=1)
    qdot = g @ p
    pp = p @ p.T
    pdot = -np.einsum("ij,dij->id", pp, dg)
    return qdot, pdot


def _rhs_vjp(kernel, q, p, a, b):
    """Cotangents of ``(q, p)`` for output cotangents ``(a, b)`` of :func:`_rhs`."""
    g, dg, hg = kernel.derivatives(_pair_offsets(q), order=2)
    pp = p @ p.T
    # qdot_i = sum_j g_ij p_j
    pbar = g.T @ a
    s = a @ p.T  # s_ij = a_i . p_j
    t = np.einsum("ij,dij->id", s, dg)
    qbar = t - np.einsum("ij,dij->jd", s, dg)
    # pdot_i = -sum_j (p_i . p_j) dg_ij
    c = np.einsum("id,dij->ij", b, dg)
    pbar -= c @ p + c.T @ p
    e = np.einsum("ij,deij,ie->ijd", pp, hg, b)
    qbar += -e.sum(axis=1) + e.sum(axis=0)
    return qbar, pbar


def kernel_velocity(kernel: Kernel, state: LandmarkState, grid: Optional[GridSpec] = None, points=None):
    """``u(x) = sum_i k(x, q_i) p_i`` on a grid (VectorField) or at ``points`` ``(P, d)``."""
    if grid is None and points is None:
        raise InvalidInputError("need a grid or evaluation points")
    if points is not None:
        x = np.asarray(points, dtype=float).reshape(-1, kernel.dim)
        r = (x[:, None, :] - state.q[None, :, :]).transpose(2, 0, 1)
        return kernel.derivatives(r)[0] @ state.p
    if kernel.kind == "sobolev":
        if grid != kernel.metric.grid:
            raise InvalidInputError("sobolev kernel velocity must be evaluated on its own grid")
        # K applied to the trigonometric projection of the point masses
        xi = grid.xi.reshape(grid.dim, -1)
        phase = np.exp(-1j * (state.q @ xi))  # (n, M)
        coeffs = (state.p.T @ phase).reshape((grid.dim,) + grid.shape)
        coeffs = coeffs * (~grid.nyquist_mask) / kernel.metric.multiplier / grid.volume
        values = np.fft.ifftn(coeffs, axes=tuple(range(1, grid.dim + 1))).real * grid.npoints
        return VectorField(grid, values)
    x = grid.coords.reshape(grid.dim, -1).T
    vals = kernel_velocity(kernel, state, points=x)
    return VectorField(grid, vals.T.reshape((grid.dim,) + grid.shape))


def _rk4(kernel, q, p, h):
    k1 = _rhs(kernel, q, p)
    z2 = (q + 0.5 * h * k1[0], p + 0.5 * h * k1[1])
    k2 = _rhs(kernel, *z2)
    z3 = (q + 0.5 * h * k2[0], p + 0.5 * h * k2[1])
    k3 = _rhs(kernel, *z3)
    z4 = (q + h * k3[0], p + h * k3[1])
    k4 = _rhs(kernel, *z4)
    qn = q + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    pn = p + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return qn, pn, ((q, p), z2, z3, z4)


def landmark_shoot(kernel: Kernel, initial: LandmarkState, t: float = 1.0, steps: int = 40,
                   keep_stages: bool = False):
    """Integrate the landmark Hamiltonian system with rk4 on ``[0, t]``."""
    h = float(t) / steps
    q, p = initial.q.copy(), initial.p.copy()
    qs, ps, stages = [q], [p], []
    for _ in range(steps):
        q, p, st = _rk4(kernel, q, p, h)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise LandmarkIntegrationError("landmark integration produced non-finite values")
        qs.append(q)
        ps.append(p)
        if keep_stages:
            stages.append(st)
    traj = LandmarkTrajectory(np.linspace(0.0, t, steps + 1), np.array(qs), np.array(ps))
    return (traj, stages, h) if keep_stages else traj


def _shoot_vjp(kernel, stages, h, qbar, pbar):
    for (z1, z2, z3, z4) in reversed(stages):
        kq = [h / 6 * qbar, h / 3 * qbar, h / 3 * qbar, h / 6 * qbar]
        kp = [h / 6 * pbar, h / 3 * pbar, h / 3 * pbar, h / 6 * pbar]
        nq, npb = qbar.copy(), pbar.copy()
        for k, z, c in ((3, z4, 1.0), (2, z3, 0.5), (1, z2, 0.5), (0, z1, 0.0)):
            zq, zp = _rhs_vjp(kernel, z[0], z[1], kq[k], kp[k])
            nq += zq
            npb += zp
            if k > 0:
                kq[k - 1] = kq[k - 1] + c * h * zq
                kp[k - 1] = kp[k - 1] + c * h * zp
        qbar, pbar = nq, npb
    return qbar, pbar


@dataclass
class LandmarkMatch:
    momenta: np.ndarray
    trajectory: LandmarkTrajectory
    distance: float
    residual: float
    trace: list


def landmark_match(kernel: Kernel, q_source, q_target, penalties=(1e1, 1e2, 1e3, 1e4), steps: int = 40,
                   max_iter: int = 500, method: str = "lbfgs", p0=None) -> LandmarkMatch:
    """Initial momenta minimizing ``H(q0, p0) + lam |q(1) - q_target|^2``.

    The distance reported is ``sqrt(2 H)`` of the converged shot.
    """
    q0 = np.atleast_2d(np.asarray(q_source, dtype=float))
    qt = np.atleast_2d(np.asarray(q_target, dtype=float))
    if q0.shape != qt.shape:
        raise InvalidInputError(f"landmark sets differ in shape: {q0.shape} vs {qt.shape}")
    p = np.zeros_like(q0) if p0 is None else np.array(p0, dtype=float)
    trace = []
    if np.array_equal(q0, qt) and p0 is None:
        traj = landmark_shoot(kernel, LandmarkState(q0, p), 1.0, steps)
        return LandmarkMatch(p, traj, 0.0, 0.0, [0.0])
    g0 = kernel.derivatives(_pair_offsets(q0))[0]
    lam_box = [penalties[0]]

    def fun_grad(pflat):
        pm = pflat.reshape(q0.shape)
        traj, stages, h = landmark_shoot(kernel, LandmarkState(q0, pm), 1.0, steps, keep_stages=True)
        r = traj.q[-1] - qt
        lam = lam_box[0]
        F = 0.5 * float(np.einsum("ij,id,jd->", g0, pm, pm)) + lam * float(np.sum(r * r))
        _, pbar = _shoot_vjp(kernel, stages, h, 2 * lam * r, np.zeros_like(pm))
        return F, (g0 @ pm + pbar).ravel()

    x = p.ravel()
    for lam in penalties:
        lam_box[0] = lam
        res = minimize(fun_grad, x, method=method, max_iter=max_iter)
        x = res.x
        trace.extend(res.trace)
    p = x.reshape(q0.shape)
    traj = landmark_shoot(kernel, LandmarkState(q0, p), 1.0, steps)
    H = hamiltonian(kernel, LandmarkState(q0, p))
    resid = float(np.linalg.norm(traj.q[-1] - qt))
    return LandmarkMatch(p, traj, math.sqrt(max(2 * H, 0.0)), resid, trace)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationProblem:
    source: ScalarField
    target: ScalarField
    metric: MetricSpec
    sigma_s: Optional[float] = None
    steps: int = 4
    weight_schedule: tuple = (1.0, 10.0, 100.0)
    max_iter: int = 200
    method: str = "lbfgs"
    substeps: int = 1
    interp: str = "spline"

    def __post_init__(self):
        if self.source.grid != self.target.grid or self.source.grid != self.metric.grid:
            raise InvalidInputError("source, target and metric must share one grid")
        if self.sigma_s is not None and not self.sigma_s > 0:
            raise InvalidInputError("sigma_s must be > 0")


@dataclass
class RegistrationResult:
    geodesic: GeodesicResult
    warped: ScalarField
    similarity: float
    initial_similarity: float
    sigma_s: float
    min_jacobian: float
    mismatch: float
    initial_mismatch: float


class RegistrationObjective:
    """``0.5 sum_j dt_j |u_j|^2_{H^s} + w * 0.5 |I o phi^{-1} - J|^2_{L^2}``."""

    def __init__(self, problem: RegistrationProblem, weight=1.0):
        self.problem = problem
        self.grid = problem.metric.grid
        self.metric = problem.metric
        self.knots = np.linspace(0.0, 1.0, problem.steps + 1)
        self.dts = np.diff(self.knots)
        self._dt = self.dts.reshape([-1] + [1] * (self.grid.dim + 1))
        self.opts = FlowOptions(problem.substeps, "rk4", math.inf, problem.interp)
        self.image = Interpolant(self.grid, problem.source.values[None], "spline")
        self.J = problem.target.values
        self.weight = weight

    def velocity(self, values):
        return TimeVelocity(self.knots, values, self.metric)

    def inverse_positions(self, values, record=False):
        """Node images under ``phi^{-1}``: characteristics of ``-u(1 - t)``."""
        ch = Characteristics(self.velocity(values).reversed(), self.opts, substeps=[self.problem.substeps] * len(self.dts))
        return ch, ch.forward(self.grid.coords, record=record)

    def similarity(self, values):
        _, X = self.inverse_positions(values)
        diff = self.image(X)[0] - self.J
        return 0.5 * self.grid.cell_volume * float(np.sum(diff * diff))

    def __call__(self, values, grad=True):
        grid = self.grid
        ch, X = self.inverse_positions(values, record=grad)
        _check_det(det_values(jacobian_values(X - grid.coords, grid)), grid, time=1.0)
        if grad:
            warped, dI = self.image(X, jac=True)
        else:
            warped = self.image(X)
        diff = warped[0] - self.J
        m = self.metric.multiplier
        energy = float(sum(dt * hs_inner_values(v, v, grid, m) for dt, v in zip(self.dts, values)))
        F = 0.5 * energy + self.weight * 0.5 * grid.cell_volume * float(np.sum(diff * diff))
        if not grad:
            return F
        xbar = self.weight * grid.cell_volume * diff[None] * dI[0]
        grev, _ = ch.backward(xbar)
        g = -grev[::-1] + grid.cell_volume * self._dt * apply_multiplier(values, grid, m)
        return F, g

    def precondition(self, g):
        return apply_multiplier(g, self.grid, 1.0 / self.metric.multiplier) / (self.grid.cell_volume * self._dt)


def auto_weight(obj: RegistrationObjective) -> float:
    """Similarity weight ``1 / sigma_S^2`` balancing both terms at the first trial step.

    The trial velocity is the preconditioned steepest-descent direction of the
    similarity, scaled so its linearization would remove the whole mismatch;
    the weight makes the two terms equal there.
    """
    zero = np.zeros((len(obj.dts), obj.grid.dim) + obj.grid.shape)
    saved = obj.weight
    obj.weight = 1.0
    F0, g = obj(zero)
    obj.weight = saved
    d = -obj.precondition(g)
    slope = float(np.sum(g * d))
    if F0 <= 0 or slope >= 0:
        return 1.0
    trial = d * (F0 / -slope)
    m = obj.metric.multiplier
    energy = float(sum(dt * hs_inner_values(v, v, obj.grid, m) for dt, v in zip(obj.dts, trial)))
    return 0.5 * energy / F0


def register_images(problem: RegistrationProblem, seed: Optional[int] = None, init=None) -> RegistrationResult:
    """Diffeomorphic L2 image matching ``I o phi^{-1} ~ J``.

    The similarity weight runs through ``problem.weight_schedule`` (multiples
    of ``1 / sigma_S^2``) with warm starts.  ``seed`` is accepted for interface
    symmetry; the solve starts from zero velocity and is deterministic.
    """
    obj = RegistrationObjective(problem)
    grid = obj.grid
    base = 1.0 / problem.sigma_s**2 if problem.sigma_s is not None else auto_weight(obj)
    values = np.zeros((problem.steps, grid.dim) + grid.shape) if init is None else np.array(init, dtype=float)
    initial_similarity = obj.similarity(np.zeros_like(values))
    trace, stage_ends, iterations = [], [], 0
    res = None
    for factor in problem.weight_schedule:
        obj.weight = base * factor
        res = minimize(obj, values, precond=obj.precondition, method=problem.method, max_iter=problem.max_iter)
        values = res.x
        trace.extend(res.trace)
        stage_ends.append(len(trace))
        iterations += res.iterations
        log.info("weight=%g: F=%.6g after %d iterations (%s)", obj.weight, res.fun, res.iterations, res.message)
    u = obj.velocity(values)
    _, X = obj.inverse_positions(values)
    warped = ScalarField(grid, obj.image(X)[0])
    sim = obj.similarity(values)
    phi = integrate_flow(u, 1.0, obj.opts)
    rep = path_energy(u)
    converged = res is None or res.message != "max_iter"
    geo = GeodesicResult(u, rep.energy, rep.length, math.sqrt(2 * sim), trace, iterations, converged, stage_ends)
    return RegistrationResult(
        geodesic=geo,
        warped=warped,
        similarity=sim,
        initial_similarity=initial_similarity,
        sigma_s=1.0 / math.sqrt(base * problem.weight_schedule[-1]),
        min_jacobian=float(np.min(phi.jac_det.values)),
        mismatch=math.sqrt(2 * sim),
        initial_mismatch=math.sqrt(2 * initial_similarity),
    )


def warp_image(image: ScalarField, u: TimeVelocity, opts: FlowOptions = FlowOptions()) -> ScalarField:
    """``I o Fl_1(u)^{-1}``."""
    inv = integrate_flow(u.reversed(), u.knots[-1], opts)
    return ScalarField(image.grid, Interpolant(image.grid, image.values[None], "spline")(inv.positions)[0])


# ---------------------------------------------------------------------------
# Karcher mean
# ---------------------------------------------------------------------------


@dataclass
class KarcherResult:
    mean: ScalarField
    distances: np.ndarray
    objective: float
    sweeps: list  # sum of squared distances after each accepted sweep
    converged: bool
    flagged: list = field(default_factory=list)


def karcher_mean(images, reference: Optional[ScalarField] = None, problem_kwargs: Optional[dict] = None,
                 damping: float = 0.5, rtol: float = 1e-3, max_sweeps: int = 20, threads: int = 1) -> KarcherResult:
    """Fixed-point Karcher mean of images under the registration distance.

    Each sweep registers the current mean to every image, averages the
    initial velocities and moves the mean along the damped average.  A sweep
    that would increase ``sum d^2`` is rejected and the damping halved.
    """
    images = list(images)
    if not images:
        raise InvalidInputError("karcher_mean needs at least one image")
    grid = images[0].grid
    for im in images:
        if im.grid != grid:
            raise InvalidInputError("all images must share one grid")
    kwargs = dict(problem_kwargs or {})
    metric = kwargs.pop("metric")
    mean = images[0] if reference is None else reference

    def register_all(current):
        problems = [RegistrationProblem(current, im, metric, **kwargs) for im in images]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(register_images, problems))
        return [register_images(p) for p in problems]

    def evaluate(current):
        results = register_all(current)
        dists = np.array([r.geodesic.length for r in results])
        return results, dists, float(np.sum(dists**2))

    if len(images) == 1 and reference is None:
        return KarcherResult(images[0], np.zeros(1), 0.0, [0.0], True)
    results, dists, total = evaluate(mean)
    sweeps = [total]
    converged = False
    step = damping
    for _ in range(max_sweeps):
        if total == 0.0:
            converged = True
            break
        avg = np.mean([r.geodesic.velocity.values[0] for r in results], axis=0)
        moved = None
        while step > 1e-3:
            u = TimeVelocity.stationary(step * avg, metric, 1)
            candidate = warp_image(mean, u, FlowOptions(4, "rk4", math.inf))
            c_results, c_dists, c_total = evaluate(candidate)
            if c_total <= total:
                moved = (candidate, c_results, c_dists, c_total)
                break
            step *= 0.5
        if moved is None:
            converged = True
            break
        decrease = (total - moved[3]) / total
        mean, results, dists, total = moved
        sweeps.append(total)
        log.info("karcher sweep: sum d^2 = %.6g (decrease %.3g%%)", total, 100 * decrease)
        if decrease < rtol:
            converged = True
            break
    flagged = [i for i, r in enumerate(results) if not r.geodesic.converged]
    return KarcherResult(mean, dists, total, sweeps, converged, flagged)
