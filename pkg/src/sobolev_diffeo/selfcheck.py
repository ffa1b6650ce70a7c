"""Fast invariant checks run by ``sobolev-diffeo selfcheck``.

Each check returns a measured discrepancy; it passes when the discrepancy is
at most its tolerance.  All randomness comes from named streams of one seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .flow import (
    Diffeo,
    FlowOptions,
    TimeVelocity,
    compose,
    decompose_velocity,
    flow_frames,
    integrate_flow,
    invert,
    jacobian_min,
)
from .geodesic import BvpProblem, DistanceConfig, distance_estimate, gradient_check
from .matching import Kernel, LandmarkState, hamiltonian, kernel_velocity, landmark_shoot
from .metric import DiffeoPath, path_energy, theta
from .rng import stream
from .spectral import (
    GridSpec,
    MetricSpec,
    ScalarField,
    VectorField,
    apply_operator,
    cutoff_filter,
    hs_inner_values,
    inverse_transform,
    random_field,
    sample_at,
    transform,
)


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured) and self.measured <= self.tolerance)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def closed_form_sine_flow(x, a, t=1.0):
    """Time-``t`` flow of ``a sin(x) d/dx`` on the circle."""
    return 2.0 * np.arctan2(np.exp(a * t) * np.sin(x / 2), np.cos(x / 2)) % (2 * np.pi) + 2 * np.pi * np.floor(x / (2 * np.pi))


def check_parseval(grid, rng, order):
    worst = 0.0
    for _ in range(20):
        a = random_field(grid, rng, kmax=grid.sizes[0] / 2, decay=0.0)
        b = random_field(grid, rng, kmax=grid.sizes[0] / 2, decay=0.0)
        quad = grid.cell_volume * float(np.sum(a * b))
        worst = max(worst, abs(hs_inner_values(a, b, grid, 0.0) - quad) / max(abs(quad), 1e-300))
    return worst


def check_roundtrip(grid, rng, order):
    f = ScalarField(grid, random_field(grid, rng, kmax=grid.sizes[0] / 2, ncomp=1, decay=0.0)[0])
    back = inverse_transform(transform(f)).values
    return float(np.max(np.abs(back - f.values)) / np.max(np.abs(f.values)))


def check_kl_identity(grid, rng, order):
    metric = MetricSpec(grid, order)
    u = VectorField(grid, random_field(grid, rng))
    back = apply_operator(apply_operator(u, metric, "L"), metric, "K").values
    return float(np.max(np.abs(back - u.values)) / np.max(np.abs(u.values)))


def check_interpolation_inequality(grid, rng, order):
    worst = 0.0
    for _ in range(50):
        f = random_field(grid, rng, kmax=grid.sizes[0] / 2, decay=float(rng.uniform(0, 3)))
        lam = float(rng.uniform(0, 1))
        sig = float(rng.uniform(0, order))
        mid = lam * sig + (1 - lam) * order
        lhs = math.sqrt(hs_inner_values(f, f, grid, mid))
        rhs = math.sqrt(hs_inner_values(f, f, grid, sig)) ** lam * math.sqrt(hs_inner_values(f, f, grid, order)) ** (1 - lam)
        worst = max(worst, lhs / rhs - 1.0)
    return max(worst, 0.0)


def check_cutoff(grid, rng, order):
    """Worst relative violation of the cutoff bound and of monotone decay."""
    u = VectorField(grid, random_field(grid, rng, kmax=grid.sizes[0] / 2, decay=1.0))
    worst = 0.0
    prev = math.inf
    base = hs_inner_values(u.values, u.values, grid, order)
    for k in np.linspace(0, np.sqrt(np.max(grid.xi_norm2)) + 1, 25):
        c = cutoff_filter(u, k).values
        hi = hs_inner_values(c, c, grid, order + 1)
        worst = max(worst, hi / ((1 + k * k) * base) - 1.0)
        err = math.sqrt(max(hs_inner_values(c - u.values, c - u.values, grid, order), 0.0))
        worst = max(worst, (err - prev) / max(prev, 1e-300) if prev < math.inf else 0.0)
        prev = err
    return max(worst, 0.0) + prev


def check_sine_flow(grid, rng, order):
    metric = MetricSpec(grid, order)
    x = grid.coords[0]
    u = TimeVelocity.stationary(0.5 * np.sin(x)[None], metric)
    phi = integrate_flow(u, 1.0, FlowOptions(64, "rk4", math.inf, "trig"))
    return float(np.max(np.abs(phi.positions[0] - closed_form_sine_flow(x, 0.5))))


def check_jacobian_min(grid, rng, order):
    metric = MetricSpec(grid, order)
    x = grid.coords[0]
    u = TimeVelocity.stationary(0.5 * np.sin(x)[None], metric)
    phi = integrate_flow(u, 1.0, FlowOptions(64, "rk4", math.inf, "trig"))
    # phi'(x) = e^a / (cos^2(x/2) + e^{2a} sin^2(x/2)) attains its minimum e^{-a} at x = pi
    return abs(jacobian_min(phi) - math.exp(-0.5))


def check_inverse(grid, rng, order):
    metric = MetricSpec(grid, order)
    u = TimeVelocity.stationary(0.5 * np.sin(grid.coords[0])[None], metric)
    phi = integrate_flow(u, 1.0)
    back = compose(phi, invert(phi))
    return float(np.max(np.abs(back.displacement.values)))


def check_decomposition(grid, rng, order):
    metric = MetricSpec(grid, order)
    worst = 0.0
    opts = FlowOptions(1, "rk4", 0.01, "trig")
    for _ in range(3):
        vals = np.stack([random_field(grid, rng, kmax=3) for _ in range(4)])
        u = TimeVelocity(np.linspace(0, 1, 5), vals, metric)
        u = u.scaled(1.0 / u.l1_norm())
        pieces = decompose_velocity(u, 0.3)
        if len(pieces) > 4:
            return math.inf
        phi = Diffeo.identity(grid)
        for piece in pieces:
            phi = flow_frames(piece, opts, start=phi)[-1]
        direct = integrate_flow(u, 1.0, opts)
        diff = phi.displacement.values - direct.displacement.values
        worst = max(worst, math.sqrt(hs_inner_values(diff, diff, grid, order)))
    return worst


def check_translation_compose(grid, rng, order):
    a, b = Diffeo.translation(grid, [0.3]), Diffeo.translation(grid, [-0.7])
    ab = compose(a, b).displacement.values
    return float(np.max(np.abs(ab + 0.4)))


def check_theta_translation(grid, rng, order):
    metric = MetricSpec(grid, order)
    knots = np.linspace(0, 1, 5)
    frames = [Diffeo.translation(grid, [0.25 * t]) for t in knots]
    u = theta(DiffeoPath(knots, frames, metric))
    return float(np.max(np.abs(u.values - 0.25)))


def check_cauchy_schwarz(grid, rng, order):
    metric = MetricSpec(grid, order)
    u = TimeVelocity(np.sort(np.concatenate([[0, 1], rng.uniform(0, 1, 5)])),
                     np.stack([random_field(grid, rng) for _ in range(6)]), metric)
    rep = path_energy(u)
    return max(rep.length**2 - rep.energy, 0.0) / rep.energy


def check_gradient(grid, rng, order):
    small = GridSpec.uniform(32)
    metric = MetricSpec(small, order)
    worst = 0.0
    target = Diffeo.translation(small, [0.3])
    problem = BvpProblem(Diffeo.identity(small), target, metric, steps=4)
    for _ in range(3):
        u = 0.1 * np.stack([random_field(small, rng, kmax=4) for _ in range(4)])
        d = rng.standard_normal(u.shape)
        worst = max(worst, gradient_check(problem, u, d))
    return worst


def check_gram_psd(grid, rng, order):
    metric = MetricSpec(grid, order)
    worst = 0.0
    for kern in (Kernel.gaussian(1.0, 1, grid.lengths), Kernel.sobolev(metric)):
        for _ in range(10):
            pts = rng.uniform(0, grid.lengths[0], size=(int(rng.integers(2, 12)), 1))
            ev = np.linalg.eigvalsh(kern.gram(pts))
            worst = max(worst, -ev[0] / ev[-1])
    return max(worst, 0.0)


def check_reproducing(grid, rng, order):
    metric = MetricSpec(grid, order)
    kern = Kernel.sobolev(metric)
    x = rng.uniform(0, grid.lengths[0], size=(1, 1))
    v = rng.standard_normal((1, 1))
    w = random_field(grid, rng, kmax=grid.sizes[0] / 4)
    ku = kernel_velocity(kern, LandmarkState(x, v), grid=grid).values
    lhs = hs_inner_values(ku, w, grid, order)
    rhs = float(v[0, 0] * sample_at(VectorField(grid, w), x, mode="trig")[0, 0])
    return _rel(lhs, rhs) if abs(rhs) > 1e-8 else abs(lhs - rhs)


def check_hamiltonian(grid, rng, order):
    kern = Kernel.gaussian(1.0, 1, grid.lengths)
    q = np.sort(rng.uniform(0, grid.lengths[0], size=(4, 1)), axis=0)
    p = rng.standard_normal((4, 1))
    st = LandmarkState(q, p)
    traj = landmark_shoot(kern, st)
    return _rel(hamiltonian(kern, traj.state()), hamiltonian(kern, st))


def check_single_landmark(grid, rng, order):
    kern = Kernel.gaussian(1.0)
    st = LandmarkState([[1.0]], [[0.7]])
    traj = landmark_shoot(kern, st)
    return float(np.max(np.abs(traj.q[:, 0, 0] - (1.0 + 0.7 * traj.times))))


def check_translation_distance(grid, rng, order):
    metric = MetricSpec(grid, order)
    a = 0.5
    d = distance_estimate(Diffeo.identity(grid), Diffeo.translation(grid, [a]), metric, DistanceConfig())
    return max(d - a * math.sqrt(grid.volume), 0.0)


CHECKS = [
    ("parseval", check_parseval, 1e-10),
    ("transform_roundtrip", check_roundtrip, 1e-12),
    ("kernel_operator_inverse", check_kl_identity, 1e-10),
    ("interpolation_inequality", check_interpolation_inequality, 1e-12),
    ("cutoff_bound_and_decay", check_cutoff, 1e-10),
    ("sine_flow_closed_form", check_sine_flow, 1e-8),
    ("jacobian_min_closed_form", check_jacobian_min, 1e-6),
    ("invert_roundtrip", check_inverse, 1e-5),
    ("decomposition_principle", check_decomposition, 1e-6),
    ("translation_composition", check_translation_compose, 1e-14),
    ("theta_translation_path", check_theta_translation, 1e-12),
    ("length_energy_cauchy_schwarz", check_cauchy_schwarz, 1e-12),
    ("adjoint_gradient", check_gradient, 1e-5),
    ("gram_psd", check_gram_psd, 1e-10),
    ("sobolev_reproducing", check_reproducing, 1e-6),
    ("hamiltonian_conservation", check_hamiltonian, 1e-6),
    ("single_landmark_straight", check_single_landmark, 1e-12),
    ("translation_distance_bound", check_translation_distance, 1e-3),
]


def run_selfcheck(grid=None, order=2.0, seed=0, only=None):
    grid = grid or GridSpec.uniform(64)
    if grid.dim != 1:
        grid = GridSpec((grid.sizes[0],), (grid.lengths[0],))
    results = []
    for name, fn, tol in CHECKS:
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        measured = float(fn(grid, stream(seed, "selfcheck/" + name), order))
        results.append(CheckResult(name, measured, tol, time.perf_counter() - t0))
    return results
