import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sobolev_diffeo.flow import Diffeo, FlowOptions, TimeVelocity, compose, integrate_flow, invert
from sobolev_diffeo.geodesic import reparametrize_constant_speed
from sobolev_diffeo.metric import (
    DiffeoPath,
    path_energy,
    right_translate,
    theta,
    theta_inverse,
    transported_norm_ratio,
)
from sobolev_diffeo.rng import stream
from sobolev_diffeo.spectral import GridSpec, InvalidInputError, MetricSpec, VectorField, random_field

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _velocity(metric, seed, steps=4, amplitude=0.3, knots=None):
    rng = stream(seed, "metric-test")
    vals = np.stack([random_field(metric.grid, rng, kmax=3, amplitude=amplitude) for _ in range(steps)])
    knots = np.linspace(0, 1, steps + 1) if knots is None else knots
    return TimeVelocity(knots, vals, metric)


def test_path_validation(metric1):
    ident = Diffeo.identity(metric1.grid)
    with pytest.raises(InvalidInputError):
        DiffeoPath([0.0, 1.0], [ident], metric1)
    with pytest.raises(InvalidInputError):
        DiffeoPath([0.0, 0.0], [ident, ident], metric1)
    with pytest.raises(InvalidInputError):
        DiffeoPath([0.0, 1.0], [ident, Diffeo.identity(GridSpec.uniform(32))], metric1)


def test_theta_constant_path(metric2):
    ident = Diffeo.identity(metric2.grid)
    u = theta(DiffeoPath(np.linspace(0, 1, 4), [ident] * 4, metric2))
    assert not np.any(u.values)


def test_theta_translation_path(metric2):
    c = np.array([0.7, -0.2])
    knots = np.linspace(0, 1, 6)
    frames = [Diffeo.translation(metric2.grid, t * c) for t in knots]
    u = theta(DiffeoPath(knots, frames, metric2))
    assert np.allclose(u.values, c.reshape(1, 2, 1, 1), atol=1e-13)


def test_theta_inverse_frames(metric1):
    u = _velocity(metric1, 1)
    start = integrate_flow(_velocity(metric1, 2, steps=1, amplitude=0.1))
    opts = FlowOptions(8)
    path = theta_inverse(u, start, opts)
    for t, frame in zip(u.knots, path.frames):
        direct = compose(integrate_flow(u, t, opts), start)
        assert np.max(np.abs(frame.displacement.values - direct.displacement.values)) < 1e-5


def test_theta_roundtrip_first_order(metric1):
    base = _velocity(metric1, 3, steps=1, amplitude=0.4)
    errs = []
    for n in (8, 16, 32):
        u = TimeVelocity.stationary(base.values[0], metric1, n)
        back = theta(theta_inverse(u, Diffeo.identity(metric1.grid), FlowOptions(8)))
        errs.append(np.max(np.abs(back.values - u.values)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3))


def test_path_energy_zero(metric1):
    rep = path_energy(TimeVelocity.zeros(metric1, 5))
    assert rep.energy == 0.0 and rep.length == 0.0


def test_path_energy_constant_field():
    g = GridSpec((16, 8), (3.0, 2.0))
    metric = MetricSpec(g, 2.5)
    c = np.array([0.3, 0.4])
    rep = path_energy(TimeVelocity.stationary(VectorField.constant(g, c), metric, 3))
    assert rep.energy == pytest.approx(0.25 * g.volume, rel=1e-12)
    assert rep.length == pytest.approx(0.5 * math.sqrt(g.volume), rel=1e-12)
    assert np.allclose(rep.speed_profile, rep.length)


def test_energy_report_csv(metric1):
    rep = path_energy(_velocity(metric1, 4))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "t,speed"
    assert len(lines) == 1 + 4 + 1
    t, s = (float(v) for v in lines[2].split(","))
    assert t == 0.25 and s == rep.speed_profile[1]


@given(seed=seeds)
@settings(max_examples=20)
def test_cauchy_schwarz_and_reparametrization(seed):
    metric = MetricSpec(GridSpec.uniform(16), 2.0)
    rng = stream(seed, "knots")
    knots = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, 4)), [1.0]])
    u = _velocity(metric, seed, steps=5, knots=knots)
    rep = path_energy(u)
    assert rep.length**2 <= rep.energy * (1 + 1e-12)
    w = reparametrize_constant_speed(u)
    rw = path_energy(w)
    assert rw.length == pytest.approx(rep.length, rel=1e-10)
    assert rw.energy <= rep.energy * (1 + 1e-12)
    assert rw.energy == pytest.approx(rep.length**2, rel=1e-10)
    assert np.ptp(rw.speed_profile) <= 1e-8 * rw.length


def test_right_translate_identity(metric1):
    path = theta_inverse(_velocity(metric1, 5), Diffeo.identity(metric1.grid))
    moved = right_translate(path, Diffeo.identity(metric1.grid))
    for a, b in zip(path.frames, moved.frames):
        assert np.array_equal(a.displacement.values, b.displacement.values)


def test_right_translate_translations(metric2):
    c = np.array([0.5, 0.1])
    knots = np.linspace(0, 1, 5)
    path = DiffeoPath(knots, [Diffeo.translation(metric2.grid, t * c) for t in knots], metric2)
    moved = right_translate(path, Diffeo.translation(metric2.grid, [-1.0, 2.0]))
    assert np.allclose(theta(moved).values, theta(path).values, rtol=0, atol=1e-13)


def test_right_invariance_of_energy(metric1):
    path = theta_inverse(_velocity(metric1, 6), Diffeo.identity(metric1.grid), FlowOptions(8))
    psi = integrate_flow(_velocity(metric1, 7, steps=1, amplitude=0.1))
    e0 = path_energy(theta(path)).energy
    e1 = path_energy(theta(right_translate(path, psi))).energy
    assert abs(e1 - e0) / e0 <= 1e-4


def test_right_invariance_improves_with_resolution():
    drifts = []
    for n in (32, 64, 128):
        metric = MetricSpec(GridSpec.uniform(n), 2.0)
        path = theta_inverse(_velocity(metric, 6), Diffeo.identity(metric.grid), FlowOptions(8))
        psi = integrate_flow(_velocity(metric, 7, steps=1, amplitude=0.1))
        e0 = path_energy(theta(path)).energy
        drifts.append(abs(path_energy(theta(right_translate(path, psi))).energy - e0) / e0)
    assert drifts[0] > drifts[1] > drifts[2]


def test_uniform_equivalence_constant(metric1):
    """One constant bounds |v o phi^{-1}| / |v| from both sides over the sample."""
    ratios = []
    for k in range(50):
        u = _velocity(metric1, 100 + k)
        u = u.scaled(0.5 / u.l1_norm())
        phi_inv = invert(integrate_flow(u), velocity=u)
        v = VectorField(metric1.grid, random_field(metric1.grid, stream(k, "v"), kmax=5))
        ratios.append(transported_norm_ratio(v, phi_inv, metric1))
    C = max(max(ratios), 1 / min(ratios))
    assert np.isfinite(C) and C < 3.0
