import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sobolev_diffeo.rng import stream
from sobolev_diffeo.spectral import (
    AdmissibilityError,
    GridSpec,
    InvalidInputError,
    MetricSpec,
    ScalarField,
    SpectralCoeffs,
    VectorField,
    apply_operator,
    cutoff_filter,
    hs_inner_values,
    inverse_transform,
    l2_inner,
    random_field,
    sample_at,
    sobolev_inner,
    sobolev_norm,
    spectral_derivative,
    transform,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)
grids = st.sampled_from([GridSpec.uniform(16), GridSpec.uniform(64), GridSpec((8, 12), (2.0, 3.0)),
                         GridSpec.uniform(16, dim=2)])


def _field(grid, seed, decay=1.0, ncomp=None):
    rng = stream(seed, "spectral-test")
    return random_field(grid, rng, kmax=max(grid.sizes) / 2, decay=decay, ncomp=ncomp)


# ---------------------------------------------------------------------------
# grids and metrics
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("sizes", [(3,), (6, 5), (2,), (4, 4, 4)])
def test_grid_rejects_bad_sizes(sizes):
    with pytest.raises(InvalidInputError):
        GridSpec(sizes, (1.0,) * len(sizes))


def test_grid_rejects_nonpositive_length():
    with pytest.raises(InvalidInputError):
        GridSpec((8,), (0.0,))


def test_grid_geometry():
    g = GridSpec((8, 4), (2.0, 1.0))
    assert g.dim == 2
    assert g.spacing == (0.25, 0.25)
    assert g.cell_volume == pytest.approx(1 / 16)
    assert g.volume == pytest.approx(2.0)
    assert g.coords.shape == (2, 8, 4)
    # integer lattice scaled by 2 pi / L
    assert sorted(np.round(g.wavenumbers[0] / np.pi, 12)) == [-4, -3, -2, -1, 0, 1, 2, 3]


@pytest.mark.parametrize("d,s,ok", [(1, 1.5, False), (1, 1.51, True), (2, 2.0, False), (2, 2.5, True)])
def test_admissibility_bound(d, s, ok):
    g = GridSpec.uniform(8, dim=d)
    if ok:
        MetricSpec(g, s)
    else:
        with pytest.raises(AdmissibilityError, match=r"s > d/2 \+ 1"):
            MetricSpec(g, s)


def test_multiplier_invariants(metric1):
    m = metric1.multiplier
    assert m[0] == 1.0
    assert np.all(m > 0)
    order = np.argsort(metric1.grid.xi_norm2.ravel())
    assert np.all(np.diff(m.ravel()[order]) >= 0)


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------


def test_transform_zero(grid1):
    assert not np.any(transform(ScalarField(grid1, np.zeros(64))).coeffs)


def test_transform_constant_is_single_mode():
    g = GridSpec((8, 6), (1.5, 2.5))
    c = transform(ScalarField(g, np.ones(g.shape))).coeffs
    assert abs(c[0, 0]) ** 2 == pytest.approx(g.volume, rel=1e-13)
    c[0, 0] = 0
    assert np.max(np.abs(c)) < 1e-13


def test_transform_sine_two_modes(grid1):
    c = transform(ScalarField(grid1, np.sin(grid1.coords[0]))).coeffs
    nz = np.flatnonzero(np.abs(c) > 1e-12)
    assert sorted(grid1.wavenumbers[0][nz]) == [-1.0, 1.0]


def test_inverse_transform_shape_mismatch(grid1):
    with pytest.raises(InvalidInputError):
        inverse_transform(SpectralCoeffs(grid1, np.zeros(32, dtype=complex)))


def test_field_shape_mismatch(grid1):
    with pytest.raises(InvalidInputError):
        ScalarField(grid1, np.zeros(63))
    with pytest.raises(InvalidInputError):
        ScalarField(grid1, np.full(64, np.nan))


@given(grid=grids, seed=seeds)
def test_roundtrip_and_hermitian(grid, seed):
    f = ScalarField(grid, _field(grid, seed, ncomp=1)[0])
    c = transform(f)
    back = inverse_transform(c).values
    assert np.max(np.abs(back - f.values)) <= 1e-12 * np.max(np.abs(f.values))
    # real input: coefficient at -xi is the conjugate of the one at xi
    flip = np.roll(np.flip(c.coeffs), 1, axis=tuple(range(grid.dim)))
    assert np.allclose(flip, c.coeffs.conj(), atol=1e-12)


@given(grid=grids, seed=seeds)
def test_parseval(grid, seed):
    a = _field(grid, seed, decay=0.0)
    b = _field(grid, seed + 1, decay=0.0)
    quad = grid.cell_volume * np.sum(a * b)
    assert hs_inner_values(a, b, grid, 0.0) == pytest.approx(quad, rel=1e-10, abs=1e-12)
    u, v = VectorField(grid, a), VectorField(grid, b)
    assert l2_inner(u, v) == pytest.approx(quad, rel=1e-12, abs=1e-14)


# ---------------------------------------------------------------------------
# inner products and norms
# ---------------------------------------------------------------------------


def test_sine_h2_norm(grid1):
    u = VectorField(grid1, np.sin(grid1.coords)[:1])
    assert sobolev_inner(u, u, 2.0) == pytest.approx(4 * math.pi, rel=1e-12)


@pytest.mark.parametrize("s", [0.0, 1.0, 2.0, 3.7])
def test_constant_norm_independent_of_order(s):
    g = GridSpec((16,), (3.0,))
    u = VectorField.constant(g, 1.7)
    assert sobolev_inner(u, u, s) == pytest.approx(1.7**2 * 3.0, rel=1e-12)


def test_zero_inner(metric1):
    z = VectorField.zeros(metric1.grid)
    assert sobolev_inner(z, z, metric1) == 0.0


def test_inner_grid_mismatch(grid1):
    other = GridSpec.uniform(32)
    with pytest.raises(InvalidInputError):
        sobolev_inner(VectorField.zeros(grid1), VectorField.zeros(other), 2.0)


@given(grid=grids, seed=seeds, s=st.floats(0.0, 4.0))
def test_inner_symmetric_bilinear(grid, seed, s):
    a, b, c = (_field(grid, seed + k) for k in range(3))
    ab = hs_inner_values(a, b, grid, s)
    assert ab == pytest.approx(hs_inner_values(b, a, grid, s), rel=1e-12, abs=1e-12)
    lhs = hs_inner_values(2.0 * a - c, b, grid, s)
    rhs = 2.0 * ab - hs_inner_values(c, b, grid, s)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@given(seed=seeds, lam=st.floats(0.0, 1.0), sigma_frac=st.floats(0.0, 1.0), s=st.floats(0.0, 4.0),
       decay=st.floats(0.0, 3.0))
def test_interpolation_inequality(seed, lam, sigma_frac, s, decay):
    grid = GridSpec.uniform(32)
    f = _field(grid, seed, decay=decay)
    sigma = sigma_frac * s
    mid = lam * sigma + (1 - lam) * s
    lhs = math.sqrt(hs_inner_values(f, f, grid, mid))
    rhs = math.sqrt(hs_inner_values(f, f, grid, sigma)) ** lam * math.sqrt(hs_inner_values(f, f, grid, s)) ** (1 - lam)
    assert lhs <= rhs * (1 + 1e-12)


@given(seed=seeds, s1=st.floats(-2.0, 4.0), ds=st.floats(0.0, 3.0))
def test_norm_monotone_in_order(seed, s1, ds):
    grid = GridSpec.uniform(32)
    u = VectorField(grid, _field(grid, seed))
    assert sobolev_norm(u, s1) <= sobolev_norm(u, s1 + ds) * (1 + 1e-12)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def test_operator_on_single_mode(metric1):
    g = metric1.grid
    u = VectorField(g, np.cos(3 * g.coords))
    Lu = apply_operator(u, metric1, "L")
    assert np.allclose(Lu.values, (1 + 9) ** 2 * u.values, atol=1e-10)


def test_operator_fixes_constants(metric1):
    u = VectorField.constant(metric1.grid, -0.4)
    assert np.allclose(apply_operator(u, metric1, "L").values, -0.4, atol=1e-14)


def test_operator_bad_direction(metric1):
    with pytest.raises(InvalidInputError):
        apply_operator(VectorField.zeros(metric1.grid), metric1, "M")


@given(seed=seeds)
def test_kernel_inverts_operator(seed):
    metric = MetricSpec(GridSpec.uniform(16, dim=2), 2.5)
    u = VectorField(metric.grid, _field(metric.grid, seed))
    back = apply_operator(apply_operator(u, metric, "L"), metric, "K")
    assert np.max(np.abs(back.values - u.values)) <= 1e-10 * np.max(np.abs(u.values))
    v = VectorField(metric.grid, _field(metric.grid, seed + 1))
    Lu = apply_operator(u, metric, "L")
    assert sobolev_inner(u, v, metric) == pytest.approx(l2_inner(Lu, v), rel=1e-9, abs=1e-9)


def test_cutoff_full_band_and_zero(grid2):
    u = VectorField(grid2, _field(grid2, 3))
    assert np.allclose(cutoff_filter(u, 1e3).values, u.values, atol=1e-14)
    mean = cutoff_filter(u, 0.0).values
    assert np.allclose(mean, u.values.mean(axis=(1, 2), keepdims=True), atol=1e-14)


def test_cutoff_negative_radius(grid1):
    with pytest.raises(InvalidInputError):
        cutoff_filter(VectorField.zeros(grid1), -1.0)


@given(seed=seeds, k=st.floats(0.0, 40.0), s=st.floats(0.0, 4.0))
def test_cutoff_gain_bound(seed, k, s):
    grid = GridSpec.uniform(64)
    u = VectorField(grid, _field(grid, seed, decay=0.5))
    c = cutoff_filter(u, k)
    assert sobolev_inner(c, c, s + 1) <= (1 + k * k) * sobolev_inner(u, u, s) * (1 + 1e-12)


@given(seed=seeds, k=st.floats(0.0, 20.0), s=st.floats(0.0, 3.0))
def test_cutoff_is_orthogonal_projection(seed, k, s):
    grid = GridSpec.uniform(32, dim=2)
    u = VectorField(grid, _field(grid, seed))
    v = VectorField(grid, _field(grid, seed + 1))
    pu, pv = cutoff_filter(u, k), cutoff_filter(v, k)
    assert np.allclose(cutoff_filter(pu, k).values, pu.values, atol=1e-13)
    assert sobolev_inner(pu, v, s) == pytest.approx(sobolev_inner(u, pv, s), rel=1e-9, abs=1e-9)
    assert sobolev_norm(pu, s) <= sobolev_norm(u, s) * (1 + 1e-12)


def test_cutoff_tail_monotone_to_zero(grid1):
    u = VectorField(grid1, _field(grid1, 11))
    errs = [sobolev_norm(cutoff_filter(u, k) - u, 2.0) for k in range(0, 34)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-12


# ---------------------------------------------------------------------------
# derivatives and sampling
# ---------------------------------------------------------------------------


def test_derivative_of_sine(grid1):
    d = spectral_derivative(ScalarField(grid1, np.sin(grid1.coords[0])), 0)
    assert np.max(np.abs(d.values - np.cos(grid1.coords[0]))) < 1e-10


def test_derivative_of_constant_and_bad_axis(grid2):
    c = ScalarField(grid2, np.full(grid2.shape, 2.0))
    assert np.max(np.abs(spectral_derivative(c, 1).values)) < 1e-14
    with pytest.raises(InvalidInputError):
        spectral_derivative(c, 2)


@given(seed=seeds, a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_derivative_linear(seed, a, b):
    grid = GridSpec.uniform(16, dim=2)
    f, g = _field(grid, seed, ncomp=2)
    lhs = spectral_derivative(ScalarField(grid, a * f + b * g), 1).values
    rhs = a * spectral_derivative(ScalarField(grid, f), 1).values + b * spectral_derivative(ScalarField(grid, g), 1).values
    assert np.allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("mode", ["spline", "trig"])
def test_sample_at_nodes_and_constants(grid2, mode):
    vals = _field(grid2, 5, ncomp=1)[0]
    f = ScalarField(grid2, vals)
    pts = grid2.coords.reshape(2, -1).T[::7]
    assert np.allclose(sample_at(f, pts, mode), vals.ravel()[::7], atol=1e-12)
    c = ScalarField(grid2, np.full(grid2.shape, 0.3))
    assert np.allclose(sample_at(c, [[0.123, 5.9], [-2.0, 40.0]], mode), 0.3, atol=1e-13)


def test_sample_sine_off_grid(grid1):
    f = ScalarField(grid1, np.sin(grid1.coords[0]))
    assert sample_at(f, [math.pi / 3]) == pytest.approx(math.sin(math.pi / 3), abs=1e-6)
    assert sample_at(f, [math.pi / 3], mode="trig") == pytest.approx(math.sin(math.pi / 3), abs=1e-14)


def test_sample_wraps_periodically(grid1):
    f = ScalarField(grid1, np.cos(2 * grid1.coords[0]))
    x = 0.77
    assert sample_at(f, [x + 4 * math.pi]) == pytest.approx(sample_at(f, [x]), abs=1e-12)


def test_sample_nan_rejected(grid1):
    with pytest.raises(InvalidInputError):
        sample_at(ScalarField(grid1, np.zeros(64)), [float("nan")])


def test_vector_sample_shape(grid2):
    u = VectorField(grid2, _field(grid2, 1))
    out = sample_at(u, np.zeros((5, 2)))
    assert out.shape == (5, 2)
    assert np.allclose(out[0], u.values[:, 0, 0])
