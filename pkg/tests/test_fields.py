import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stokesdrift.fields import (
    Grid,
    ScalarField,
    TensorField,
    VectorField,
    curl,
    curl_inverse,
    curl_inverse_operator_norm,
    divergence_residual,
    grad,
    heat_semigroup,
    leray,
    lp_norm,
    pressure_op,
    pressure_operator_norm,
    random_skew,
    spectral_l2_norm,
)

G = Grid(16, 2 * np.pi)
seeds = st.integers(0, 2**31 - 1)


def random_vector(grid, seed):
    rng = np.random.default_rng(seed)
    return VectorField(grid, rng.standard_normal((3,) + grid.shape))


def single_mode(grid, k=(1, 2, 0), amp=(0.0, 0.0, 1.0)):
    x, y, z = grid.points
    kx = 2 * np.pi / grid.L
    phase = kx * (k[0] * x + k[1] * y + k[2] * z)
    return np.array(amp)[:, None, None, None] * np.cos(phase)


def test_grid_rejects_bad_sizes():
    with pytest.raises(ValueError):
        Grid(15, 1.0)
    with pytest.raises(ValueError):
        Grid(16, -1.0)


def test_physical_spectral_roundtrip():
    v = random_vector(G, 1)
    back = VectorField(G, v.spectral, spectral=True).physical
    np.testing.assert_allclose(back, v.physical, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_leray_is_idempotent_and_divergence_free(seed):
    v = random_vector(G, seed)
    p = leray(v)
    assert divergence_residual(p) <= 1e-12
    np.testing.assert_allclose(leray(p).physical, p.physical, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_curl_output_is_divergence_free(seed):
    assert divergence_residual(curl(random_vector(G, seed))) <= 1e-12


def test_gradient_field_has_positive_divergence_residual():
    x, y, z = G.points
    phi = ScalarField(G, np.sin(x) * np.cos(2 * y))
    assert divergence_residual(grad(phi)) > 0.1


def test_curl_inverse_zero_and_single_mode():
    zero = curl_inverse(VectorField.zeros(G))
    assert np.all(zero.physical == 0)
    # W = (0, 0, cos(x + 2y)) is divergence-free and mean-zero
    W = VectorField(G, single_mode(G))
    A = curl_inverse(curl(W))
    np.testing.assert_allclose(A.physical, W.physical, atol=1e-12)


def test_curl_inverse_rejects_gradient_source():
    x, y, z = G.points
    with pytest.raises(ValueError):
        curl_inverse(grad(ScalarField(G, np.sin(x))))


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_curl_inverse_recovers_divergence_free_mean_zero_fields(seed):
    W = leray(random_vector(G, seed))
    Ws = W.spectral * G.nyquist_free
    Ws[:, 0, 0, 0] = 0
    W = VectorField(G, Ws, spectral=True)
    np.testing.assert_allclose(curl_inverse(curl(W)).physical, W.physical, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_skew_forcing_has_zero_pressure(seed):
    F = random_skew(G, np.random.default_rng(seed))
    assert np.abs(pressure_op(F).physical).max() <= 1e-12


def test_pressure_of_trace_part():
    # the symbol -xi_i xi_j / |xi|^2 acts as -1 on q I
    x, y, z = G.points
    q = ScalarField(G, 1.5 + np.sin(x) * np.cos(y) + 0.3 * np.cos(3 * z))
    out = pressure_op(TensorField.identity_times(q))
    np.testing.assert_allclose(out.physical, -(q.physical - 1.5), atol=1e-12)


def test_operator_norms():
    K = curl_inverse_operator_norm(G)
    assert K.converged
    assert K.norm == pytest.approx(1.0, abs=1e-6)
    Ks = curl_inverse_operator_norm(G, domain="skew")
    assert Ks.norm == pytest.approx(1 / np.sqrt(2), abs=1e-6)
    M = pressure_operator_norm(G)
    assert M.norm <= 1 + 1e-6
    assert M.norm == pytest.approx(1.0, abs=1e-6)


def test_heat_semigroup():
    W = VectorField(G, single_mode(G))
    assert heat_semigroup(W, 0.0) is W
    k2 = 1 + 4
    out = heat_semigroup(W, 1.0)
    np.testing.assert_allclose(out.physical, np.exp(-k2) * W.physical, atol=1e-14)
    with pytest.raises(ValueError):
        heat_semigroup(W, -1.0)


@settings(max_examples=20, deadline=None)
@given(seeds, st.floats(0, 0.5), st.floats(0, 0.5))
def test_heat_semigroup_law(seed, t1, t2):
    v = random_vector(G, seed)
    a = heat_semigroup(heat_semigroup(v, t1), t2).physical
    b = heat_semigroup(v, t1 + t2).physical
    assert np.abs(a - b).max() <= 1e-12 * max(np.abs(b).max(), 1e-300)


def test_lp_norms():
    assert lp_norm(VectorField.zeros(G), 1.5) == 0
    # indicator of an 8^3-cell cube: ||f||_p = V^(1/p)
    g = Grid(32, 8.0)
    vals = np.zeros(g.shape)
    vals[4:12, 4:12, 4:12] = 1.0
    f = ScalarField(g, vals)
    vol = (8 * g.dx) ** 3
    for p in (1, 1.5, 2, 3):
        assert lp_norm(f, p) == pytest.approx(vol ** (1 / p), rel=1e-12)
    assert lp_norm(f, np.inf) == 1.0
    with pytest.raises(ValueError):
        lp_norm(f, 0.5)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_parseval(seed):
    v = random_vector(G, seed)
    assert spectral_l2_norm(v) == pytest.approx(lp_norm(v, 2), rel=1e-10)


def test_fields_are_immutable_and_typed():
    v = random_vector(G, 0)
    with pytest.raises(ValueError):
        v.physical[0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        VectorField(G, np.zeros(G.shape))
    with pytest.raises(TypeError):
        v + ScalarField.zeros(G)


def test_axial_roundtrip():
    f = random_vector(G, 3)
    T = TensorField.from_axial(f)
    assert T.is_skew()
    np.testing.assert_allclose(T.axial().physical, f.physical, atol=1e-14)
