import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from stokesdrift import decay
from stokesdrift.decay import (
    CheckResult,
    ap_exponent,
    beta_identity_check,
    constant_C1,
    constant_Cp,
    contraction_check,
    contraction_constant,
    envelope_Ap,
    exp_weight,
    fit_power_exponent,
    fourier_split_check,
    generalized_pairing_identity,
    gronwall_envelope,
    log_integral,
    log_integral_bound_check,
    log_weight,
    multiplicative_ratio,
    pairing_bounds_check,
    scale_invariants,
    singular_integral,
    theorem3_exponent,
    theorem3_threshold,
)
from stokesdrift.fields import Grid, VectorField, heat_semigroup, lp_norm
from stokesdrift.kernels import kernel_constants
from stokesdrift.scenario import DriftSpec, ForcingSpec, ScenarioConfig
from stokesdrift.solver import evolve


def closed_form_C(q):
    # int_R3 (1+|z|)^-q dz = 4 pi B(3, q - 3)
    return (4 * np.pi * special.beta(3, q - 3)) ** (1 / q)


def small(**kw):
    base = dict(
        n=16, L=8 * np.pi, dt=0.02, horizon=6.0, dt_max=0.2, growth=0.05,
        drift=DriftSpec(c_d=0.05, t0=1.0), forcing=ForcingSpec(radius=5.0, window=(0.2, 1.0)),
    )
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def run():
    return evolve(small())


@pytest.fixture(scope="module")
def zero_run():
    return evolve(small(horizon=2.0, drift=DriftSpec(family="zero", c_d=0.0), forcing=ForcingSpec(amplitude=0.0)))


# --- constants ------------------------------------------------------------


def test_Cp_at_three_halves():
    # exponent 6: 4 pi (1/3 - 2/4 + 1/5) = 4 pi / 30
    assert constant_Cp(1.5) == pytest.approx((4 * np.pi / 30) ** (1 / 6), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1.21, 1.99))
def test_Cp_matches_beta_closed_form(p):
    assert constant_Cp(p) == pytest.approx(closed_form_C(2 * p / (2 - p)), rel=1e-9)


def test_Cp_blows_up_near_six_fifths():
    assert constant_Cp(1.21) > constant_Cp(1.25) > constant_Cp(1.3)
    ratio = constant_Cp(1.201) / constant_Cp(1.25)
    assert ratio == pytest.approx(closed_form_C(2 * 1.201 / 0.799) / closed_form_C(2 * 1.25 / 0.75), rel=1e-9)
    assert constant_Cp(1.2001) / constant_Cp(1.25) > 10


def test_Cp_cutoff_doubling():
    a = constant_Cp(1.5, cutoff=2000.0)
    b = constant_Cp(1.5, cutoff=4000.0)
    assert abs(a - b) < 1e-8
    assert b == pytest.approx(constant_Cp(1.5), abs=1e-8)


def test_C1():
    q = 6.5 / 1.5
    assert constant_C1(0.1) == pytest.approx(closed_form_C(q), rel=1e-9)
    # the exponent grows as eps decreases, so C1 decreases with eps
    assert constant_C1(0.01) < constant_C1(0.1) < constant_C1(0.2)
    assert constant_C1(0.01) == pytest.approx(closed_form_C(6.05 / 1.05), rel=1e-9)
    assert np.isfinite(constant_C1(0.29))


@pytest.mark.parametrize("p", [1.2, 2.0, 1.0])
def test_Cp_domain(p):
    with pytest.raises(ValueError):
        constant_Cp(p)


@pytest.mark.parametrize("eps", [0.0, 0.3])
def test_C1_domain(eps):
    with pytest.raises(ValueError):
        constant_C1(eps)


# --- singular integrals -----------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(0.1, 50.0), st.integers(2, 60))
def test_singular_integral_beta_identity(a, t, n):
    times = np.linspace(0.0, t, n)
    exact = t ** (0.5 - a) * special.beta(0.5, 1 - a)
    assert singular_integral(times, np.ones(n), t, a) == pytest.approx(exact, rel=1e-10)


def test_singular_integral_linear_phi():
    # phi(s) = s: int (t-s)^-1/2 s^(1-a) = t^(3/2-a) B(1/2, 2-a)
    times = np.linspace(0, 2.0, 9)
    a = 0.3
    val = singular_integral(times, times, 1.3, a)
    assert val == pytest.approx(1.3 ** (1.5 - a) * special.beta(0.5, 2 - a), rel=1e-8)


def test_singular_integral_coverage():
    with pytest.raises(ValueError):
        singular_integral([0.1, 1.0], [1, 1], 1.0, 0.1)
    with pytest.raises(ValueError):
        singular_integral([0.0, 1.0], [1, 1], 2.0, 0.1)
    assert singular_integral([0.0, 1.0], [1, 1], 0.0, 0.1) == 0.0


def test_beta_identity_check():
    res = beta_identity_check()
    assert res.passed and res.measured <= 1e-6


def test_ap_zero_integrand():
    ledger = {"t": np.linspace(0, 2, 11), "L2": np.zeros(11), "G_L2": np.zeros(11)}
    np.testing.assert_array_equal(envelope_Ap(1.5, ledger["t"], ledger, c_d=0.0), 0.0)


def test_ap_constant_integrand():
    t = np.linspace(0, 4, 41)
    ledger = {"t": t, "L2": np.zeros_like(t), "G_L2": np.ones_like(t)}
    a = ap_exponent(1.5)
    exact = constant_Cp(1.5) * 4 ** (0.5 - a) * special.beta(0.5, 1 - a)
    assert envelope_Ap(1.5, 4.0, ledger, c_d=0.0) == pytest.approx(exact, rel=1e-10)


def test_ap_dominates_on_small_run(run):
    res = decay.ap_domination_check(run)
    assert res.passed
    assert res.details["fraction_dominated"] == 1.0


# --- envelopes ------------------------------------------------------------


def test_theorem1_zero_series(zero_run):
    for p in (1, 2):
        res = decay.theorem1_check(zero_run, p)
        assert res.passed and res.measured == 0


def test_calibrated_envelope_scaling(run):
    env = decay.theorem1_envelope(2, 0, run)
    np.testing.assert_allclose(env.scaled(2.0).values, 2 * env.values)
    assert env.dominates() == (env.worst_ratio() <= 1 + 1e-12)


def test_energy_inequality_on_runs(run, zero_run):
    assert decay.energy_inequality_check(run).passed
    res = decay.energy_inequality_check(zero_run)
    assert res.passed and res.measured == 0


def test_energy_defect_shrinks_with_dt():
    eps = []
    for dt in (0.04, 0.02):
        cfg = small(dt=dt, dt_max=dt, growth=0.0, horizon=1.2)
        eps.append(np.max(np.abs(decay.energy_defect(evolve(cfg, track_potential=False)))))
    assert decay.convergence_order(*eps) >= 1.8


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.01, 50.0), st.sampled_from([3.0, 5.0, 7.5]))
def test_exp_weight_identity(s, dt, k):
    t = s + dt
    assert exp_weight(s, t, k) == pytest.approx(log_weight(s, k) / log_weight(t, k), abs=1e-10)


def test_fourier_split(run):
    res, diag = fourier_split_check(run, 0, 3)
    assert res.passed
    assert diag.partition_error <= 1e-10 and diag.weight_error <= 1e-10
    with pytest.raises(ValueError):
        fourier_split_check(run, 1, 4)


def test_gronwall(run, zero_run):
    assert decay.gronwall_check(run).passed
    env = gronwall_envelope(zero_run)
    assert np.all(env.values == 0) and env.dominates()
    np.testing.assert_allclose(env.scaled(2.0).values, 0.0)
    env = gronwall_envelope(run)
    np.testing.assert_allclose(env.scaled(2.0).values, 2 * env.values)


# --- logarithmic chain ---------------------------------------------------------


def chain_direct(t, k, m):
    f = lambda s: s * s * np.log(s + np.e) ** (k - 3 - 2 * m) * k**3 / (s + np.e) ** 3
    val, _ = integrate.quad(f, 0, t, limit=400, epsabs=0, epsrel=1e-12)
    return val / np.log(t + np.e) ** k


def chain_closed_k3_m0(t):
    T = np.log(t + np.e)
    e = np.e
    inner = (T - 1) + 2 * e * (np.exp(-T) - np.exp(-1)) - 0.5 * e * e * (np.exp(-2 * T) - np.exp(-2))
    return 27 * inner / T**3


@pytest.mark.parametrize("t", [0.5, 3.0, 40.0, 1e3, 1e6])
def test_log_integral_oracles(t):
    assert log_integral(t, 3, 0) == pytest.approx(chain_closed_k3_m0(t), rel=1e-10)
    if t <= 1e3:
        assert log_integral(t, 5, 1) == pytest.approx(chain_direct(t, 5, 1), rel=1e-8)


@pytest.mark.parametrize("k,m", [(3, 0), (5, 1)])
def test_log_integral_bound(k, m):
    res = log_integral_bound_check(k, m)
    assert res.passed
    assert res.details["C"] / res.details["prefactor"] == pytest.approx(0.8189, abs=1e-3)


def test_log_integral_needs_gap():
    with pytest.raises(ValueError):
        log_integral_bound_check(4, 1)


# --- contraction and pairing ------------------------------------------------------


def test_contraction_bounds(run):
    c_star = kernel_constants().c_star
    drift, forcing = run.config.build()
    A = contraction_constant(c_star, run.times, forcing)
    res0 = contraction_check(run, c_star, c_d=0.0, F_gen=forcing)
    assert res0.bound == pytest.approx(A)
    assert res0.passed
    half = contraction_check(run, c_star, c_d=0.125 / c_star, F_gen=forcing)
    assert half.bound == pytest.approx(2 * A)
    skip = contraction_check(run, c_star, c_d=0.25 / c_star, F_gen=forcing)
    assert skip.skipped and skip.passed and "hypothesis" in skip.reason


def test_contraction_sampled_route_agrees(run):
    # adaptive quadrature of the generator vs the sampled ledger column
    c_star = 1.0
    _, forcing = run.config.build()
    a = contraction_constant(c_star, run.times, forcing)
    b = contraction_constant(c_star, run.times, F_l1=run.column("F_L1"))
    assert b == pytest.approx(a, rel=2e-2)


def test_fit_power_exponent():
    t = np.geomspace(1, 100, 50)
    assert fit_power_exponent(t, t**-0.5).exponent == pytest.approx(-0.5, abs=1e-6)
    assert fit_power_exponent(t, np.full_like(t, 3.0)).exponent == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        fit_power_exponent(t, -t)
    with pytest.raises(ValueError):
        fit_power_exponent(t[:2], t[:2])


def test_fit_flags_heat_decay_as_exponential():
    g = Grid(16, 2 * np.pi)
    x, y, z = g.points
    v0 = VectorField(g, np.stack([np.zeros_like(x), np.zeros_like(x), np.cos(x)]))
    t = np.linspace(1, 10, 40)
    norms = [lp_norm(heat_semigroup(v0, s), 2) for s in t]
    fit = fit_power_exponent(t, norms, window=(1, 10))
    assert fit.exponential and not fit.accepted


def test_pairing_zero(zero_run):
    assert np.all(zero_run.column("pairing") == 0)
    assert decay.pairing_decay_check(zero_run).skipped
    assert pairing_bounds_check(zero_run).passed


def test_pairing_bounds(run):
    drift, _ = run.config.build()
    u_box = max(lp_norm(drift(t), 2) for t in run.times)
    res = pairing_bounds_check(run, u_norm_box=u_box)
    assert res.passed
    assert res.details["cauchy_schwarz_ratio"] <= 1


def test_pairing_identity_zero_drift():
    tr = evolve(small(horizon=1.0, drift=DriftSpec(family="zero", c_d=0.0)), pairing_identity=True)
    assert np.all(tr.column("udivF") == 0) and np.all(tr.column("pairing") == 0)
    res = generalized_pairing_identity(tr)
    assert res.passed and res.measured == 0


def test_pairing_identity_needs_integrands(run):
    assert generalized_pairing_identity(run).skipped


# --- vector potential -------------------------------------------------------------------------


def test_theorem3_hand_arithmetic():
    c = theorem3_threshold(1.0, 1.0)
    assert c**2 == pytest.approx(3 / (4 * (1 + np.sqrt(3)) ** 2), rel=1e-14)
    assert theorem3_exponent(1.0, 1.0, c) == pytest.approx(3 / 8, rel=1e-14)
    assert theorem3_exponent(1.0, 1.0, 0.0) == 0


def test_theorem3_skips_above_threshold(run):
    res = decay.theorem3_check(run, 1.0, 1.0, c_d=0.5)
    assert res.skipped


def test_theorem3_zero_run(zero_run):
    res = decay.theorem3_check(zero_run, 1.0, 1.0)
    assert res.passed and res.details["l"] == 0
    assert np.all(zero_run.column("B_L2") == 0)


def test_potential_energy_identity(run):
    assert decay.potential_energy_defect(run) < 1e-2


# --- scale invariants and the multiplicative inequality ---------------------------------


def test_invariants_zero_drift():
    table = scale_invariants(DriftSpec(family="zero", c_d=0.0), [1.0, 2.0], n=16)
    for k in decay.INVARIANTS:
        assert np.all(table[k] == 0)


def test_constant_drift_quadratic_growth():
    assert decay.constant_drift_growth(0.1, 64.0, n=16) == pytest.approx(2.0, abs=1e-9)


def test_invariants_reject_large_radius():
    with pytest.raises(ValueError):
        scale_invariants(DriftSpec(), [20.0], L=64.0, n=16)


def test_multiplicative(run, zero_run):
    assert multiplicative_ratio(zero_run) == 0
    rs = []
    for amp in (0.5, 1.0, 2.0):
        tr = evolve(small(forcing=ForcingSpec(amplitude=amp, radius=5.0, window=(0.2, 1.0))),
                    track_potential=False)
        rs.append(tr)
    res = decay.multiplicative_inequality_check(rs)
    assert res.passed and res.measured < 1e-10
    T = run.times[-1]
    assert multiplicative_ratio(run, T) <= multiplicative_ratio(run, T / 2)


def test_check_result_json():
    res = decay._result("x", "ref", 0.5, 1.0, arr=np.arange(3), flag=np.bool_(True))
    d = res.to_dict()
    assert d["pass"] and d["margin"] == 0.5 and d["details"]["arr"] == [0, 1, 2]
    assert isinstance(res, CheckResult)
    fail = decay._result("y", "ref", 2.0, 1.0)
    assert not fail.passed and fail.margin < 0
