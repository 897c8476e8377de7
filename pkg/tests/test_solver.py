import numpy as np
import pytest

from stokesdrift.decay import convergence_order
from stokesdrift.fields import Grid, VectorField, lp_norm, outer
from stokesdrift.scenario import AdmissibilityError, DriftSpec, ForcingSpec, ScenarioConfig
from stokesdrift.solver import (
    LEDGER_COLUMNS,
    SolverError,
    SolverState,
    evolve,
    recover_pressure,
    step,
    vector_potential_evolve,
)


def small(**kw):
    base = dict(
        n=16, L=8 * np.pi, dt=0.02, horizon=2.0, dt_max=0.1, growth=0.05,
        drift=DriftSpec(c_d=0.2, t0=1.0), forcing=ForcingSpec(radius=5.0, window=(0.2, 1.0)),
    )
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def run():
    return evolve(small(), snapshots="all")


def test_ledger_shape(run):
    assert set(LEDGER_COLUMNS) <= set(run.ledger)
    assert run.times[0] == 0 and run.times[-1] == 2.0
    assert run.column("L2").shape == run.times.shape
    assert len(run.snapshots) == len(run.times)


def test_zero_forcing_gives_zero_solution():
    tr = evolve(small(forcing=ForcingSpec(amplitude=0.0)))
    for k in ("L1", "L2", "H1", "pairing"):
        assert np.all(tr.column(k) == 0)
    assert np.all(tr.column("A_L2") == 0) and np.all(tr.column("B_L2") == 0)


def test_mean_and_divergence(run):
    assert run.column("mean_abs").max() <= 1e-12 * max(run.column("L2").max(), 1)
    assert run.column("div_residual").max() <= 1e-8


def test_energy_monotone_after_forcing(run):
    t_off = run.config.forcing.window[1]
    L2 = run.column("L2")[run.times >= t_off]
    assert np.all(np.diff(L2) <= 1e-12 * L2[0])


def test_skew_forcing_without_drift_has_zero_pressure():
    tr = evolve(small(drift=DriftSpec(family="zero", c_d=0.0)))
    assert tr.column("q_L2").max() <= 1e-12


def test_pressure_symbol_bound(run):
    g = run.grid
    drift, forcing = run.config.build(g)
    t = 0.6
    v = run.snapshot(t)
    u, F = drift(t), forcing(t)
    q = recover_pressure(v, u, F)
    Fsym = F.symmetric_part()
    assert lp_norm(q, 2) <= lp_norm(outer(v, u), 2) + lp_norm(Fsym, 2) + 1e-12


def test_linear_in_forcing():
    a = evolve(small(horizon=1.0), track_potential=False)
    b = evolve(small(horizon=1.0, forcing=ForcingSpec(amplitude=3.0, radius=5.0, window=(0.2, 1.0))),
               track_potential=False)
    np.testing.assert_allclose(b.final.physical, 3 * a.final.physical, rtol=1e-10, atol=1e-14)


def test_second_order_in_time():
    T = 1.2
    finals = []
    for dt in (0.04, 0.02, 0.01):
        cfg = small(dt=dt, dt_max=dt, growth=0.0, horizon=T)
        finals.append(evolve(cfg, track_potential=False).final)
    e1 = lp_norm(finals[0] - finals[1], 2)
    e2 = lp_norm(finals[1] - finals[2], 2)
    assert convergence_order(e1, e2) >= 1.8


def test_step_matches_evolve():
    cfg = small(dt=0.05, dt_max=0.05, growth=0.0, horizon=0.5)
    drift, forcing = cfg.build()
    state = SolverState(t=0.0, v=VectorField.zeros(cfg.grid))
    for _ in range(10):
        state = step(state, 0.05, drift, forcing)
    tr = evolve(cfg, track_potential=False)
    np.testing.assert_allclose(state.v.physical, tr.final.physical, atol=1e-13)
    assert len(state.ledger["t"]) == 10


def test_bad_times_and_inadmissible_drift():
    with pytest.raises(SolverError):
        evolve(small(), times=np.array([0.0, 0.5, 0.5]))
    with pytest.raises(AdmissibilityError):
        evolve(small(drift=DriftSpec(family="constant", c_d=0.1)))


def test_potential_tracks_velocity(run):
    assert run.column("vcheck_err")[1:].max() <= 1e-3
    np.testing.assert_allclose(run.column("gradB_L2"), run.column("L2"), rtol=1e-3)


def test_replay_potential(run):
    drift, forcing = run.config.build(run.grid)
    states, table = vector_potential_evolve(run, drift, forcing)
    assert len(states) == len(run.times)
    assert table["vcheck_err"][1:].max() <= 1e-3
    # |grad B| = |rot B| for divergence-free B
    rot = np.array([lp_norm(s.v_check, 2) for s in states])
    np.testing.assert_allclose(table["gradB_L2"], rot, rtol=1e-8, atol=1e-14)


def test_replay_needs_snapshots():
    tr = evolve(small(horizon=0.4))
    with pytest.raises(ValueError):
        vector_potential_evolve(tr)


def test_deterministic():
    a = evolve(small(horizon=0.5))
    b = evolve(small(horizon=0.5))
    for k in LEDGER_COLUMNS:
        assert np.array_equal(a.column(k), b.column(k))
