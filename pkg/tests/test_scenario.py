import numpy as np
import pytest
import yaml

from stokesdrift.fields import Grid, divergence_residual, pressure_op
from stokesdrift.scenario import (
    AdmissibilityError,
    ConfigError,
    Drift,
    DriftSpec,
    Forcing,
    ForcingSpec,
    ScenarioConfig,
    config_from_mapping,
    dump_config,
    load_config,
    validate_drift,
)

G = Grid(32, 16 * np.pi)


def test_swirl_hand_value():
    # c' = 1, t0 = 1 at x = e1, t = 0: u = (0, 1/2, 0)
    spec = DriftSpec(c_d=1.0, t0=1.0)
    d = Drift(spec, Grid(16, 100.0))
    d.c_prime = 1.0
    u = d.exact(np.array([1.0, 0.0, 0.0]).reshape(3, 1), 0.0, taper=False)[:, 0]
    np.testing.assert_allclose(u, [0.0, 0.5, 0.0], atol=1e-15)
    assert np.linalg.norm(u) * (1 + np.sqrt(1.0)) == pytest.approx(1.0)


@pytest.mark.parametrize("family", ["swirl", "scaled_swirl"])
def test_swirl_is_divergence_free(family):
    d = Drift(DriftSpec(family=family, c_d=0.2, scale=2.0), G)
    for t in (0.0, 1.0, 10.0):
        assert divergence_residual(d(t)) <= 1e-10


def test_zero_family():
    d = Drift(DriftSpec(family="zero", c_d=0.0), G)
    assert np.all(d(1.0).physical == 0)
    res = validate_drift(d, 10.0)
    assert res.passed and res.max_product == 0


def test_default_swirl_passes_with_margin():
    res = validate_drift(Drift(DriftSpec(c_d=0.1), G), 20.0)
    assert res.passed
    assert res.margin >= 0.05
    assert res.divergence_residual <= 1e-10


def test_constant_drift_is_rejected():
    res = validate_drift(Drift(DriftSpec(family="constant", c_d=0.1), G), 20.0)
    assert not res.passed
    assert res.max_product > 0.1


def test_fast_swirl_exceeds_speed_budget():
    with pytest.raises(AdmissibilityError):
        Drift(DriftSpec(c_d=0.3, t0=1e-4), G)


@pytest.mark.parametrize(
    "kw",
    [dict(family="nope"), dict(c_d=0.0), dict(t0=-1.0), dict(scale=0.0)],
)
def test_drift_spec_validation(kw):
    with pytest.raises(AdmissibilityError):
        DriftSpec(**kw)


@pytest.mark.parametrize(
    "kw", [dict(window=(0.0, 1.0)), dict(window=(2.0, 1.0)), dict(radius=0.0), dict(pattern="ab")]
)
def test_forcing_spec_validation(kw):
    with pytest.raises(AdmissibilityError):
        ForcingSpec(**kw)


def test_forcing_box_margin():
    with pytest.raises(AdmissibilityError):
        Forcing(ForcingSpec(radius=G.L / 4), G)


def test_forcing_properties():
    f = Forcing(ForcingSpec(radius=4.0, window=(0.5, 2.5)), G)
    F = f(1.5)
    assert F.is_skew()
    assert np.abs(pressure_op(F).physical).max() <= 1e-12
    for t in (0.0, 0.5, 2.5, 3.0):
        assert np.all(f(t).physical == 0)
        assert f.l1(t) == 0 and f.l2(t) == 0 and f.G_l2(t) == 0
    assert f.l2(1.5) == pytest.approx(F.norm(2), rel=1e-12)
    assert f.l1(1.5) == pytest.approx(F.norm(1), rel=1e-12)
    assert np.isfinite(f.G_l2(1.5)) and f.G_l2(1.5) > 0
    assert f.G_l2(1.5) == pytest.approx(f.G(1.5).norm(2), rel=1e-12)


def test_time_grid():
    cfg = ScenarioConfig(dt=0.1, horizon=10.0, growth=0.1, dt_max=0.5, forcing=ForcingSpec(window=(0.5, 2.5)))
    ts = cfg.time_grid()
    assert ts[0] == 0 and ts[-1] == 10.0
    assert np.all(np.diff(ts) > 0)
    assert np.any(np.isclose(ts, 2.5))
    forced = np.diff(ts)[ts[:-1] < 2.5 - 1e-9]
    np.testing.assert_allclose(forced, 0.1)
    assert np.diff(ts).max() <= 0.5 + 1e-12


def test_config_roundtrip(tmp_path):
    cfg = ScenarioConfig(n=16, horizon=3.0, drift=DriftSpec(c_d=0.2), forcing=ForcingSpec(pattern="yz"))
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()


@pytest.mark.parametrize(
    "data",
    [
        {"grid.bogus": 1},
        {"grid.n": 15},
        {"grid.n": 16.5},
        {"time.dt": "fast"},
        {"time.dt": -1.0},
        {"forcing.window": [1.0]},
        {"grid": {"n": 16}},
        [1, 2],
    ],
)
def test_config_errors(data):
    with pytest.raises(ConfigError):
        config_from_mapping(data)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shipped_configs_load():
    import pathlib

    root = pathlib.Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.yaml")):
        cfg = load_config(path)
        drift, forcing = cfg.build()
        if not drift.is_zero:
            assert validate_drift(drift, cfg.horizon).passed, path.name
        assert yaml.safe_load(path.read_text())
