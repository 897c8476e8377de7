"""Admissible inputs: decaying divergence-free drifts, skew compactly supported
forcings, and the flat YAML scenario configuration."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .fields import (
    Grid,
    TensorField,
    VectorField,
    divergence_residual,
    leray,
    lp_norm,
    s_leray,
)

# sup over (x, t) of r (r + sqrt t) / (r^2 + t)
SWIRL_RATIO = (1 + np.sqrt(2)) / 2
DRIFT_FAMILIES = ("swirl", "scaled_swirl", "zero", "constant")
PATTERNS = {
    "xy": (0, 1),
    "yz": (1, 2),
    "zx": (2, 0),
}


class AdmissibilityError(ValueError):
    """Scenario inputs violate a drift or forcing requirement."""


class ConfigError(ValueError):
    """Malformed configuration."""


def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(np.asarray(s, float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1 - s, 1)), 0.0)
    return a / (a + b)


def bump(r):
    """``exp(1 - 1/(1 - r^2))`` on ``|r| < 1``, zero outside; peak value 1."""
    r = np.asarray(r, float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1
    out[inside] = np.exp(1 - 1 / (1 - r[inside] ** 2))
    return out


# --- drift -------------------------------------------------------------------


@dataclass(frozen=True)
class DriftSpec:
    family: str = "swirl"
    c_d: float = 0.05
    t0: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    margin: float = 0.05

    def __post_init__(self):
        if self.family not in DRIFT_FAMILIES:
            raise AdmissibilityError(f"unknown drift family {self.family!r}")
        if self.family != "zero" and not self.c_d > 0:
            raise AdmissibilityError("c_d must be positive")
        if not self.t0 > 0:
            raise AdmissibilityError("t0 must be positive")
        if not self.scale > 0:
            raise AdmissibilityError("scale must be positive")


class Drift:
    """Time-parametrized drift sampled on a grid.

    swirl: ``u = c' (-y, x, 0) chi(|x|) / (|x|^2 + t + t0)`` about ``center``,
    with ``chi`` a smooth radial taper (1 up to 0.3 L, 0 beyond 0.45 L) so the
    field is periodic-smooth.  ``c' = (1 - margin) c_d / SWIRL_RATIO`` gives the
    decay bound with the requested margin.  scaled_swirl is the parabolic
    rescaling ``lambda u(lambda x, lambda^2 t)`` (the same family with
    ``t0 / lambda^2``).  constant is ``c_d e_1``, an inadmissible control.

    Sampled fields are Leray projected; the size of that correction relative
    to the sample is kept in :meth:`projection_defect`.
    """

    def __init__(self, spec: DriftSpec, grid: Grid):
        self.spec = spec
        self.grid = grid
        self.t0 = spec.t0 / spec.scale**2 if spec.family == "scaled_swirl" else spec.t0
        self.c_prime = (1 - spec.margin) * spec.c_d / SWIRL_RATIO
        self.center = np.asarray(spec.center, float)
        if self.is_swirl and self.sup_speed() > 1:
            raise AdmissibilityError(
                f"drift exceeds the smoothness budget: sup|u| = {self.sup_speed():.3g} > 1"
            )

    @property
    def is_swirl(self) -> bool:
        return self.spec.family in ("swirl", "scaled_swirl")

    @property
    def is_zero(self) -> bool:
        return self.spec.family == "zero"

    def sup_speed(self) -> float:
        if self.is_zero:
            return 0.0
        if self.spec.family == "constant":
            return self.spec.c_d
        return self.c_prime / (2 * np.sqrt(self.t0))

    def _taper(self, r):
        L = self.grid.L
        return 1 - smooth_step((r - 0.3 * L) / (0.15 * L))

    def _profile(self, r2, t):
        return self.c_prime / (r2 + t + self.t0)

    def exact(self, x: np.ndarray, t: float, taper: bool = True) -> np.ndarray:
        """Closed form at points ``x`` of shape (3, ...)."""
        x = np.asarray(x, float)
        out = np.zeros_like(x)
        if self.is_zero:
            return out
        if self.spec.family == "constant":
            out[0] = self.spec.c_d
            return out
        d = x - self.center.reshape((3,) + (1,) * (x.ndim - 1))
        r2 = np.sum(d * d, axis=0)
        phi = self._profile(r2, t)
        if taper:
            phi = phi * self._taper(np.sqrt(r2))
        out[0] = -d[1] * phi
        out[1] = d[0] * phi
        return out

    def exact_dt(self, x: np.ndarray, t: float, taper: bool = True) -> np.ndarray:
        """Closed-form time derivative."""
        x = np.asarray(x, float)
        out = np.zeros_like(x)
        if not self.is_swirl:
            return out
        d = x - self.center.reshape((3,) + (1,) * (x.ndim - 1))
        r2 = np.sum(d * d, axis=0)
        phi = -self.c_prime / (r2 + t + self.t0) ** 2
        if taper:
            phi = phi * self._taper(np.sqrt(r2))
        out[0] = -d[1] * phi
        out[1] = d[0] * phi
        return out

    def _sample(self, values, grid):
        g = grid
        if self.spec.family == "constant" or self.is_zero:
            return VectorField(g, values)
        return VectorField(g, s_leray(g, g.fft(values)), spectral=True)

    def __call__(self, t: float, grid: Grid | None = None) -> VectorField:
        g = grid or self.grid
        if g is not self.grid and g != self.grid:
            return Drift(self.spec, g)(t)
        return self._sample(self.exact(g.points, t), g)

    def time_derivative(self, t: float) -> VectorField:
        return self._sample(self.exact_dt(self.grid.points, t), self.grid)

    def projection_defect(self, t: float) -> float:
        raw = VectorField(self.grid, self.exact(self.grid.points, t))
        if self.spec.family in ("zero", "constant"):
            return 0.0
        size = lp_norm(raw, 2)
        return lp_norm(leray(raw) - raw, 2) / size if size else 0.0


def make_drift(spec: DriftSpec, grid: Grid) -> Drift:
    return Drift(spec, grid)


@dataclass
class ValidationResult:
    passed: bool
    max_product: float
    c_d: float
    margin: float
    divergence_residual: float
    sup_speed: float
    projection_defect: float
    message: str = ""


def validate_drift(drift: Drift, horizon: float, *, n_times: int = 12, stride: int = 2) -> ValidationResult:
    """Check ``|u(x,t)| (|x - center| + sqrt t) <= c_d`` on a space-time lattice.

    Uses ``sqrt t`` rather than ``sqrt(t + t0)``, which is the stricter test.
    The lattice is every ``stride``-th grid point at ``t = 0`` and ``n_times``
    geometrically spaced times up to ``horizon``.
    """
    g = drift.grid
    times = np.concatenate([[0.0], np.geomspace(min(1e-2, horizon), horizon, n_times - 1)])
    sl = (slice(None),) + (slice(None, None, stride),) * 3
    d = g.points[sl] - drift.center.reshape(3, 1, 1, 1)
    dist = np.sqrt(np.sum(d * d, axis=0))
    worst, resid = 0.0, 0.0
    for t in times:
        u = drift(t)
        speed = u.magnitude()[sl[1:]]
        worst = max(worst, float(np.max(speed * (dist + np.sqrt(t)))))
        resid = max(resid, divergence_residual(u))
    c_d = drift.spec.c_d
    margin = 1 - worst / c_d if c_d > 0 else (1.0 if worst == 0 else -np.inf)
    ok = worst <= c_d and resid <= 1e-8
    msg = "" if ok else ("decay bound violated" if worst > c_d else "drift not divergence-free")
    return ValidationResult(
        passed=bool(ok),
        max_product=worst,
        c_d=c_d,
        margin=float(margin),
        divergence_residual=resid,
        sup_speed=drift.sup_speed(),
        projection_defect=drift.projection_defect(0.0),
        message=msg,
    )


# --- forcing -----------------------------------------------------------------


@dataclass(frozen=True)
class ForcingSpec:
    amplitude: float = 1.0
    radius: float = 4.0
    window: tuple = (0.5, 2.5)
    pattern: str = "xy"
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t_on, t_off = self.window
        if not 0 < t_on < t_off:
            raise AdmissibilityError(f"forcing window must satisfy 0 < t_on < t_off, got {self.window}")
        if not self.radius > 0:
            raise AdmissibilityError("forcing radius must be positive")
        if self.pattern not in PATTERNS:
            raise AdmissibilityError(f"unknown skew pattern {self.pattern!r}")

    @property
    def matrix(self) -> np.ndarray:
        i, j = PATTERNS[self.pattern]
        S = np.zeros((3, 3))
        S[i, j], S[j, i] = 1.0, -1.0
        return S


class Forcing:
    """``F(x, t) = amplitude * bump(|x - c| / a) * bump_t(t) * S``.

    ``bump_t`` is the bump mapped onto the window, so ``F`` is smooth and
    vanishes outside ``[t_on, t_off]`` and ``|x - c| >= a``.  ``S`` is a fixed
    skew matrix, hence ``div div F = 0`` identically.
    """

    def __init__(self, spec: ForcingSpec, grid: Grid):
        c = np.asarray(spec.center, float)
        if np.max(np.abs(c)) + spec.radius >= grid.L / 4:
            raise AdmissibilityError("forcing support violates the box margin (|c| + a < L/4)")
        self.spec = spec
        self.grid = grid
        self.S = spec.matrix
        d = grid.points - c.reshape(3, 1, 1, 1)
        self.profile = spec.amplitude * bump(np.sqrt(np.sum(d * d, axis=0)) / spec.radius)
        self.radial = np.sqrt(np.sum(grid.points**2, axis=0))
        sf = np.sqrt(np.sum(self.S**2))
        dv = grid.cell_volume
        self._l1 = float(np.sum(np.abs(self.profile)) * dv) * sf
        self._l2 = float(np.sqrt(np.sum(self.profile**2) * dv)) * sf
        self._mom = [float(np.sum(self.profile**2 * self.radial**k) * dv) * sf**2 for k in range(3)]

    @property
    def window(self):
        return self.spec.window

    def theta(self, t) -> np.ndarray | float:
        t_on, t_off = self.spec.window
        tau = (2 * np.asarray(t, float) - t_on - t_off) / (t_off - t_on)
        out = bump(tau)
        return float(out) if np.ndim(out) == 0 else out

    def __call__(self, t: float) -> TensorField:
        th = self.theta(t)
        return TensorField(self.grid, th * self.S[:, :, None, None, None] * self.profile)

    def is_zero(self) -> bool:
        return self.spec.amplitude == 0

    def l1(self, t) -> float:
        return abs(self.theta(t)) * self._l1

    def l2(self, t) -> float:
        return abs(self.theta(t)) * self._l2

    def G(self, t: float) -> TensorField:
        """``G = F (sqrt t + |y|)``."""
        return TensorField(self.grid, self(t).physical * (np.sqrt(t) + self.radial))

    def G_l2(self, t) -> float:
        # ||F (sqrt t + r)||_2^2 = t m0 + 2 sqrt t m1 + m2
        t = np.asarray(t, float)
        m0, m1, m2 = self._mom
        val = np.abs(self.theta(t)) * np.sqrt(t * m0 + 2 * np.sqrt(t) * m1 + m2)
        return float(val) if val.ndim == 0 else val


def make_forcing(spec: ForcingSpec, grid: Grid) -> Forcing:
    return Forcing(spec, grid)


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 64
    L: float = 16 * np.pi
    dt: float = 0.02
    horizon: float = 10.0
    dt_max: float = 0.25
    growth: float = 0.02
    drift: DriftSpec = field(default_factory=DriftSpec)
    forcing: ForcingSpec = field(default_factory=ForcingSpec)
    checks: tuple = ("all",)
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > 0:
            raise ConfigError("time.dt and time.horizon must be positive")
        if self.dt_max < self.dt:
            raise ConfigError("time.dt_max must be >= time.dt")
        if self.growth < 0:
            raise ConfigError("time.growth must be >= 0")

    @property
    def grid(self) -> Grid:
        return Grid(self.n, self.L)

    def time_grid(self) -> np.ndarray:
        """Step times: uniform ``dt`` while forced, then ``clip(growth t, dt, dt_max)``."""
        t_off = self.forcing.window[1] if self.forcing.amplitude != 0 else 0.0
        ts = [0.0]
        t = 0.0
        eps = 1e-12 * self.horizon
        while t < self.horizon - eps:
            h = self.dt if t < t_off - eps else min(max(self.growth * t, self.dt), self.dt_max)
            if t < t_off - eps and t + h > t_off + eps:
                h = t_off - t
            t = min(t + h, self.horizon)
            if self.horizon - t < 0.25 * self.dt:
                t = self.horizon
            ts.append(t)
        return np.asarray(ts)

    def build(self, grid: Grid | None = None) -> tuple[Drift, Forcing]:
        g = grid or self.grid
        return make_drift(self.drift, g), make_forcing(self.forcing, g)

    def to_flat(self) -> dict:
        d = self.drift
        f = self.forcing
        return {
            "grid.n": self.n,
            "grid.L": float(self.L),
            "time.dt": self.dt,
            "time.horizon": self.horizon,
            "time.dt_max": self.dt_max,
            "time.growth": self.growth,
            "drift.family": d.family,
            "drift.c_d": d.c_d,
            "drift.t0": d.t0,
            "drift.center": list(d.center),
            "drift.scale": d.scale,
            "forcing.amplitude": f.amplitude,
            "forcing.radius": f.radius,
            "forcing.window": list(f.window),
            "forcing.pattern": f.pattern,
            "forcing.center": list(f.center),
            "checks.enabled": list(self.checks),
            "seed": self.seed,
        }

    def digest(self) -> str:
        text = yaml.safe_dump(self.to_flat(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


_KEYMAP = {
    "grid.n": ("n", int),
    "grid.L": ("L", float),
    "time.dt": ("dt", float),
    "time.horizon": ("horizon", float),
    "time.dt_max": ("dt_max", float),
    "time.growth": ("growth", float),
    "drift.family": ("drift.family", str),
    "drift.c_d": ("drift.c_d", float),
    "drift.t0": ("drift.t0", float),
    "drift.center": ("drift.center", tuple),
    "drift.scale": ("drift.scale", float),
    "forcing.amplitude": ("forcing.amplitude", float),
    "forcing.radius": ("forcing.radius", float),
    "forcing.window": ("forcing.window", tuple),
    "forcing.pattern": ("forcing.pattern", str),
    "forcing.center": ("forcing.center", tuple),
    "checks.enabled": ("checks", tuple),
    "seed": ("seed", int),
}


def _coerce(key, value, kind):
    if kind is tuple:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            value = [value]
        if key in ("drift.center", "forcing.center", "forcing.window"):
            out = tuple(float(v) for v in value)
            want = 2 if key == "forcing.window" else 3
            if len(out) != want:
                raise ConfigError(f"{key} needs {want} numbers")
            return out
        return tuple(str(v) for v in value)
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{key} must be an integer")
    if kind in (int, float) and isinstance(value, (bool, str)):
        raise ConfigError(f"{key} must be numeric")
    return kind(value)


def config_from_mapping(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of dotted keys")
    top, drift, forcing = {}, {}, {}
    for key, value in data.items():
        if key not in _KEYMAP:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested mappings are not allowed")
        name, kind = _KEYMAP[key]
        try:
            value = _coerce(key, value, kind)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        if name.startswith("drift."):
            drift[name[6:]] = value
        elif name.startswith("forcing."):
            forcing[name[8:]] = value
        else:
            top[name] = value
    try:
        Grid(top.get("n", 64), top.get("L", 16 * np.pi))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ScenarioConfig(drift=DriftSpec(**drift), forcing=ForcingSpec(**forcing), **top)


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read configuration: {exc}") from exc
    return config_from_mapping(data or {})


def dump_config(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=False))


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    drift = {k[6:]: v for k, v in kw.items() if k.startswith("drift_")}
    forcing = {k[8:]: v for k, v in kw.items() if k.startswith("forcing_")}
    top = {k: v for k, v in kw.items() if not k.startswith(("drift_", "forcing_"))}
    return replace(
        cfg,
        drift=replace(cfg.drift, **drift),
        forcing=replace(cfg.forcing, **forcing),
        **top,
    )
