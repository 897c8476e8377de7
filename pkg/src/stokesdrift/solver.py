"""Spectral time stepping for the drift-perturbed Stokes system.

In Fourier variables the evolved equation is

    d/dt v_hat = -|xi|^2 v_hat + N,    N = P[ i xi_j ((v (x) u)_hat - F_hat)_lj ],

i.e. ``dv/dt - Laplacian v = div F0`` with ``F0 = v (x) u + q I - F`` and the
pressure fixed by the Leray projector ``P``.  Steps use the second-order
exponential time differencing rule (Cox-Matthews ETD2): the diffusion is
integrated exactly, ``N`` by a predictor-corrector pair.  Products are
two-thirds dealiased and the source is stripped of Nyquist modes.

Because ``N = rot A`` with ``A = curl_inverse(N)``, the vector potential ``B``
(``dB/dt - Laplacian B = A``) is advanced with the same stages, so
``rot B`` tracks ``v``.
"""
from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np

from .fields import (
    Grid,
    ScalarField,
    TensorField,
    VectorField,
    curl_inverse,
    div,
    outer,
    s_curl,
    s_div_tensor,
    s_inner,
    s_leray,
    s_norm2,
    s_pressure,
)
from .scenario import Drift, Forcing, ScenarioConfig, validate_drift, AdmissibilityError

LEDGER_COLUMNS = ("t", "L1", "L2", "H1", "F_L2", "pairing", "boundary_mass")
DIAGNOSTIC_COLUMNS = (
    "y", "R", "drift_work", "force_work", "F_L1", "G_L2", "L1p5", "L5half", "Linf",
    "q_L2", "vu_L1", "vu_L2", "H_ratio", "div_residual", "mean_abs", "dt",
)
POTENTIAL_COLUMNS = ("A_L2", "B_L2", "gradB_L2", "vcheck_err", "AB", "A_bound")


class SolverError(RuntimeError):
    """Step rejected or trajectory aborted."""


def _phi_functions(z: np.ndarray):
    """``phi1 = (e^z - 1)/z`` and ``phi2 = (e^z - 1 - z)/z^2`` with small-z series."""
    e = np.exp(z)
    phi1 = np.empty_like(z)
    phi2 = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small]
    phi1[small] = 1 + zs / 2 + zs**2 / 6 + zs**3 / 24
    phi2[small] = 0.5 + zs / 6 + zs**2 / 24 + zs**3 / 120
    zl = z[~small]
    em1 = np.expm1(zl)
    phi1[~small] = em1 / zl
    phi2[~small] = (em1 - zl) / zl**2
    return e, phi1, phi2


class SpectralStepper:
    """Right-hand side and ETD2 update on one grid for a given drift/forcing.

    ``u_gen`` and ``F_gen`` are callables of time returning fields; a
    :class:`Forcing` is recognized and its separable structure used, and a
    zero drift skips the product.
    """

    def __init__(self, grid: Grid, u_gen=None, F_gen=None):
        self.grid = grid
        self.u_gen = u_gen
        self.F_gen = F_gen
        self.zero_drift = u_gen is None or (isinstance(u_gen, Drift) and u_gen.is_zero)
        self._coeffs: dict[float, tuple] = {}
        self._u_cache: tuple[float, np.ndarray] | None = None
        self._force_cache: tuple[float, np.ndarray, np.ndarray] | None = None
        self._separable = isinstance(F_gen, Forcing)
        if self._separable:
            S = F_gen.S
            fhat = grid.fft(F_gen.profile) * grid.nyquist_free
            Fh = S[:, :, None, None, None] * fhat
            self._Fhat_unit = Fh
            self._divF_unit = s_leray(grid, s_div_tensor(grid, Fh))

    # -- sources -------------------------------------------------------------

    def max_speed(self) -> float:
        if self.zero_drift:
            return 0.0
        if isinstance(self.u_gen, Drift):
            return float(self.u_gen.sup_speed())
        return float("nan")

    def drift(self, t: float) -> np.ndarray | None:
        if self.zero_drift:
            return None
        if self._u_cache is None or self._u_cache[0] != t:
            self._u_cache = (t, np.ascontiguousarray(self.u_gen(t).physical))
        return self._u_cache[1]

    def forcing(self, t: float) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Return (F_hat, P div F_hat) at time t, or (None, None) when F vanishes."""
        if self.F_gen is None:
            return None, None
        if self._force_cache is not None and self._force_cache[0] == t:
            return self._force_cache[1], self._force_cache[2]
        g = self.grid
        if self._separable:
            th = self.F_gen.theta(t)
            if th == 0:
                out = (None, None)
            else:
                out = (th * self._Fhat_unit, th * self._divF_unit)
        else:
            Fh = self.F_gen(t).spectral * g.nyquist_free
            out = (Fh, s_leray(g, s_div_tensor(g, Fh))) if np.any(Fh) else (None, None)
        self._force_cache = (t, out[0], out[1])
        return out

    def rhs(self, V: np.ndarray, t: float, need_physical: bool = True) -> dict:
        """Evaluate ``N`` and the intermediate quantities that diagnostics reuse."""
        g = self.grid
        out: dict = {}
        u = self.drift(t)
        v = g.ifft(V) if (need_physical or u is not None) else None
        N = np.zeros_like(V)
        T = None
        if u is not None:
            prod = np.einsum("i...,j...->ij...", v, u)
            T = g.fft(prod) * g.dealias
            Nd = s_leray(g, s_div_tensor(g, T))
            N += Nd
            out["Nd"] = Nd
        Fh, divF = self.forcing(t)
        if divF is not None:
            N -= divF
            out["Nf"] = -divF
        out.update(N=N, v=v, u=u, T=T, Fhat=Fh)
        return out

    # -- time update -----------------------------------------------------------

    def coefficients(self, dt: float):
        c = self._coeffs.get(dt)
        if c is None:
            if len(self._coeffs) > 8:
                self._coeffs.clear()
            c = _phi_functions(-self.grid.k2 * dt)
            self._coeffs[dt] = c
        return c

    def advance(self, V: np.ndarray, t: float, dt: float, N0: np.ndarray | None = None):
        """One ETD2 step; returns (V_new, N0, N_stage)."""
        if not dt > 0:
            raise SolverError(f"step size must be positive, got {dt}")
        speed = self.max_speed()
        if speed > 0 and dt > 0.5 * self.grid.dx / speed:
            raise SolverError(
                f"CFL violation: dt = {dt:.3g} > 0.5 dx / max|u| = {0.5 * self.grid.dx / speed:.3g}"
            )
        E, p1, p2 = self.coefficients(dt)
        if N0 is None:
            N0 = self.rhs(V, t, need_physical=False)["N"]
        a = E * V + dt * p1 * N0
        Na = self.rhs(a, t + dt, need_physical=False)["N"]
        Vn = a + dt * p2 * (Na - N0)
        if not np.all(np.isfinite(Vn)):
            bad = np.argwhere(~np.isfinite(Vn))[0]
            raise SolverError(f"non-finite value at t = {t + dt:.6g}, mode index {tuple(bad)}")
        return Vn, N0, Na


@dataclass
class SolverState:
    t: float
    v: VectorField
    q: ScalarField | None = None
    ledger: dict = field(default_factory=dict)


def step(state: SolverState, dt: float, u_gen=None, F_gen=None, stepper: SpectralStepper | None = None) -> SolverState:
    """Advance one ETD2 step and append a ledger row for the new time."""
    g = state.v.grid
    stepper = stepper or SpectralStepper(g, u_gen, F_gen)
    V, _, _ = stepper.advance(state.v.spectral, state.t, dt)
    t = state.t + dt
    info = stepper.rhs(V, t)
    v = VectorField(g, V, spectral=True)
    q = _pressure_from(g, info)
    ledger = {k: list(vals) for k, vals in state.ledger.items()}
    row = _ledger_row(g, t, V, info, F_gen, None)
    for k in LEDGER_COLUMNS:
        ledger.setdefault(k, []).append(row[k])
    return SolverState(t=t, v=v, q=q, ledger=ledger)


def _pressure_from(g: Grid, info: dict) -> ScalarField:
    # q_hat = xi_i xi_j (F - v(x)u)_ij / |xi|^2  =  s_pressure(v(x)u - F)
    src = np.zeros((3, 3) + g.spectral_shape, complex)
    if info.get("T") is not None:
        src += info["T"]
    if info.get("Fhat") is not None:
        src -= info["Fhat"]
    return ScalarField(g, s_pressure(g, src), spectral=True)


def recover_pressure(v: VectorField, u: VectorField | None, F: TensorField | None) -> ScalarField:
    """Mean-zero pressure with ``Laplacian q = div div (F - v (x) u)``."""
    g = v.grid
    src = np.zeros((3, 3) + g.spectral_shape, complex)
    if u is not None:
        src += outer(v, u).spectral
    if F is not None:
        src -= F.spectral
    return ScalarField(g, s_pressure(g, src), spectral=True)


def _ledger_row(g: Grid, t: float, V, info: dict, F_gen, drift_cd) -> dict:
    dv = g.cell_volume
    v = info["v"]
    u = info["u"]
    mag = np.sqrt(np.sum(v * v, axis=0))
    L1 = float(mag.sum() * dv)
    y = s_norm2(g, V)
    H1sq = s_norm2(g, np.sqrt(g.k2) * V)
    band = g.boundary_band(g.L / 8)
    pairing = float(np.sum(u * v) * dv) if u is not None else 0.0
    row = {
        "t": float(t),
        "L1": L1,
        "L2": float(np.sqrt(y)),
        "H1": float(np.sqrt(H1sq)),
        "pairing": pairing,
        "boundary_mass": float(mag[band].sum() * dv / L1) if L1 > 0 else 0.0,
    }
    if isinstance(F_gen, Forcing):
        row["F_L2"], row["F_L1"], row["G_L2"] = F_gen.l2(t), F_gen.l1(t), F_gen.G_l2(t)
    elif F_gen is not None:
        F = F_gen(t)
        row["F_L2"] = F.norm(2)
        row["F_L1"] = F.norm(1)
        row["G_L2"] = float(np.sqrt(np.sum(F.magnitude() ** 2 * (np.sqrt(t) + g.radius) ** 2) * dv))
    else:
        row["F_L2"] = row["F_L1"] = row["G_L2"] = 0.0
    N = info["N"]
    row["y"] = y
    row["drift_work"] = s_inner(g, V, info["Nd"]) if "Nd" in info else 0.0
    row["force_work"] = s_inner(g, V, info["Nf"]) if "Nf" in info else 0.0
    row["R"] = -2 * H1sq + 2 * (row["drift_work"] + row["force_work"])
    row["L1p5"] = float((np.sum(mag**1.5) * dv) ** (1 / 1.5))
    row["L5half"] = float((np.sum(mag**2.5) * dv) ** 0.4)
    row["Linf"] = float(mag.max())
    if u is not None:
        umag = np.sqrt(np.sum(u * u, axis=0))
        row["vu_L1"] = float(np.sum(mag * umag) * dv)
        row["vu_L2"] = float(np.sqrt(np.sum((mag * umag) ** 2) * dv))
    else:
        row["vu_L1"] = row["vu_L2"] = 0.0
    row["q_L2"] = float(np.sqrt(s_norm2(g, _pressure_from(g, info).spectral)))
    # modewise |H_hat| / |xi| with the continuous-transform scaling dx^3
    Nmag = np.sqrt(np.sum(np.abs(N) ** 2, axis=0))
    k = np.sqrt(g.k2)
    nz = k > 0
    row["H_ratio"] = float(np.max(Nmag[nz] / k[nz]) * dv) if np.any(nz) else 0.0
    kx, ky, kz = g.xi
    size = np.sqrt(g.spectral_sum(np.sum(np.abs(V) ** 2, axis=0)))
    row["div_residual"] = float(np.abs(kx * V[0] + ky * V[1] + kz * V[2]).max() / size) if size > 0 else 0.0
    row["mean_abs"] = float(np.abs(V[:, 0, 0, 0]).max() * dv)
    return row


@dataclass
class Trajectory:
    """Per-step ledger, spectra and optional snapshots of one run."""

    config: ScenarioConfig | None
    grid: Grid
    ledger: dict
    diagnostics: dict
    band_energy: np.ndarray
    potential: dict | None = None
    snapshots: dict = field(default_factory=dict)
    final: VectorField | None = None
    flags: dict = field(default_factory=dict)
    wall_time: float = 0.0
    identity: dict | None = None

    @property
    def times(self) -> np.ndarray:
        return self.ledger["t"]

    def column(self, name: str) -> np.ndarray:
        if name in self.ledger:
            return self.ledger[name]
        if name in self.diagnostics:
            return self.diagnostics[name]
        if self.potential and name in self.potential:
            return self.potential[name]
        if self.identity and name in self.identity:
            return self.identity[name]
        raise KeyError(name)

    @property
    def band_k2(self) -> np.ndarray:
        """``|xi|^2`` of each band-energy bin."""
        return np.arange(self.band_energy.shape[1]) * self.grid.kmin**2

    def snapshot(self, t: float) -> VectorField:
        key = min(self.snapshots, key=lambda s: abs(s - t))
        return VectorField(self.grid, self.snapshots[key], spectral=True)


class PotentialTracker:
    """Advances ``B`` alongside ``v`` using the stage values of ``N``."""

    def __init__(self, grid: Grid, Knorm: float = 1.0, Mnorm: float = 1.0, c_d: float = 0.0):
        self.grid = grid
        self.B = np.zeros((3,) + grid.spectral_shape, complex)
        self.Knorm, self.Mnorm, self.c_d = Knorm, Mnorm, c_d
        self.rows: dict[str, list] = {k: [] for k in POTENTIAL_COLUMNS}

    def potential(self, N):
        return s_curl(self.grid, N) * self.grid.inv_k2

    def advance(self, stepper: SpectralStepper, dt: float, N0, Na):
        E, p1, p2 = stepper.coefficients(dt)
        A0 = self.potential(N0)
        Aa = self.potential(Na)
        self.B = E * self.B + dt * p1 * A0 + dt * p2 * (Aa - A0)

    def record(self, t: float, V, N, F_L2: float):
        g = self.grid
        A = self.potential(N)
        vnorm = np.sqrt(s_norm2(g, V))
        err = np.sqrt(s_norm2(g, s_curl(g, self.B) - V))
        self.rows["A_L2"].append(float(np.sqrt(s_norm2(g, A))))
        self.rows["B_L2"].append(float(np.sqrt(s_norm2(g, self.B))))
        self.rows["gradB_L2"].append(float(np.sqrt(s_norm2(g, np.sqrt(g.k2) * self.B))))
        self.rows["vcheck_err"].append(float(err / vnorm) if vnorm > 0 else float(err))
        self.rows["AB"].append(s_inner(g, A, self.B))
        bound = self.Knorm * F_L2
        if t > 0:
            bound += self.Knorm * (1 + np.sqrt(3) * self.Mnorm) * self.c_d / np.sqrt(t) * vnorm
        self.rows["A_bound"].append(float(bound))

    def result(self) -> dict:
        return {k: np.asarray(v) for k, v in self.rows.items()}


IDENTITY_COLUMNS = ("udivF", "vX")


def identity_terms(grid: Grid, drift: Drift | None, t: float, V, info: dict) -> tuple[float, float]:
    """Integrands of the pairing identity at one time.

    Returns ``<u, div F>`` and ``<v, X>`` with
    ``X = du/dt - (grad u) u + Laplacian u - grad p_u``.  ``(grad u) u`` uses
    the same two-thirds truncation as the solver's product, which makes
    ``d/dt <u, v> = <v, X> - <u, div F>`` hold exactly for the semi-discrete
    system.
    """
    u = info["u"]
    if u is None or drift is None:
        return 0.0, 0.0
    g = grid
    U = g.fft(u)
    Fh = info.get("Fhat")
    force = s_inner(g, U, s_div_tensor(g, Fh)) if Fh is not None else 0.0
    xi = g.xi
    gradU = np.stack([1j * xi[j] * U for j in range(3)], axis=1) * g.dealias
    adv = np.einsum("ij...,j...->i...", g.ifft(gradU), u)
    pu = s_pressure(g, g.fft(np.einsum("i...,j...->ij...", u, u)))
    X = drift.time_derivative(t).spectral - g.k2 * U - g.fft(adv)
    X = X - np.stack([1j * xi[j] * pu for j in range(3)])
    return float(force), float(s_inner(g, V, X))


def evolve(
    config: ScenarioConfig,
    *,
    times: np.ndarray | None = None,
    snapshots=None,
    track_potential: bool = True,
    operator_norms: tuple[float, float] = (1.0, 1.0),
    validate: bool = True,
    drift: Drift | None = None,
    forcing: Forcing | None = None,
    pairing_identity: bool = False,
) -> Trajectory:
    """Run a scenario over its horizon, recording the ledger at every step.

    ``snapshots`` is None, ``"all"`` or a collection of times (the closest
    step time is stored).  ``operator_norms`` are ``(||K||, ||M||)`` for the
    reported bound on ``||A||``.  ``pairing_identity`` records the integrands
    from :func:`identity_terms` at every ledger time.
    """
    wall = _time.perf_counter()
    grid = config.grid
    if drift is None or forcing is None:
        d, f = config.build(grid)
        drift = drift or d
        forcing = forcing or f
    if validate and not drift.is_zero:
        res = validate_drift(drift, config.horizon)
        if not res.passed:
            raise AdmissibilityError(f"drift rejected: {res.message} (max {res.max_product:.4g} vs c_d {res.c_d:.4g})")
    ts = config.time_grid() if times is None else np.asarray(times, float)
    if np.any(np.diff(ts) <= 0):
        raise SolverError("ledger times must be strictly increasing")
    stepper = SpectralStepper(grid, drift, forcing)
    tracker = None
    if track_potential:
        tracker = PotentialTracker(grid, *operator_norms, c_d=drift.spec.c_d if not drift.is_zero else 0.0)

    want = None
    if snapshots is not None and snapshots != "all":
        want = {float(ts[np.argmin(np.abs(ts - s))]) for s in snapshots}

    rows: dict[str, list] = {}
    nb = int(grid.kint2.max()) + 1
    kbin = grid.kint2.ravel()
    bands = np.zeros((len(ts), nb))
    snaps = {}
    flags = {"boundary_contaminated": False, "contamination_time": None}
    scale = grid.cell_volume / grid.npoints
    ident = {k: [] for k in IDENTITY_COLUMNS} if pairing_identity else None

    V = np.zeros((3,) + grid.spectral_shape, complex)
    info = stepper.rhs(V, ts[0])
    for n, t in enumerate(ts):
        if n > 0:
            dt = t - ts[n - 1]
            V, N0, Na = stepper.advance(V, ts[n - 1], dt, info["N"])
            if tracker is not None:
                tracker.advance(stepper, dt, N0, Na)
            info = stepper.rhs(V, t)
        row = _ledger_row(grid, t, V, info, forcing, None)
        row["dt"] = float(t - ts[n - 1]) if n > 0 else 0.0
        for k, val in row.items():
            rows.setdefault(k, []).append(val)
        dens = (grid.weights * np.sum(np.abs(V) ** 2, axis=0)).ravel() * scale
        bands[n] = np.bincount(kbin, weights=dens, minlength=nb)
        if tracker is not None:
            tracker.record(t, V, info["N"], row["F_L2"])
        if ident is not None:
            a, b = identity_terms(grid, None if drift.is_zero else drift, t, V, info)
            ident["udivF"].append(a)
            ident["vX"].append(b)
        if snapshots == "all" or (want is not None and float(t) in want):
            snaps[float(t)] = V.copy()
        if row["boundary_mass"] > 1e-3 and not flags["boundary_contaminated"]:
            flags["boundary_contaminated"] = True
            flags["contamination_time"] = float(t)

    ledger = {k: np.asarray(rows[k]) for k in LEDGER_COLUMNS}
    diagnostics = {k: np.asarray(rows[k]) for k in DIAGNOSTIC_COLUMNS}
    return Trajectory(
        config=config,
        grid=grid,
        ledger=ledger,
        diagnostics=diagnostics,
        band_energy=bands,
        potential=tracker.result() if tracker else None,
        snapshots=snaps,
        final=VectorField(grid, V, spectral=True),
        flags=flags,
        wall_time=time_since(wall),
        identity={k: np.asarray(v) for k, v in ident.items()} if ident is not None else None,
    )


def time_since(t0: float) -> float:
    return _time.perf_counter() - t0


@dataclass
class PotentialState:
    t: float
    B: VectorField
    A_src: VectorField
    v_check: VectorField


def vector_potential_evolve(trajectory: Trajectory, u_gen=None, F_gen=None) -> tuple[list[PotentialState], dict]:
    """Rebuild ``B`` from stored snapshots (every ledger time is needed).

    ``A = curl_inverse(div F0)`` with ``F0 = v (x) u + q I - F`` and ``q`` from
    :func:`recover_pressure`; ``B`` is advanced by ETD2 with ``A`` taken at the
    two ends of each step.  Returns the states and a table with ``A_L2``,
    ``B_L2``, ``gradB_L2``, ``v_L2`` and ``vcheck_err`` per time.
    """
    g = trajectory.grid
    ts = trajectory.times
    missing = [t for t in ts if float(t) not in trajectory.snapshots]
    if missing:
        raise ValueError(f"snapshots missing at {len(missing)} ledger times")
    stepper = SpectralStepper(g)

    def source(t):
        v = VectorField(g, trajectory.snapshots[float(t)], spectral=True)
        u = u_gen(t) if u_gen is not None and not (isinstance(u_gen, Drift) and u_gen.is_zero) else None
        F = F_gen(t) if F_gen is not None else None
        if F is not None:
            F = TensorField(g, F.spectral * g.nyquist_free, spectral=True)
        q = recover_pressure(v, u, F)
        F0 = TensorField.identity_times(q).to_spectral()
        if u is not None:
            F0 = F0 + outer(v, u)
        if F is not None:
            F0 = F0 - F
        return v, curl_inverse(div(F0), tol=1e-6)

    B = np.zeros((3,) + g.spectral_shape, complex)
    states = []
    table = {k: [] for k in ("t", "A_L2", "B_L2", "gradB_L2", "v_L2", "vcheck_err")}
    v, A = source(ts[0])
    for n, t in enumerate(ts):
        if n > 0:
            dt = t - ts[n - 1]
            E, p1, p2 = stepper.coefficients(dt)
            v_new, A_new = source(t)
            B = E * B + dt * p1 * A.spectral + dt * p2 * (A_new.spectral - A.spectral)
            v, A = v_new, A_new
        Bf = VectorField(g, B, spectral=True)
        w = VectorField(g, s_curl(g, B), spectral=True)
        vn = np.sqrt(s_norm2(g, v.spectral))
        err = np.sqrt(s_norm2(g, w.spectral - v.spectral))
        table["t"].append(float(t))
        table["A_L2"].append(float(np.sqrt(s_norm2(g, A.spectral))))
        table["B_L2"].append(float(np.sqrt(s_norm2(g, B))))
        table["gradB_L2"].append(float(np.sqrt(s_norm2(g, np.sqrt(g.k2) * B))))
        table["v_L2"].append(float(vn))
        table["vcheck_err"].append(float(err / vn) if vn > 0 else float(err))
        states.append(PotentialState(t=float(t), B=Bf, A_src=A, v_check=w))
    return states, {k: np.asarray(val) for k, val in table.items()}
