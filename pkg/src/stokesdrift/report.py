"""Check dispatch, run-directory I/O, verification reports and plots."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__
from . import decay
from .decay import CheckResult
from .fields import Grid, curl_inverse_operator_norm, pressure_operator_norm
from .scenario import DriftSpec, config_from_mapping
from .solver import DIAGNOSTIC_COLUMNS, IDENTITY_COLUMNS, LEDGER_COLUMNS, POTENTIAL_COLUMNS, Trajectory

LEDGER_VERSION = 1
LEDGER_FILE = "ledger.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
POTENTIAL_FILE = "potential.csv"
REPLAY_FILE = "replay.csv"
SPECTRA_FILE = "spectra.npz"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.jsonl"
ENVELOPES_FILE = "envelopes.csv"


# --- CSV ------------------------------------------------------------------------


def write_table(path: Path, columns: Iterable[str], data: dict, comment: str | None = None) -> None:
    """CSV with ``repr`` floats so a rerun reproduces the file byte for byte."""
    columns = list(columns)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in zip(*(np.asarray(data[c]) for c in columns)):
            w.writerow([repr(float(x)) for x in row])


def read_table(path: Path) -> dict:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        return {}
    header, body = rows[0], rows[1:]
    arr = np.array([[float(x) for x in r] for r in body]) if body else np.zeros((0, len(header)))
    return {h: arr[:, i] for i, h in enumerate(header)}


def ledger_comment(columns) -> str:
    return f"stokesdrift ledger v{LEDGER_VERSION}; columns: {', '.join(columns)}"


def write_run(traj: Trajectory, out_dir: Path, manifest: dict, replay: dict | None = None) -> dict:
    """Persist a trajectory; returns the mapping of written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"ledger": out_dir / LEDGER_FILE, "diagnostics": out_dir / DIAGNOSTICS_FILE,
             "spectra": out_dir / SPECTRA_FILE}
    write_table(paths["ledger"], LEDGER_COLUMNS, traj.ledger, ledger_comment(LEDGER_COLUMNS))
    diag = dict(traj.diagnostics)
    cols = ["t"] + list(DIAGNOSTIC_COLUMNS)
    diag["t"] = traj.times
    if traj.identity:
        diag.update(traj.identity)
        cols += list(IDENTITY_COLUMNS)
    write_table(paths["diagnostics"], cols, diag, ledger_comment(cols))
    if traj.potential:
        paths["potential"] = out_dir / POTENTIAL_FILE
        pot = dict(traj.potential, t=traj.times)
        write_table(paths["potential"], ("t",) + POTENTIAL_COLUMNS, pot, ledger_comment(("t",) + POTENTIAL_COLUMNS))
    if replay is not None:
        paths["replay"] = out_dir / REPLAY_FILE
        write_table(paths["replay"], list(replay), replay, ledger_comment(list(replay)))
    np.savez(paths["spectra"], t=traj.times, band_energy=traj.band_energy, band_k2=traj.band_k2)
    if traj.snapshots:
        paths["snapshots"] = out_dir / "snapshots.npz"
        keys = sorted(traj.snapshots)
        np.savez(paths["snapshots"], t=np.asarray(keys), v_hat=np.stack([traj.snapshots[k] for k in keys]))
    manifest = dict(manifest)
    manifest["outputs"] = {k: p.name for k, p in paths.items()}
    paths["manifest"] = out_dir / MANIFEST_FILE
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def make_manifest(config, traj: Trajectory, operator_norms=None) -> dict:
    g = traj.grid
    return {
        "digest": config.digest(),
        "version": __version__,
        "config": config.to_flat(),
        "grid": {"n": g.n, "L": g.L},
        "horizon": config.horizon,
        "steps": int(len(traj.times)),
        "wall_time": traj.wall_time,
        "flags": traj.flags,
        "operator_norms": list(operator_norms) if operator_norms else None,
    }


@dataclass
class LoadedRun:
    trajectory: Trajectory
    manifest: dict
    replay: dict | None = None


def load_run(path) -> LoadedRun:
    """Rebuild a :class:`Trajectory` (no snapshots) from a run directory or its ledger."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    with open(root / MANIFEST_FILE) as fh:
        manifest = json.load(fh)
    config = config_from_mapping(manifest["config"])
    ledger = read_table(root / LEDGER_FILE)
    diag = read_table(root / DIAGNOSTICS_FILE)
    identity = {k: diag.pop(k) for k in IDENTITY_COLUMNS if k in diag} or None
    diag.pop("t", None)
    potential = None
    if (root / POTENTIAL_FILE).exists():
        potential = read_table(root / POTENTIAL_FILE)
        potential.pop("t", None)
    replay = read_table(root / REPLAY_FILE) if (root / REPLAY_FILE).exists() else None
    spectra = np.load(root / SPECTRA_FILE)
    traj = Trajectory(
        config=config,
        grid=Grid(int(manifest["grid"]["n"]), float(manifest["grid"]["L"])),
        ledger=ledger,
        diagnostics=diag,
        band_energy=spectra["band_energy"],
        potential=potential,
        flags=manifest.get("flags", {}),
        wall_time=manifest.get("wall_time", 0.0),
        identity=identity,
    )
    return LoadedRun(traj, manifest, replay)


# --- checks -----------------------------------------------------------------------


def operator_norms(L: float, n: int = 16, seed: int = 0) -> tuple[float, float]:
    """``(||K||, ||M||)`` by power iteration; the symbols do not depend on ``n``."""
    g = Grid(n, L)
    return (curl_inverse_operator_norm(g, seed=seed).norm, pressure_operator_norm(g, seed=seed).norm)


def self_similar_spec(spec: DriftSpec) -> DriftSpec:
    """The run's swirl with ``t0`` shrunk to ``4 c'^2`` (peak speed 1/4)."""
    from dataclasses import replace
    from .scenario import SWIRL_RATIO

    c_prime = (1 - spec.margin) * spec.c_d / SWIRL_RATIO
    return replace(spec, family="swirl", scale=1.0, t0=4 * c_prime**2)


def _norms(run: LoadedRun):
    norms = run.manifest.get("operator_norms")
    if norms:
        return tuple(norms)
    return operator_norms(run.trajectory.grid.L)


def _theorem3(run: LoadedRun) -> CheckResult:
    K, M = _norms(run)
    vcheck = float(np.max(run.replay["vcheck_err"])) if run.replay is not None else None
    return decay.theorem3_check(run.trajectory, K, M, vcheck_error=vcheck)


def _theorem2(run: LoadedRun) -> CheckResult:
    from .kernels import kernel_constants

    tr = run.trajectory
    forcing = None
    if tr.config is not None:
        _, forcing = tr.config.build(tr.grid)
    return decay.contraction_check(tr, kernel_constants().c_star, F_gen=forcing)


def _scale(run: LoadedRun) -> CheckResult:
    cfg = run.trajectory.config
    if cfg.drift.family not in ("swirl", "scaled_swirl"):
        return decay.skipped("scale_invariants", "scaled integrals of the drift", "drift is not a swirl")
    res = decay.scale_invariants_check(self_similar_spec(cfg.drift), cfg.L, n=min(cfg.n, 64))
    growth = decay.constant_drift_growth(cfg.drift.c_d, cfg.L)
    res.details["constant_drift_A_exponent"] = growth
    res.passed = res.passed and abs(growth - 2) < 1e-6
    return res


def _log_integrals(run: LoadedRun) -> list[CheckResult]:
    return [decay.log_integral_bound_check(3, 0), decay.log_integral_bound_check(5, 1)]


CHECKS: dict[str, Callable[[LoadedRun], CheckResult | list[CheckResult]]] = {
    "energy_inequality": lambda r: decay.energy_inequality_check(r.trajectory),
    "ap_domination": lambda r: decay.ap_domination_check(r.trajectory),
    "beta_identity": lambda r: decay.beta_identity_check(),
    "theorem1_L1": lambda r: decay.theorem1_check(r.trajectory, 1),
    "theorem1_L2": lambda r: decay.theorem1_check(r.trajectory, 2),
    "l1_growth_ratio": lambda r: decay.l1_growth_ratio_check(r.trajectory),
    "fourier_split": lambda r: decay.fourier_split_check(r.trajectory, 0, 3)[0],
    "gronwall": lambda r: decay.gronwall_check(r.trajectory),
    "log_integral": _log_integrals,
    "theorem2": _theorem2,
    "pairing_decay": lambda r: decay.pairing_decay_check(r.trajectory),
    "pairing_bounds": lambda r: decay.pairing_bounds_check(r.trajectory),
    "pairing_identity": lambda r: decay.generalized_pairing_identity(r.trajectory),
    "theorem3": _theorem3,
    "scale_invariants": _scale,
    "multiplicative": lambda r: decay.multiplicative_inequality_check([r.trajectory]),
}


class UnknownCheck(KeyError):
    pass


def resolve_checks(names: Iterable[str]) -> list[str]:
    names = list(names)
    if not names or "all" in names:
        return sorted(CHECKS)
    bad = [n for n in names if n not in CHECKS]
    if bad:
        raise UnknownCheck(", ".join(bad))
    return sorted(set(names))


@dataclass
class VerificationReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def sorted(self) -> "VerificationReport":
        return VerificationReport(sorted(self.results, key=lambda r: r.name))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.results)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "VerificationReport":
        out = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(CheckResult(d["name"], d.get("ref", ""), _num(d["measured"]), _num(d["bound"]),
                                   bool(d["pass"]), _num(d.get("margin")), bool(d.get("skipped", False)),
                                   d.get("reason", ""), d.get("details", {})))
        return cls(out)


def _num(x):
    if x is None:
        return float("nan")
    return float(x)


def verify(run: LoadedRun, names: Iterable[str]) -> VerificationReport:
    """Run the selected checks; results sorted by name."""
    results = []
    for name in resolve_checks(names):
        out = CHECKS[name](run)
        results.extend(out if isinstance(out, list) else [out])
    return VerificationReport(results).sorted()


# --- presentation ---------------------------------------------------------------------


def format_table(report: VerificationReport) -> str:
    """Per-check table; failing rows are marked ``FAIL`` with their (negative) margin."""
    head = f"{'check':<26} {'status':<7} {'measured':>13} {'bound':>13} {'margin':>10}"
    lines = [head, "-" * len(head)]
    for r in report.results:
        status = "skip" if r.skipped else ("pass" if r.passed else "FAIL")
        lines.append(f"{r.name:<26} {status:<7} {r.measured:>13.5g} {r.bound:>13.5g} {r.margin:>10.3g}")
        if r.skipped and r.reason:
            lines.append(f"    {r.reason}")
    return "\n".join(lines)


def envelope_table(traj: Trajectory) -> dict:
    """Measured norms with their envelopes, one row per ledger time."""
    t = traj.times
    e1 = decay.theorem1_envelope(1, 0, traj)
    e2 = decay.theorem1_envelope(2, 0, traj)
    gw = decay.gronwall_envelope(traj)
    return {
        "t": t,
        "L1": traj.ledger["L1"],
        "L1_envelope": e1.values,
        "L2": traj.ledger["L2"],
        "L2_envelope": e2.values,
        "y": traj.diagnostics["y"],
        "y_gronwall": gw.values,
        "L1p5": traj.diagnostics["L1p5"],
        "Ap_envelope": decay.envelope_Ap(1.5, t, traj),
        "pairing": np.abs(traj.ledger["pairing"]),
    }


def write_envelopes(traj: Trajectory, path) -> dict:
    table = envelope_table(traj)
    write_table(Path(path), list(table), table)
    return table


PLOTS = (("L1", "L1_envelope"), ("L2", "L2_envelope"), ("y", "y_gronwall"), ("L1p5", "Ap_envelope"), ("pairing", None))


def plot_envelopes(table: dict, out_dir) -> list[Path]:
    """One log-log SVG per tracked norm with its envelope overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = np.asarray(table["t"])
    pos = t > 0
    paths = []
    for name, env in PLOTS:
        if name not in table:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        y = np.asarray(table[name])[pos]
        ax.loglog(t[pos], np.where(y > 0, y, np.nan), label=name)
        if env and env in table:
            e = np.asarray(table[env])[pos]
            ax.loglog(t[pos], np.where(e > 0, e, np.nan), "--", label=env)
        ax.set_xlabel("t")
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"{name}.svg"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths
