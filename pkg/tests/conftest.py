from pathlib import Path

import pytest

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# criterion number -> (passed, summary), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def _loaded_run(name: str, snapshots=None):
    from stokesdrift import report as rep
    from stokesdrift.scenario import load_config
    from stokesdrift.solver import evolve, vector_potential_evolve

    cfg = load_config(CONFIGS / name)
    norms = rep.operator_norms(cfg.L, seed=cfg.seed)
    traj = evolve(cfg, snapshots=snapshots, operator_norms=norms)
    replay = None
    if snapshots == "all":
        drift, forcing = cfg.build(traj.grid)
        _, replay = vector_potential_evolve(traj, drift, forcing)
        traj.snapshots.clear()
    return rep.LoadedRun(traj, rep.make_manifest(cfg, traj, norms), replay)


@pytest.fixture(scope="session")
def standard_run():
    return _loaded_run("standard.yaml")


@pytest.fixture(scope="session")
def threshold_run():
    return _loaded_run("theorem3.yaml", snapshots="all")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {text}")
