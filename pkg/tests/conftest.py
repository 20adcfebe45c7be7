"""Shared fixtures: the expensive reference runs, each executed once per
session and reused by every test that needs it, plus a terminal summary that
prints one line per acceptance criterion."""

import time

import numpy as np
import pytest

from annkin import SimConfig, dsmc
from annkin.cli import sweep_seeds

# acceptance-criterion results, filled by tests/test_acceptance.py
_CRITERIA = {}


def record_criterion(num, passed, detail):
    _CRITERIA[num] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        passed, detail = _CRITERIA[num]
        terminalreporter.write_line(
            "criterion %02d: %s — %s" % (num, "PASS" if passed else "FAIL", detail))


def _timed_run(cfg):
    state = dsmc.init_state(cfg)
    t0 = time.perf_counter()
    traj = dsmc.run(state=state)
    elapsed = time.perf_counter() - t0
    return {"cfg": cfg, "traj": traj, "state": state, "elapsed": elapsed}


@pytest.fixture(scope="session")
def ref_run():
    """Annihilating reference run: d=3, N=1e5, alpha=0.05, run deep into the
    algebraic-decay regime (density floor at 1.1% of n0 so the last decade of
    t sits inside the asymptotic window)."""
    cfg = SimConfig(dim=3, alpha=0.05, particles=100_000, seed=20260817,
                    n_floor_fraction=0.011, min_particles=1000,
                    pair_samples=1_000_000, snapshot_tau_interval=0.5)
    return _timed_run(cfg)


@pytest.fixture(scope="session")
def elastic_drift_run():
    """Pure elastic run (alpha=0): 1e4 steps at N=1e5 to measure conserved-
    quantity drift.  Only the initial snapshot is taken (the tau interval is
    effectively infinite) — this run is about the records."""
    cfg = SimConfig(dim=3, alpha=0.0, particles=100_000, seed=31337,
                    max_steps=10_000, record_interval=10,
                    snapshot_tau_interval=1e9)
    return _timed_run(cfg)


@pytest.fixture(scope="session")
def relax_run():
    """Elastic relaxation from a far-from-equilibrium compact initial
    condition; snapshots every 0.5 tau track the entropy descent.

    The uniform ball is dense at its speed cutoff, so an in-step elastic
    collision routinely boosts a particle past the step-start maximum
    deviation: the default small majorant pad would abort.  A pad of 3.0
    keeps the rate bound valid through second-generation boosts while the
    abort-on-violation guard stays armed."""
    cfg = SimConfig(dim=3, alpha=0.0, particles=100_000, seed=777002,
                    ic="uniform_ball", tau_end=12.0, majorant_pad=3.0,
                    snapshot_tau_interval=0.5, pair_samples=1_000_000)
    return _timed_run(cfg)


@pytest.fixture(scope="session")
def profile_run_pair():
    """Two annihilating runs from different initial conditions; their
    tail-averaged rescaled profiles must agree within noise.  The compact
    initial condition needs the enlarged majorant pad (see relax_run)."""
    out = []
    for seed, ic in ((4101, "uniform_ball"), (4102, "bimodal")):
        cfg = SimConfig(dim=3, alpha=0.05, particles=100_000, seed=seed,
                        ic=ic, tau_end=20.0, majorant_pad=3.0,
                        snapshot_tau_interval=0.5, pair_samples=1_000_000)
        out.append(_timed_run(cfg))
    return out


@pytest.fixture(scope="session")
def sweep_runs():
    """Three alphas from the same far-from-equilibrium start; rescaled
    convergence rates toward the gaussian profile should be comparable."""
    alphas = (0.0, 0.02, 0.05)
    seeds = sweep_seeds(909, len(alphas))
    out = []
    for alpha, seed in zip(alphas, seeds):
        cfg = SimConfig(dim=3, alpha=alpha, particles=20_000, seed=seed,
                        ic="bimodal", tau_end=8.0, snapshot_tau_interval=0.25,
                        pair_samples=200_000, min_particles=500)
        out.append(_timed_run(cfg))
    return out


@pytest.fixture(scope="session")
def ref_run_dir(ref_run, tmp_path_factory):
    """The reference run persisted through the CLI writer, for CLI tests."""
    from annkin.cli import write_run
    out = tmp_path_factory.mktemp("refrun")
    write_run(str(out), ref_run["traj"], state=ref_run["state"])
    return str(out)


@pytest.fixture(scope="session")
def relax_run_dir(relax_run, tmp_path_factory):
    """The elastic relaxation run persisted without its final state.

    Omitting the checkpoint keeps `diagnose` off the O(count^2) convexity
    scan, which takes minutes at 10^5 particles; that scan has its own unit
    tests on small ensembles.
    """
    from annkin.cli import write_run
    out = tmp_path_factory.mktemp("relaxrun")
    write_run(str(out), relax_run["traj"])
    return str(out)


@pytest.fixture
def rng():
    return np.random.default_rng(987654321)
