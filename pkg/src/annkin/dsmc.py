"""Stochastic time-marching of the annihilating hard-sphere gas.

No-time-counter scheme: each step draws a fixed candidate-pair budget from a
per-step majorant of the pairwise relative speed, accepts a candidate with
probability |v_i - v_j| / majorant, and on acceptance either removes the pair
(probability alpha) or applies the elastic exchange map.  Candidates are
processed sequentially so the velocities a later candidate sees include the
collisions already performed this step; particles annihilated earlier in a
step stay in the array as corpses until the step ends (candidates touching
them are skipped, not redrawn).

All randomness for a step is pre-drawn outside the hot loop, so the loop is
a plain sequential kernel (numba-compiled when available; the pure-Python
body is the fallback and gives bit-identical results, only slower).
"""

import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    ParticleEnsemble,
    RadialHistogram,
    SimConfig,
    Snapshot,
    Trajectory,
    batch_moment_sigma,
    compute_moments,
)
from .collision import sample_sigma
from .rescale import estimate_coefficients, to_selfsimilar
from . import profile as profile_mod
from . import diagnostics

__all__ = [
    "HAVE_NUMBA",
    "MajorantViolationError",
    "SimState",
    "init_state",
    "step",
    "run",
    "tau_accumulate",
    "save_checkpoint",
    "load_checkpoint",
]


class MajorantViolationError(RuntimeError):
    """A candidate pair's relative speed exceeded the step's rate majorant.

    The acceptance probability g / majorant is only valid while g <= majorant,
    so the step aborts rather than silently clipping the rate.  An in-step
    elastic collision can push a particle's deviation from the bulk velocity
    up to sqrt(2) times the step-start maximum, so a single boosted particle
    meeting a near-maximal one already reaches (1 + sqrt(2)) * max > 2 * max.
    For initial data with gaussian tails the maximum sits far above typical
    speeds and violations are astronomically rare; for compactly supported
    data (e.g. the uniform ball, dense at its cutoff) they occur at ordinary
    settings, and ``majorant_pad`` must be raised to cover boosted pairs.
    """

    def __init__(self, step_index, candidate, rel_speed, majorant):
        super().__init__(
            "majorant violated at step %d, candidate %d: |v_i - v_j| = %.6g > %.6g"
            % (step_index, candidate, rel_speed, majorant)
        )
        self.step_index = step_index
        self.candidate = candidate
        self.rel_speed = rel_speed
        self.majorant = majorant


# ---------------------------------------------------------------------------
# candidate-processing kernel
# ---------------------------------------------------------------------------

def _candidate_loop(vel, alive, idx_i, idx_j, acc_u, ann_u, sig, alpha, lam):
    """Sequential NTC candidate sweep; mutates vel and alive in place.

    Returns (elastic events, annihilation events, violation index) where the
    violation index is -1 when the majorant held for every live candidate.
    """
    d = vel.shape[1]
    ncoll = 0
    nann = 0
    for m in range(idx_i.shape[0]):
        i = idx_i[m]
        j = idx_j[m]
        if alive[i] == 0 or alive[j] == 0:
            continue
        gsq = 0.0
        for k in range(d):
            dv = vel[i, k] - vel[j, k]
            gsq += dv * dv
        g = math.sqrt(gsq)
        if g > lam:
            return ncoll, nann, m
        if acc_u[m] * lam >= g:     # accept with probability g / lam
            continue
        if ann_u[m] < alpha:
            alive[i] = 0
            alive[j] = 0
            nann += 1
        else:
            half = 0.5 * g
            for k in range(d):
                cen = 0.5 * (vel[i, k] + vel[j, k])
                off = half * sig[m, k]
                vel[i, k] = cen + off
                vel[j, k] = cen - off
            ncoll += 1
    return ncoll, nann, -1


try:
    import numba

    _candidate_loop_fast = numba.njit(cache=True)(_candidate_loop)
    HAVE_NUMBA = True
except ImportError:          # pragma: no cover - exercised only without numba
    _candidate_loop_fast = _candidate_loop
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SimState:
    """Everything needed to continue a run, checkpointable to a single file."""

    config: SimConfig
    weight: float
    velocities: np.ndarray      # (count, dim) float64, C order
    labels: np.ndarray          # (count,) uint8 batch labels fixed at creation
    gens: dict                  # {"ic": Generator, "analysis": Generator, "shards": [Generator]}
    t: float = 0.0
    tau: float = 0.0
    steps: int = 0
    collisions: int = 0
    annihilations: int = 0
    rate_majorant: float = 0.0
    snapshots_taken: int = 0
    last_record_t: float = 0.0
    last_record_y: float = 0.0  # tau integrand sqrt(2 T) n at the last record
    init_density: float = 0.0
    init_temperature: float = 0.0
    terminal: str = ""

    @property
    def count(self):
        return self.velocities.shape[0]

    @property
    def density(self):
        return self.weight * self.count

    @property
    def ensemble(self):
        return ParticleEnsemble(dim=self.config.dim, velocities=self.velocities,
                                weight=self.weight)


def _make_generators(seed, shards):
    """Frozen stream-splitting rule: SeedSequence(seed).spawn(3) gives the
    initial-condition, collision-parent and analysis streams, in that order;
    the collision parent spawns one child per shard."""
    root = np.random.SeedSequence(seed)
    ic_ss, coll_ss, ana_ss = root.spawn(3)
    return {
        "ic": np.random.Generator(np.random.PCG64(ic_ss)),
        "analysis": np.random.Generator(np.random.PCG64(ana_ss)),
        "shards": [np.random.Generator(np.random.PCG64(s))
                   for s in coll_ss.spawn(shards)],
    }


def _initial_velocities(cfg, rng):
    """Sample the configured initial condition, centered at u0 with mean
    temperature T0 (exact in expectation; the sample has MC scatter)."""
    n, d, T0 = cfg.particles, cfg.dim, cfg.T0
    if cfg.ic == "maxwellian":
        v = math.sqrt(T0) * rng.standard_normal((n, d))
    elif cfg.ic == "uniform_ball":
        radius = math.sqrt((d + 2.0) * T0)
        dirs = sample_sigma(d, rng, n)
        r = radius * rng.random(n) ** (1.0 / d)
        v = dirs * r[:, None]
    elif cfg.ic == "bimodal":
        split = cfg.bimodal_mass_split
        ratio = cfg.bimodal_temp_ratio
        t_cold = T0 / (1.0 + split * (ratio - 1.0))
        t_hot = ratio * t_cold
        n_hot = int(round(split * n))
        v = np.empty((n, d))
        v[:n_hot] = math.sqrt(t_hot) * rng.standard_normal((n_hot, d))
        v[n_hot:] = math.sqrt(t_cold) * rng.standard_normal((n - n_hot, d))
    elif cfg.ic == "anisotropic":
        ratio = cfg.anisotropy_ratio
        t_rest = d * T0 / (ratio + d - 1.0)
        scales = np.full(d, math.sqrt(t_rest))
        scales[0] = math.sqrt(ratio * t_rest)
        v = scales[None, :] * rng.standard_normal((n, d))
    else:  # pragma: no cover - caught by SimConfig.validate
        raise ValueError("unknown ic %r" % cfg.ic)
    if cfg.u0:
        v += np.asarray(cfg.u0, dtype=np.float64)[None, :]
    return np.ascontiguousarray(v)


def init_state(config):
    """Validate the config, sample the initial condition, set up RNG streams."""
    config.validate()
    gens = _make_generators(config.seed, config.shards)
    vel = _initial_velocities(config, gens["ic"])
    labels = (np.arange(config.particles) % config.batches).astype(np.uint8)
    weight = config.n0 / config.particles
    state = SimState(config=config, weight=weight, velocities=vel,
                     labels=labels, gens=gens)
    rec = compute_moments(state.ensemble)
    state.init_density = weight * config.particles
    state.init_temperature = rec.T
    state.last_record_t = 0.0
    state.last_record_y = rec.n * math.sqrt(2.0 * rec.T)
    return state


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def _split_candidates(total, shards):
    base, rem = divmod(total, shards)
    return [base + (1 if s < rem else 0) for s in range(shards)]


def _choose_dt(cfg, count, weight, sbar):
    """accepted-target policy: pick dt so the expected accepted pairs per
    step is accepted_fraction * count, using sqrt(2) * mean deviation speed
    as the mean relative speed (exact for a Maxwellian)."""
    if cfg.dt_policy == "fixed":
        return cfg.dt_fixed
    target = cfg.accepted_fraction * count
    denom = 0.5 * weight * count * (count - 1) * math.sqrt(2.0) * sbar
    return target / denom


def step(state, dt=None, alpha=None, rng=None):
    """Advance one NTC step.

    dt defaults to the config's dt policy, alpha to the config's alpha, rng
    to the state's shard generators (a single Generator or a list is
    accepted).  Degenerate states (fewer than 2 particles, or zero
    temperature so no collisions can ever fire) set state.terminal instead
    of raising.  Mutates and returns state.
    """
    cfg = state.config
    if state.terminal:
        return state
    if state.count < 2:
        state.terminal = "too-few-particles"
        return state
    if alpha is None:
        alpha = cfg.alpha
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")

    vel = state.velocities
    count = vel.shape[0]
    u = vel.mean(axis=0)
    c = vel - u
    speeds = np.sqrt(np.einsum("ij,ij->i", c, c))
    smax = float(speeds.max())
    sbar = float(speeds.mean())
    if sbar <= 0.0:
        state.terminal = "degenerate-temperature"
        return state

    if dt is None:
        dt = _choose_dt(cfg, count, state.weight, sbar)
    if not (dt > 0.0):
        raise ValueError("dt must be positive, got %r" % dt)

    lam = 2.0 * smax + cfg.majorant_pad
    m_cand = int(math.ceil(0.5 * state.weight * count * (count - 1) * lam * dt))

    if rng is None:
        gens = state.gens["shards"]
    elif isinstance(rng, (list, tuple)):
        gens = list(rng)
    else:
        gens = [rng]

    ncoll = 0
    nann = 0
    if m_cand > 0:
        blocks_i, blocks_j, blocks_a, blocks_n, blocks_s = [], [], [], [], []
        for g, m in zip(gens, _split_candidates(m_cand, len(gens))):
            if m == 0:
                continue
            i = g.integers(0, count, m)
            jr = g.integers(0, count - 1, m)
            blocks_i.append(i)
            blocks_j.append(jr + (jr >= i))   # uniform over j != i
            blocks_a.append(g.random(m))
            blocks_n.append(g.random(m))
            blocks_s.append(sample_sigma(cfg.dim, g, m))
        idx_i = np.ascontiguousarray(np.concatenate(blocks_i))
        idx_j = np.ascontiguousarray(np.concatenate(blocks_j))
        acc_u = np.ascontiguousarray(np.concatenate(blocks_a))
        ann_u = np.ascontiguousarray(np.concatenate(blocks_n))
        sig = np.ascontiguousarray(np.concatenate(blocks_s))
        alive = np.ones(count, dtype=np.uint8)
        ncoll, nann, viol = _candidate_loop_fast(
            vel, alive, idx_i, idx_j, acc_u, ann_u, sig, float(alpha), lam)
        if viol >= 0:
            i, j = idx_i[viol], idx_j[viol]
            g_bad = float(np.linalg.norm(vel[i] - vel[j]))
            raise MajorantViolationError(state.steps, int(viol), g_bad, lam)
        if nann:
            keep = alive.view(np.bool_)
            state.velocities = vel[keep]
            state.labels = state.labels[keep]

    state.rate_majorant = lam
    state.collisions += ncoll
    state.annihilations += 2 * nann
    state.t += dt
    state.steps += 1
    return state


# ---------------------------------------------------------------------------
# tau accumulation
# ---------------------------------------------------------------------------

def _trapezoid_piece(y0, y1, t0, t1):
    return 0.5 * (y0 + y1) * (t1 - t0)


def tau_accumulate(records):
    """Rescaled times tau(t_k) = sqrt(2) * trapezoid of n sqrt(T) over the
    record grid, one value per record, tau(t_0) = 0.

    run() stamps tau incrementally with the exact same arithmetic, so this
    batch form reproduces a trajectory's stored tau values bit for bit.
    """
    taus = np.empty(len(records))
    prev_t = None
    prev_y = 0.0
    acc = 0.0
    for k, rec in enumerate(records):
        y = rec.n * math.sqrt(2.0 * rec.T)
        if prev_t is not None:
            if rec.t < prev_t:
                raise ValueError("records are not time-ordered")
            acc += _trapezoid_piece(prev_y, y, prev_t, rec.t)
        taus[k] = acc
        prev_t, prev_y = rec.t, y
    return taus


# ---------------------------------------------------------------------------
# recording / snapshots / run loop
# ---------------------------------------------------------------------------

def _record_now(state, traj):
    rec = compute_moments(state.ensemble)
    rec.t = state.t
    y = rec.n * math.sqrt(2.0 * rec.T)
    state.tau += _trapezoid_piece(state.last_record_y, y, state.last_record_t, rec.t)
    rec.tau = state.tau
    state.last_record_t = rec.t
    state.last_record_y = y
    sig = batch_moment_sigma(state.velocities, state.weight, state.labels,
                             state.config.batches)
    traj.records.append(rec)
    traj.record_sigmas.append(sig)
    return rec


def _moment_tables(speeds, weight, labels, nbatch, grid):
    moments = np.empty(grid.size)
    batches = np.empty((nbatch, grid.size))
    for k, s in enumerate(grid):
        pw = speeds ** s
        moments[k] = weight * float(np.sum(pw))
        batches[:, k] = weight * nbatch * np.bincount(labels, weights=pw,
                                                      minlength=nbatch)
    return moments, batches


def _take_snapshot(state, traj, rec):
    cfg = state.config
    if rec.T <= 0.0:
        return
    psi = to_selfsimilar(state.ensemble)
    coeffs = estimate_coefficients(psi, cfg.alpha, cfg.pair_samples,
                                   state.gens["analysis"])
    hist, batch_rho = profile_mod.radial_histogram(
        psi, cfg.hist_bins, cfg.hist_rmax, state.labels, cfg.batches)
    H = diagnostics.entropy(hist)
    hb = np.empty(cfg.batches)
    for b in range(cfg.batches):
        hist_b = RadialHistogram(dim=cfg.dim, edges=hist.edges,
                                 density=batch_rho[b])
        hb[b] = diagnostics.entropy(hist_b, check_mass=False)
    sigma_h = float(np.std(hb, ddof=1)) / math.sqrt(cfg.batches)

    speeds = np.sqrt(np.einsum("ij,ij->i", psi.velocities, psi.velocities))
    expw = cfg.tail_weight
    expvals = np.exp(expw * speeds)
    expm = psi.weight * float(np.sum(expvals))
    eb = psi.weight * cfg.batches * np.bincount(state.labels, weights=expvals,
                                                minlength=cfg.batches)
    sigma_exp = float(np.std(eb, ddof=1)) / math.sqrt(cfg.batches)

    grid = np.arange(0.0, cfg.moment_grid_max + 1e-9, 0.5)
    moments, batch_moments = _moment_tables(speeds, psi.weight, state.labels,
                                            cfg.batches, grid)

    traj.snapshots.append(Snapshot(
        t=state.t, tau=state.tau, count=state.count, n=rec.n, T=rec.T,
        hist=hist, coeffs=coeffs, entropy=H, entropy_sigma=sigma_h,
        exp_weight=expw, exp_moment=expm, exp_moment_sigma=sigma_exp,
        moment_grid=grid, moments=moments, batch_moments=batch_moments))
    state.snapshots_taken = max(state.snapshots_taken + 1,
                                int(state.tau / cfg.snapshot_tau_interval) + 1)


def _maybe_snapshot(state, traj, rec):
    due = state.tau >= state.snapshots_taken * state.config.snapshot_tau_interval
    if state.snapshots_taken == 0 or due:
        _take_snapshot(state, traj, rec)


def _stop_reason(state, cfg):
    if state.terminal:
        return state.terminal
    if state.count < cfg.min_particles:
        return "min-particles"
    if cfg.n_floor_fraction > 0.0 and \
            state.density <= cfg.n_floor_fraction * state.init_density:
        return "density-floor"
    if state.t >= cfg.t_end:
        return "t-end"
    if state.tau >= cfg.tau_end:
        return "tau-end"
    if state.steps >= cfg.max_steps:
        return "max-steps"
    return ""


def run(config=None, state=None, checkpoint_path=None):
    """Drive step() until a stop condition, collecting a Trajectory.

    Pass exactly one of config (fresh run) or state (resume).  Records are
    appended every record_interval steps; rescaled snapshots are taken at
    every crossing of snapshot_tau_interval in tau.  Stop conditions, checked
    between steps: terminal state flags, count < min_particles, density at or
    below n_floor_fraction * initial, t_end, tau_end, max_steps.  Fully
    deterministic for fixed (seed, shards).
    """
    if (config is None) == (state is None):
        raise ValueError("pass exactly one of config or state")
    if state is None:
        state = init_state(config)
    cfg = state.config
    traj = Trajectory(config=cfg)
    if state.steps == 0:
        rec = _record_now(state, traj)
        _maybe_snapshot(state, traj, rec)
    while True:
        reason = _stop_reason(state, cfg)
        if reason:
            traj.termination = reason
            break
        step(state)
        if state.terminal:
            continue
        if state.steps % cfg.record_interval == 0:
            rec = _record_now(state, traj)
            _maybe_snapshot(state, traj, rec)
        if checkpoint_path and cfg.checkpoint_interval \
                and state.steps % cfg.checkpoint_interval == 0:
            save_checkpoint(state, checkpoint_path)
    traj.steps = state.steps
    traj.collisions = state.collisions
    traj.annihilations = state.annihilations
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return traj


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_MAGIC = b"ANNKINC1"


def save_checkpoint(state, path):
    """Versioned binary checkpoint: magic, JSON header (config echo, scalar
    state, all RNG stream states), then velocities as little-endian float64
    and batch labels as bytes.  Exact round-trip."""
    header = {
        "version": 1,
        "dim": state.config.dim,
        "alpha": state.config.alpha,
        "weight": state.weight,
        "count": int(state.count),
        "t": state.t,
        "tau": state.tau,
        "steps": state.steps,
        "collisions": state.collisions,
        "annihilations": state.annihilations,
        "rate_majorant": state.rate_majorant,
        "snapshots_taken": state.snapshots_taken,
        "last_record_t": state.last_record_t,
        "last_record_y": state.last_record_y,
        "init_density": state.init_density,
        "init_temperature": state.init_temperature,
        "terminal": state.terminal,
        "config": state.config.as_dict(),
        "rng": {
            "ic": state.gens["ic"].bit_generator.state,
            "analysis": state.gens["analysis"].bit_generator.state,
            "shards": [g.bit_generator.state for g in state.gens["shards"]],
        },
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(state.velocities, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(state.labels, dtype=np.uint8).tobytes())


def _restore_generator(saved_state):
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = saved_state
    return gen


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns a SimState that continues the run
    bit-identically to one that never stopped."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header["version"] != 1:
        raise ValueError("unsupported checkpoint version %r" % header["version"])
    cfg = SimConfig.from_dict(header["config"])
    count, dim = header["count"], header["dim"]
    off = 12 + hlen
    nbytes = count * dim * 8
    vel = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(count, dim)
    labels = np.frombuffer(data[off + nbytes:off + nbytes + count], dtype=np.uint8)
    gens = {
        "ic": _restore_generator(header["rng"]["ic"]),
        "analysis": _restore_generator(header["rng"]["analysis"]),
        "shards": [_restore_generator(s) for s in header["rng"]["shards"]],
    }
    return SimState(
        config=cfg, weight=header["weight"],
        velocities=np.ascontiguousarray(vel.astype(np.float64)),
        labels=labels.copy(), gens=gens, t=header["t"], tau=header["tau"],
        steps=header["steps"], collisions=header["collisions"],
        annihilations=header["annihilations"],
        rate_majorant=header["rate_majorant"],
        snapshots_taken=header["snapshots_taken"],
        last_record_t=header["last_record_t"],
        last_record_y=header["last_record_y"],
        init_density=header["init_density"],
        init_temperature=header["init_temperature"],
        terminal=header["terminal"],
    )


def resume_config(state, **overrides):
    """Convenience for resume flows: a copy of the state's config with new
    stopping conditions (t_end, tau_end, ...), validated."""
    cfg = replace(state.config, **overrides)
    cfg.validate()
    state.config = cfg
    return state
