"""Data model and moment computation for the annihilating hard-sphere gas.

Ensembles are weighted particle systems in velocity space: ``count``
simulation particles of equal statistical weight ``weight`` stand in for a
number density ``n = weight * count``.  All moments here are moments of the
underlying density (weight included), not per-particle averages.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np

__all__ = [
    "ConfigError",
    "ParticleEnsemble",
    "MomentRecord",
    "MomentSigma",
    "CoefficientSet",
    "RadialHistogram",
    "Snapshot",
    "Trajectory",
    "SimConfig",
    "compute_moments",
    "batch_moment_sigma",
    "jensen_check",
]


class ConfigError(ValueError):
    """Raised when a SimConfig fails validation."""


# ---------------------------------------------------------------------------
# ensembles and moments
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ParticleEnsemble:
    """A uniformly weighted particle system in d-dimensional velocity space.

    velocities has shape (count, dim), float64.  weight is the statistical
    weight per particle, so number density is weight * count.
    """

    dim: int
    velocities: np.ndarray
    weight: float

    def __post_init__(self):
        self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float64)
        if self.dim < 2:
            raise ValueError("dim must be >= 2, got %d" % self.dim)
        if self.velocities.ndim != 2 or self.velocities.shape[1] != self.dim:
            raise ValueError(
                "velocities must have shape (count, %d), got %r"
                % (self.dim, self.velocities.shape)
            )
        if not (self.weight > 0.0) or not math.isfinite(self.weight):
            raise ValueError("weight must be positive and finite, got %r" % self.weight)
        if self.velocities.size and not np.all(np.isfinite(self.velocities)):
            raise ValueError("velocities contain non-finite entries")

    @property
    def count(self):
        return self.velocities.shape[0]

    @property
    def density(self):
        return self.weight * self.count


@dataclass(eq=False)
class MomentRecord:
    """Scalar summary of an ensemble at one instant.

    n     number density (weight * count)
    u     bulk velocity, shape (dim,)
    T     kinetic temperature, defined by d*n*T = weight * sum |v_i - u|^2
    m1    first absolute centered moment, weight * sum |v_i - u|
    m3    third absolute centered moment, weight * sum |v_i - u|^3

    t and tau are left NaN by compute_moments; the simulation loop stamps them.
    """

    t: float
    tau: float
    n: float
    u: np.ndarray
    T: float
    m1: float
    m3: float


@dataclass(eq=False)
class MomentSigma:
    """Batch-means standard errors attached to a MomentRecord.

    E is the product d * n^2 * T (the natural Lyapunov product for this gas);
    its error is estimated from the same batches as the others.
    """

    n: float
    T: float
    m1: float
    E: float


def compute_moments(ensemble):
    """Weighted moments of an ensemble.  Leaves t and tau as NaN.

    Raises ValueError on an empty ensemble.  A single particle gives T = 0.
    """
    v = ensemble.velocities
    count = v.shape[0]
    if count == 0:
        raise ValueError("cannot compute moments of an empty ensemble")
    w = ensemble.weight
    d = ensemble.dim
    u = v.mean(axis=0)
    c = v - u
    speeds = np.sqrt(np.einsum("ij,ij->i", c, c))
    n = w * count
    T = w * float(np.sum(speeds * speeds)) / (d * n)
    m1 = w * float(np.sum(speeds))
    m3 = w * float(np.sum(speeds**3))
    return MomentRecord(t=math.nan, tau=math.nan, n=n, u=u, T=T, m1=m1, m3=m3)


def batch_moment_sigma(velocities, weight, labels, nbatch):
    """Standard errors of n, T, m1 and E = d n^2 T by the method of batch means.

    labels assigns each particle to one of nbatch statistically equivalent
    sub-ensembles fixed at creation time.  Each batch is scaled up by nbatch
    so it estimates the same physical density as the full system; the spread
    of the batch estimates then includes the count fluctuations that pair
    annihilation induces.  Returns a MomentSigma (standard error of the mean,
    i.e. batch std / sqrt(nbatch)).
    """
    v = velocities
    d = v.shape[1]
    ns = np.empty(nbatch)
    Ts = np.empty(nbatch)
    m1s = np.empty(nbatch)
    for b in range(nbatch):
        sel = labels == b
        cnt = int(np.count_nonzero(sel))
        nb = weight * nbatch * cnt
        ns[b] = nb
        if cnt == 0:
            Ts[b] = 0.0
            m1s[b] = 0.0
            continue
        vb = v[sel]
        ub = vb.mean(axis=0)
        cb = vb - ub
        sp = np.sqrt(np.einsum("ij,ij->i", cb, cb))
        Ts[b] = weight * nbatch * float(np.sum(sp * sp)) / (d * nb)
        m1s[b] = weight * nbatch * float(np.sum(sp))
    Es = d * ns * ns * Ts
    root = math.sqrt(nbatch)
    return MomentSigma(
        n=float(np.std(ns, ddof=1)) / root,
        T=float(np.std(Ts, ddof=1)) / root,
        m1=float(np.std(m1s, ddof=1)) / root,
        E=float(np.std(Es, ddof=1)) / root,
    )


def jensen_check(ensemble, chunk=512):
    """min_i [ mean_j |v_i - v_j| / |v_i - u| ] over the ensemble.

    The inner mean runs over all j including i (the i = j term contributes
    zero), so by Jensen's inequality applied to the empirical measure the
    ratio is >= 1 for every i up to rounding.  Particles sitting exactly at
    the bulk velocity are skipped; returns inf if every particle does.

    O(count^2) work, chunked to bound memory; meant for diagnostic use.
    """
    v = ensemble.velocities
    count = v.shape[0]
    if count == 0:
        raise ValueError("cannot run jensen_check on an empty ensemble")
    u = v.mean(axis=0)
    dev = np.sqrt(np.einsum("ij,ij->i", v - u, v - u))
    best = math.inf
    for lo in range(0, count, chunk):
        hi = min(lo + chunk, count)
        block = v[lo:hi]
        # pairwise distances from this chunk to everything
        diff = block[:, None, :] - v[None, :, :]
        dist = np.sqrt(np.einsum("abj,abj->ab", diff, diff))
        means = dist.mean(axis=1)
        denom = dev[lo:hi]
        ok = denom > 0.0
        if np.any(ok):
            ratio = means[ok] / denom[ok]
            best = min(best, float(ratio.min()))
    return best


# ---------------------------------------------------------------------------
# analysis containers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CoefficientSet:
    """Pair-averaged transport coefficients of a rescaled ensemble.

    a   mean relative speed E|xi - xi*|
    b   (1/d) E[(|xi|^2 + |xi*|^2) |xi - xi*|]
    Bv  vector -alpha * E[((xi + xi*)/2) |xi - xi*|], shape (dim,)
    B   alpha * (b - a) / 2       (temperature decay coefficient)
    A   d * B - alpha * a         (density decay coefficient, negative)

    stderr_a / stderr_b are pair-resampling standard errors when the
    coefficients were estimated by Monte Carlo (0.0 when pairs were
    enumerated exactly — the estimator is then deterministic given the
    ensemble).
    """

    A: float
    B: float
    Bv: np.ndarray
    a: float
    b: float
    alpha: float
    stderr_a: float = 0.0
    stderr_b: float = 0.0


@dataclass(eq=False)
class RadialHistogram:
    """Isotropic radial profile of a rescaled velocity distribution.

    edges has K+1 ascending entries starting at 0; density[k] is the average
    of the d-dimensional distribution over shell k, so that
    sum_k density[k] * shellvol[k] equals the represented mass.
    """

    dim: int
    edges: np.ndarray
    density: np.ndarray
    stderr: np.ndarray = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        if self.edges.ndim != 1 or self.edges.size < 2:
            raise ValueError("edges must be a 1-D array with at least 2 entries")
        if self.edges[0] != 0.0 or np.any(np.diff(self.edges) <= 0.0):
            raise ValueError("edges must start at 0 and increase strictly")
        if self.density.shape != (self.edges.size - 1,):
            raise ValueError("density must have one entry per bin")
        if self.stderr is not None:
            self.stderr = np.asarray(self.stderr, dtype=np.float64)
            if self.stderr.shape != self.density.shape:
                raise ValueError("stderr must match density in shape")

    @property
    def r_mid(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def shell_volumes(self):
        """Volume of each shell in R^d: V_d(r1) - V_d(r0), V_d(r) = pi^{d/2} r^d / Gamma(d/2+1)."""
        d = self.dim
        vd = math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)
        return vd * (self.edges[1:] ** d - self.edges[:-1] ** d)

    def mass(self):
        return float(np.sum(self.density * self.shell_volumes))


@dataclass(eq=False)
class Snapshot:
    """Rescaled-frame analysis output attached to one instant of a run.

    n and T are the physical-frame density and temperature measured at the
    same step, so reconstruction checks can compare against the snapshot grid
    without interpolating.
    """

    t: float
    tau: float
    count: int
    n: float
    T: float
    hist: RadialHistogram
    coeffs: CoefficientSet
    entropy: float
    entropy_sigma: float
    exp_weight: float
    exp_moment: float
    exp_moment_sigma: float
    moment_grid: np.ndarray      # exponents s
    moments: np.ndarray          # m_s of the rescaled ensemble
    batch_moments: np.ndarray    # (nbatch, len(grid)) per-batch m_s


@dataclass(eq=False)
class Trajectory:
    """Everything a simulation run produces, in memory."""

    config: "SimConfig"
    records: list = field(default_factory=list)        # MomentRecord
    record_sigmas: list = field(default_factory=list)  # MomentSigma
    snapshots: list = field(default_factory=list)      # Snapshot
    collisions: int = 0
    annihilations: int = 0
    steps: int = 0
    termination: str = ""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_IC_NAMES = ("maxwellian", "uniform_ball", "bimodal", "anisotropic")
_DT_POLICIES = ("accepted-target", "fixed")


@dataclass
class SimConfig:
    """Flat knob set for a simulation run.

    Every field can be set from a ``key = value`` config file or a
    ``key=value`` command line override; see cli.config_help().
    """

    dim: int = 3
    alpha: float = 0.05
    particles: int = 100_000
    seed: int = 12345
    shards: int = 1

    ic: str = "maxwellian"
    n0: float = 1.0
    T0: float = 0.5
    u0: tuple = ()                  # empty means rest frame
    bimodal_temp_ratio: float = 4.0
    bimodal_mass_split: float = 0.5
    anisotropy_ratio: float = 4.0   # first-axis temperature over the others

    dt_policy: str = "accepted-target"
    dt_fixed: float = 0.0
    accepted_fraction: float = 0.1  # target accepted pairs per step, as a share of count
    majorant_pad: float = 1e-9

    t_end: float = math.inf
    tau_end: float = math.inf
    max_steps: int = 10_000_000
    n_floor_fraction: float = 0.0   # stop when n < fraction * n0 (0 disables)
    min_particles: int = 1000

    record_interval: int = 1        # steps between moment records
    snapshot_tau_interval: float = 0.5
    batches: int = 16

    hist_bins: int = 120
    hist_rmax: float = 6.0
    tail_weight: float = 0.5        # exponent weight a in exp(a |xi|)
    pair_samples: int = 1_000_000
    moment_grid_max: float = 6.0    # half-integer moment table runs over [0, max]

    checkpoint_interval: int = 0    # steps; 0 writes no mid-run checkpoints

    def validate(self):
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if not (0.0 <= self.alpha < 1.0):
            raise ConfigError("alpha must lie in [0, 1)")
        if self.particles < 2:
            raise ConfigError("particles must be >= 2")
        if self.shards < 1:
            raise ConfigError("shards must be >= 1")
        if self.ic not in _IC_NAMES:
            raise ConfigError("unknown ic %r (choose from %s)" % (self.ic, ", ".join(_IC_NAMES)))
        if not (self.n0 > 0.0):
            raise ConfigError("n0 must be positive")
        if not (self.T0 > 0.0):
            raise ConfigError("T0 must be positive")
        if self.u0 and len(self.u0) != self.dim:
            raise ConfigError("u0 must have dim components")
        if self.dt_policy not in _DT_POLICIES:
            raise ConfigError("unknown dt_policy %r" % self.dt_policy)
        if self.dt_policy == "fixed" and not (self.dt_fixed > 0.0):
            raise ConfigError("dt_fixed must be positive under the fixed policy")
        if not (self.accepted_fraction > 0.0):
            raise ConfigError("accepted_fraction must be positive")
        if not (0.0 <= self.n_floor_fraction < 1.0):
            raise ConfigError("n_floor_fraction must lie in [0, 1)")
        if self.min_particles < 2:
            raise ConfigError("min_particles must be >= 2")
        if self.record_interval < 1:
            raise ConfigError("record_interval must be >= 1")
        if not (self.snapshot_tau_interval > 0.0):
            raise ConfigError("snapshot_tau_interval must be positive")
        if not (2 <= self.batches <= 255):
            raise ConfigError("batches must lie in [2, 255] (labels are stored as uint8)")
        if self.hist_bins < 2:
            raise ConfigError("hist_bins must be >= 2")
        if not (self.hist_rmax > 0.0):
            raise ConfigError("hist_rmax must be positive")
        if not (self.tail_weight > 0.0):
            raise ConfigError("tail_weight must be positive")
        if self.pair_samples < 1:
            raise ConfigError("pair_samples must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if math.isinf(self.t_end) and math.isinf(self.tau_end) \
                and self.n_floor_fraction == 0.0 and self.max_steps >= 10_000_000:
            raise ConfigError("no stopping condition set (t_end, tau_end, n_floor_fraction or max_steps)")
        return self

    def as_dict(self):
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = list(val)
            out[f.name] = val
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in data.items():
            if key not in known:
                raise ConfigError("unknown config key %r" % key)
            if known[key].name == "u0":
                val = tuple(float(x) for x in val)
            kwargs[key] = val
        return cls(**kwargs)
