"""Radial profile extraction and profile-based decay-rate predictions.

The self-similar attractor is radially symmetric, so rescaled ensembles are
summarized as radial histograms (shell-averaged densities).  Pair integrals
of a radial density reduce to 2-D radial quadrature against the
angle-averaged relative-speed kernel k_d(r, s).
"""

import math

import numpy as np
from scipy import special

from .core import CoefficientSet, RadialHistogram
from .collision import sphere_area

__all__ = [
    "radial_histogram",
    "binned_maxwellian",
    "extract_profile",
    "profile_distance",
    "chord_kernel",
    "profile_coefficients",
    "predicted_rates",
]

DEFAULT_BINS = 120
DEFAULT_RMAX = 6.0   # Gaussian mass beyond |xi| = 6 is < 1e-14 for d <= 4


def radial_histogram(psi, bins=DEFAULT_BINS, rmax=DEFAULT_RMAX,
                     labels=None, nbatch=16):
    """Bin a rescaled ensemble into a RadialHistogram on [0, rmax].

    Density is per unit velocity-space volume (counts over shell volume), so
    integrating against shell volumes recovers the binned mass.  If batch
    labels are given, per-bin standard errors come from the spread of the
    nbatch scaled sub-ensemble histograms (returned as the second value,
    shape (nbatch, bins)); otherwise a Poisson estimate is used and the
    second value is None.
    """
    v = psi.velocities
    d = psi.dim
    speeds = np.sqrt(np.einsum("ij,ij->i", v, v))
    edges = np.linspace(0.0, rmax, bins + 1)
    counts, _ = np.histogram(speeds, edges)
    vd = math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)
    vols = vd * (edges[1:] ** d - edges[:-1] ** d)
    density = psi.weight * counts / vols
    if labels is None:
        stderr = psi.weight * np.sqrt(counts) / vols
        batch_density = None
    else:
        batch_density = np.empty((nbatch, bins))
        for b in range(nbatch):
            cb, _ = np.histogram(speeds[labels == b], edges)
            batch_density[b] = psi.weight * nbatch * cb / vols
        stderr = np.std(batch_density, axis=0, ddof=1) / math.sqrt(nbatch)
    return RadialHistogram(dim=d, edges=edges, density=density,
                           stderr=stderr), batch_density


def binned_maxwellian(dim, edges):
    """Exact bin-averaged densities of the unit Gaussian on a radial grid.

    The Gaussian mass inside radius r is the regularized incomplete gamma
    P(d/2, r^2); bin-averaged density is the mass difference over the shell
    volume, which is the correct discretization to compare histograms
    against (no midpoint bias).
    """
    edges = np.asarray(edges, dtype=np.float64)
    mass = special.gammainc(dim / 2.0, edges**2)
    vd = math.pi ** (dim / 2.0) / math.gamma(dim / 2.0 + 1.0)
    vols = vd * (edges[1:] ** dim - edges[:-1] ** dim)
    return np.diff(mass) / vols


def extract_profile(snapshots, burn_in_tau=6.0):
    """Average the rescaled histograms of all snapshots past a burn-in tau.

    Needs at least 2 tail snapshots on a common grid; per-bin standard
    errors are the across-snapshot spread of the mean (consecutive snapshots
    are mildly correlated, so these errors are slightly optimistic — the
    comparison budgets downstream leave headroom for that).
    """
    tail = [s for s in snapshots if s.tau >= burn_in_tau]
    if len(tail) < 2:
        raise ValueError("need >= 2 snapshots past burn_in_tau = %g (have %d)"
                         % (burn_in_tau, len(tail)))
    edges = tail[0].hist.edges
    for s in tail[1:]:
        if s.hist.edges.shape != edges.shape or np.any(s.hist.edges != edges):
            raise ValueError("snapshots use different radial grids")
    stack = np.stack([s.hist.density for s in tail])
    density = stack.mean(axis=0)
    stderr = np.std(stack, axis=0, ddof=1) / math.sqrt(len(tail))
    return RadialHistogram(dim=tail[0].hist.dim, edges=edges,
                           density=density, stderr=stderr)


def profile_distance(h1, h2="maxwellian", a=0.0):
    """Tail-weighted L1 distance between two radial profiles.

    sum over bins of |rho1 - rho2| * exp(a * r_mid) * shell volume.  h2 may
    be a RadialHistogram on the same grid or the string "maxwellian", which
    compares against the exactly bin-averaged unit Gaussian.
    """
    if a < 0.0:
        raise ValueError("tail weight a must be >= 0")
    if isinstance(h2, str):
        if h2 != "maxwellian":
            raise ValueError("unknown analytic reference %r" % h2)
        rho2 = binned_maxwellian(h1.dim, h1.edges)
    else:
        if h1.dim != h2.dim or h1.edges.shape != h2.edges.shape \
                or np.any(h1.edges != h2.edges):
            raise ValueError("histogram grids do not match")
        rho2 = h2.density
    weight = np.exp(a * h1.r_mid)
    return float(np.sum(np.abs(h1.density - rho2) * weight * h1.shell_volumes))


# ---------------------------------------------------------------------------
# angle-averaged kernel and profile coefficients
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def chord_kernel(r, s, dim):
    """Angle average of |xi - xi*| for |xi| = r, |xi*| = s.

    k_d(r, s) = C_d int_{-1}^{1} sqrt(r^2 + s^2 - 2 r s c) (1-c^2)^{(d-3)/2} dc
    with C_d = |S^{d-2}|/|S^{d-1}|, evaluated by 64-node Gauss-Legendre in c.
    In d = 3 the closed form is ((r+s)^3 - |r-s|^3) / (6 r s).  r and s
    broadcast against each other.
    """
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    cd = sphere_area(dim - 2) / sphere_area(dim - 1)
    out = np.zeros(np.broadcast(r, s).shape)
    rsq = r * r + s * s
    rs2 = 2.0 * r * s
    for c, w in zip(_GL_NODES, _GL_WEIGHTS):
        wgt = w if dim == 3 else w * (1.0 - c * c) ** ((dim - 3) / 2.0)
        out += wgt * np.sqrt(np.maximum(rsq - rs2 * c, 0.0))
    return cd * out


def chord_kernel_d3_closed(r, s):
    """Closed form of chord_kernel for d = 3 (cross-check oracle)."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    small = np.minimum(r, s)
    big = np.maximum(r, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = ((r + s) ** 3 - np.abs(r - s) ** 3) / (6.0 * r * s)
    # limits: one argument 0 -> the other radius; both 0 -> 0
    val = np.where(small == 0.0, big, val)
    return val


def _bin_nodes(edges, dim, per_bin=4):
    """Gauss-Legendre nodes/weights per bin, with the r^{d-1}|S^{d-1}| measure
    folded into the weights.  Returns (radii, measure_weights) flattened."""
    x, w = np.polynomial.legendre.leggauss(per_bin)
    lo = edges[:-1][:, None]
    hi = edges[1:][:, None]
    r = 0.5 * (hi - lo) * x[None, :] + 0.5 * (hi + lo)
    wt = 0.5 * (hi - lo) * w[None, :] * r ** (dim - 1) * sphere_area(dim - 1)
    return r.ravel(), wt.ravel()


def profile_coefficients(hist, alpha, per_bin=4):
    """Pair coefficients (a, b, A, B) of a piecewise-constant radial profile.

    For a radial density rho(|xi|) the pair integrals collapse to

        a = int int rho(r) rho(s) k_d(r, s) dmu(r) dmu(s),
        b = (1/d) int int rho rho (r^2 + s^2) k_d(r, s) dmu dmu,

    with dmu = |S^{d-1}| r^{d-1} dr, evaluated by per-bin Gauss-Legendre on
    the histogram's grid.  Bv is exactly 0 by radial symmetry; A and B come
    from the same linear identities as estimate_coefficients.
    """
    mass = hist.mass()
    if abs(mass - 1.0) > 0.02:
        raise ValueError("profile not normalized (mass = %.6f)" % mass)
    d = hist.dim
    r, wt = _bin_nodes(hist.edges, d, per_bin)
    rho = np.repeat(hist.density, per_bin)
    f = wt * rho                       # quadrature weight of each node
    k = chord_kernel(r[:, None], r[None, :], d)
    a = float(f @ k @ f)
    rsq = r * r
    # (r^2 + s^2) k  contracted in two symmetric halves
    b = float(2.0 * (f * rsq) @ k @ f) / d
    B = alpha * (b - a) / 2.0
    A = d * B - alpha * a
    return CoefficientSet(A=A, B=B, Bv=np.zeros(d), a=a, b=b, alpha=alpha)


def predicted_rates(coeffs):
    """Universal-decay predictions from a CoefficientSet.

    density_exp     = 2 a / (a + b)     (n decays like t^-density_exp)
    temperature_exp = 2 (b - a) / (a + b)
    tau_prefactor   = 2 / (alpha (a + b))   (tau ~ prefactor * log t late)

    Raises for alpha = 0 (no decay: tau_prefactor undefined) and a + b <= 0.
    """
    a, b = coeffs.a, coeffs.b
    if a + b <= 0.0:
        raise ValueError("a + b must be positive")
    if coeffs.alpha == 0.0:
        raise ValueError("tau_prefactor undefined for alpha = 0 (no decay)")
    return {
        "density_exp": 2.0 * a / (a + b),
        "temperature_exp": 2.0 * (b - a) / (a + b),
        "tau_prefactor": 2.0 / (coeffs.alpha * (a + b)),
    }
