"""Run-level consistency checks and scaling-law fits.

Everything here consumes simulation output (Trajectory, Snapshot,
RadialHistogram) and returns plain report dicts; nothing mutates state, and
no check raises on a physics violation — failures are flagged in the report
so callers decide how loud to be.  Hard errors are reserved for misuse
(wrong shapes, impossible parameters, numerical overflow).
"""

import math

import numpy as np
from scipy import integrate

from .collision import povzner_rho, sphere_area

__all__ = [
    "entropy",
    "entropy_floor",
    "entropy_production_residual",
    "exp_moment",
    "maxwellian_exp_moment",
    "fit_power_law",
    "fit_exp_decay",
    "compute_Ssp",
    "appmom_inequality_check",
    "product_bound_check",
    "m1_bound_check",
    "lower_bound_scan",
]


# ---------------------------------------------------------------------------
# entropy bookkeeping
# ---------------------------------------------------------------------------

def _gaussian_at_radius(r, dim):
    return math.pi ** (-dim / 2.0) * np.exp(-np.square(r))

def entropy(hist, check_mass=True):
    """Relative entropy of a radial profile against the unit Gaussian.

    H = sum_k density_k * log(density_k / G(r_mid_k)) * shellvol_k with the
    Gaussian evaluated literally at each bin midpoint and 0 log 0 = 0.
    H is meaningful for unit-mass profiles, so by default the represented
    mass must be within 0.02 of 1 (disable with check_mass=False, e.g. for
    batch sub-histograms whose scatter exceeds that).
    """
    if check_mass and abs(hist.mass() - 1.0) > 0.02:
        raise ValueError(
            "histogram mass %.4f is not within 0.02 of 1; pass "
            "check_mass=False to force" % hist.mass())
    rho = hist.density
    if np.any(rho < 0.0):
        raise ValueError("histogram density has negative entries")
    ref = _gaussian_at_radius(hist.r_mid, hist.dim)
    vol = hist.shell_volumes
    pos = rho > 0.0
    terms = rho[pos] * np.log(rho[pos] / ref[pos]) * vol[pos]
    return float(np.sum(terms))


def entropy_floor(hist):
    """Lower bound on entropy(hist) from the log-sum inequality.

    sum a_k log(a_k/b_k) >= A log(A/B) with A = sum a_k (the represented
    mass) and B = sum of the midpoint Gaussian masses; equality would need
    density proportional to the midpoint Gaussian in every bin.
    """
    a_tot = hist.mass()
    b_tot = float(np.sum(_gaussian_at_radius(hist.r_mid, hist.dim)
                         * hist.shell_volumes))
    if a_tot <= 0.0:
        return 0.0
    return a_tot * math.log(a_tot / b_tot)


def entropy_production_residual(snapshots):
    """Residual of the entropy balance between consecutive snapshots.

    In rescaled time the entropy of the rescaled profile obeys
    dH/dtau = (collisional production <= 0) + alpha * a * H, so the residual

        (H1 - H0)/dtau - alpha * abar * Hbar     (midpoint abar, Hbar)

    should be <= O(alpha) up to noise.  sigma propagates the per-snapshot
    entropy errors through the linear combination; intervals with dtau > 1
    are flagged coarse (the midpoint rule degrades).  Requires >= 2
    snapshots sharing one alpha.
    """
    if len(snapshots) < 2:
        raise ValueError("need at least 2 snapshots")
    alphas = {s.coeffs.alpha for s in snapshots}
    if len(alphas) != 1:
        raise ValueError("snapshots mix annihilation probabilities %r" % alphas)
    alpha = alphas.pop()
    m = len(snapshots) - 1
    tau_mid = np.empty(m)
    residual = np.empty(m)
    sigma = np.empty(m)
    coarse = np.empty(m, dtype=bool)
    for k in range(m):
        s0, s1 = snapshots[k], snapshots[k + 1]
        dtau = s1.tau - s0.tau
        if not (dtau > 0.0):
            raise ValueError("snapshots are not tau-ordered")
        abar = 0.5 * (s0.coeffs.a + s1.coeffs.a)
        hbar = 0.5 * (s0.entropy + s1.entropy)
        residual[k] = (s1.entropy - s0.entropy) / dtau - alpha * abar * hbar
        c1 = 1.0 / dtau - 0.5 * alpha * abar
        c0 = 1.0 / dtau + 0.5 * alpha * abar
        sigma[k] = math.sqrt((c1 * s1.entropy_sigma) ** 2
                             + (c0 * s0.entropy_sigma) ** 2)
        tau_mid[k] = 0.5 * (s0.tau + s1.tau)
        coarse[k] = dtau > 1.0
    return {"tau_mid": tau_mid, "residual": residual, "sigma": sigma,
            "coarse": coarse, "alpha": alpha}


# ---------------------------------------------------------------------------
# exponential tail moments
# ---------------------------------------------------------------------------

def exp_moment(ensemble, a):
    """weight * sum_i exp(a |v_i|) — the exponential tail functional.

    Refuses (ValueError) when a * max|v| would overflow float64 rather than
    returning inf.
    """
    if not (a >= 0.0) or not math.isfinite(a):
        raise ValueError("exponent weight a must be finite and >= 0")
    v = ensemble.velocities
    speeds = np.sqrt(np.einsum("ij,ij->i", v, v))
    if speeds.size and a * float(speeds.max()) > 700.0:
        raise ValueError("exp moment overflows float64: a * max|v| = %.3g"
                         % (a * float(speeds.max())))
    return ensemble.weight * float(np.sum(np.exp(a * speeds)))


def maxwellian_exp_moment(a, dim):
    """int G(xi) exp(a |xi|) dxi for the unit Gaussian, by radial quadrature.

    Equals |S^{d-1}| pi^{-d/2} int_0^inf r^{d-1} exp(-r^2 + a r) dr.
    """
    if not (a >= 0.0) or not math.isfinite(a):
        raise ValueError("exponent weight a must be finite and >= 0")
    pref = sphere_area(dim - 1) * math.pi ** (-dim / 2.0)

    def integrand(r):
        return r ** (dim - 1) * math.exp(-r * r + a * r)

    val, err = integrate.quad(integrand, 0.0, math.inf,
                              epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > 1e-9 * max(1.0, abs(val)):
        raise RuntimeError("radial quadrature failed to converge")
    return pref * val


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------

def _ols_line(x, y):
    """Least-squares line fit; returns (slope, intercept, stderr_slope, sse)."""
    n = x.size
    xbar = x.mean()
    ybar = y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    if sxx <= 0.0:
        raise ValueError("degenerate fit: all abscissae equal")
    slope = float(np.sum((x - xbar) * (y - ybar))) / sxx
    intercept = ybar - slope * xbar
    resid = y - (intercept + slope * x)
    sse = float(np.sum(resid ** 2))
    dof = n - 2
    stderr = math.sqrt(sse / dof / sxx) if dof > 0 else math.inf
    return slope, intercept, stderr, sse


def fit_power_law(times, values, window=None, min_points=10):
    """Log-log slope of values against times over a time window.

    window defaults to the last decade (t_max/10, t_max].  Points must have
    positive times and values inside the window.  Returns a dict with slope,
    stderr (plain OLS; an underestimate when samples are autocorrelated),
    intercept (of log value at log t = 0), window, npoints.
    """
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if t.shape != v.shape or t.ndim != 1:
        raise ValueError("times and values must be 1-D arrays of equal length")
    if window is None:
        t_hi = float(t.max())
        window = (t_hi / 10.0, t_hi)
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    npts = int(np.count_nonzero(sel))
    if npts < min_points:
        raise ValueError("only %d points inside window [%g, %g], need %d"
                         % (npts, lo, hi, min_points))
    ts, vs = t[sel], v[sel]
    if np.any(ts <= 0.0) or np.any(vs <= 0.0):
        raise ValueError("power-law fit requires positive times and values")
    slope, intercept, stderr, _ = _ols_line(np.log(ts), np.log(vs))
    return {"slope": slope, "stderr": stderr, "intercept": intercept,
            "window": (float(lo), float(hi)), "npoints": npts}


def fit_exp_decay(taus, dists, min_points=10):
    """Exponential-decay rate of a distance series that may hit a noise floor.

    Fits log(dist) = intercept - rate * tau on the first ``cut`` points and a
    constant on the rest, choosing the cut (from min_points up to all points)
    with the smallest combined squared error; ties prefer the largest cut, so
    a clean exponential uses every point and reports floored = False.  A
    floor segment needs at least 2 points: a single trailing point fits any
    constant exactly, so allowing it would flag a floor on every series.
    Returns rate, stderr (OLS, on the linear part), knee_index (first index
    of the floor region, == len when no floor), knee_tau, floored, npoints.
    """
    tau = np.asarray(taus, dtype=np.float64)
    d = np.asarray(dists, dtype=np.float64)
    if tau.shape != d.shape or tau.ndim != 1:
        raise ValueError("taus and dists must be 1-D arrays of equal length")
    n = tau.size
    if n < min_points:
        raise ValueError("need at least %d points, got %d" % (min_points, n))
    if np.any(d <= 0.0):
        raise ValueError("distances must be positive for a log fit")
    if np.any(np.diff(tau) <= 0.0):
        raise ValueError("taus must increase strictly")
    y = np.log(d)
    best = None
    for cut in range(min_points, n + 1):
        if cut == n - 1:
            continue  # a 1-point floor is a free parameter, never evidence
        slope, intercept, stderr, sse_line = _ols_line(tau[:cut], y[:cut])
        if cut < n:
            tail = y[cut:]
            sse_tail = float(np.sum((tail - tail.mean()) ** 2))
        else:
            sse_tail = 0.0
        sse = sse_line + sse_tail
        if best is None or sse <= best[0]:
            best = (sse, cut, slope, stderr)
    _, cut, slope, stderr = best
    return {
        "rate": -slope,
        "stderr": stderr,
        "knee_index": cut,
        "knee_tau": float(tau[cut] if cut < n else tau[-1]),
        "floored": cut < n,
        "npoints": n,
    }


# ---------------------------------------------------------------------------
# moment-hierarchy audit
# ---------------------------------------------------------------------------

def _moment_lookup(moment_table):
    """Normalize a moment table to a lookup function exponent -> value.

    Accepts a dict {exponent: value} (matched to 1e-9), an object carrying
    moment_grid / moments arrays (e.g. a Snapshot), or a (grid, values)
    pair.  Gridded tables are log-interpolated between nodes; requests
    outside the grid raise.
    """
    if isinstance(moment_table, dict):
        keys = np.array(sorted(moment_table), dtype=np.float64)
        vals = np.array([moment_table[k] for k in sorted(moment_table)])

        def lookup(s):
            idx = np.searchsorted(keys, s)
            for j in (idx - 1, idx):
                if 0 <= j < keys.size and abs(keys[j] - s) <= 1e-9:
                    return float(vals[j])
            raise ValueError("moment table lacks exponent %g" % s)

        return lookup
    if hasattr(moment_table, "moment_grid"):
        grid = np.asarray(moment_table.moment_grid, dtype=np.float64)
        vals = np.asarray(moment_table.moments, dtype=np.float64)
    else:
        grid, vals = moment_table
        grid = np.asarray(grid, dtype=np.float64)
        vals = np.asarray(vals, dtype=np.float64)
    if np.any(vals <= 0.0):
        raise ValueError("gridded moment tables must be strictly positive")
    logv = np.log(vals)

    def lookup(s):
        if s < grid[0] - 1e-9 or s > grid[-1] + 1e-9:
            raise ValueError("exponent %g outside moment grid [%g, %g]"
                             % (s, grid[0], grid[-1]))
        return float(np.exp(np.interp(s, grid, logv)))

    return lookup


def compute_Ssp(moment_table, s, p):
    """Binomial cross-term sum driving growth of the (s*p)-th moment:

        S = sum_{k=1}^{floor((p+1)/2)} C(p,k) (m_{sk+1} m_{s(p-k)}
                                               + m_{sk} m_{s(p-k)+1}).

    moment_table as accepted by the moment lookup (dict, Snapshot, or
    (grid, values)).  p must be an integer >= 2.
    """
    if int(p) != p or p < 2:
        raise ValueError("p must be an integer >= 2")
    p = int(p)
    if not (s > 0.0):
        raise ValueError("s must be positive")
    m = _moment_lookup(moment_table)
    total = 0.0
    for k in range(1, (p + 1) // 2 + 1):
        total += math.comb(p, k) * (m(s * k + 1) * m(s * (p - k))
                                    + m(s * k) * m(s * (p - k) + 1))
    return total


def appmom_inequality_check(snapshots, s, p, alpha=None):
    """Audit the differential inequality for the (s*p)-th rescaled moment.

    Between consecutive snapshots (midpoint moments m, measured slope LHS):

        LHS = d m_{sp} / dtau
        RHS = (1-alpha) rho_{sp/2} S_{s,p}
              - (1 - rho_{sp/2}) m_{sp+1}
              + alpha s p K2 m_{sp} + alpha s p d m_{sp-1},
        K2 = (sup_tau m_3 + (d/2)^{3/2}) / d  (sup over the given snapshots).

    Applies for s in (0, 2] and integer p > 2/s (so sp > 2 and the loss
    term has a positive coefficient); other inputs are refused.  margin =
    RHS - LHS per interval, sigma from per-batch margins; ok means every
    margin >= -3 sigma.
    """
    if not (0.0 < s <= 2.0):
        raise ValueError("s must lie in (0, 2]")
    if int(p) != p or not (p > 2.0 / s):
        raise ValueError("p must be an integer greater than 2/s")
    p = int(p)
    if len(snapshots) < 2:
        raise ValueError("need at least 2 snapshots")
    if alpha is None:
        alpha = snapshots[0].coeffs.alpha
    dim = snapshots[0].hist.dim
    sp = s * p
    rho = povzner_rho(sp / 2.0, dim)
    k1 = 1.0 - rho

    sup_m3 = max(_moment_lookup(snap)(3.0) for snap in snapshots)
    k2 = (sup_m3 + (dim / 2.0) ** 1.5) / dim

    def margin_from(grid, mom0, mom1, dtau):
        mid = (grid, 0.5 * (mom0 + mom1))
        look = _moment_lookup(mid)
        lhs = (_moment_lookup((grid, mom1))(sp)
               - _moment_lookup((grid, mom0))(sp)) / dtau
        rhs = ((1.0 - alpha) * rho * compute_Ssp(mid, s, p)
               - k1 * look(sp + 1.0)
               + alpha * sp * k2 * look(sp)
               + alpha * sp * dim * look(sp - 1.0))
        return rhs - lhs

    m = len(snapshots) - 1
    tau_mid = np.empty(m)
    margin = np.empty(m)
    sigma = np.empty(m)
    for j in range(m):
        s0, s1 = snapshots[j], snapshots[j + 1]
        dtau = s1.tau - s0.tau
        if not (dtau > 0.0):
            raise ValueError("snapshots are not tau-ordered")
        grid = np.asarray(s0.moment_grid, dtype=np.float64)
        tau_mid[j] = 0.5 * (s0.tau + s1.tau)
        margin[j] = margin_from(grid, np.asarray(s0.moments),
                                np.asarray(s1.moments), dtau)
        nb = s0.batch_moments.shape[0]
        bm = np.empty(nb)
        for b in range(nb):
            bm[b] = margin_from(grid, np.asarray(s0.batch_moments[b]),
                                np.asarray(s1.batch_moments[b]), dtau)
        sigma[j] = float(np.std(bm, ddof=1)) / math.sqrt(nb)
    ok = bool(np.all(margin >= -3.0 * sigma))
    return {"tau_mid": tau_mid, "margin": margin, "sigma": sigma, "ok": ok,
            "K1": k1, "K2": k2, "rho": rho, "alpha": alpha, "s": s, "p": p}


# ---------------------------------------------------------------------------
# decay envelopes
# ---------------------------------------------------------------------------

def _envelope_report(traj, alpha, values, sigmas, power):
    recs = traj.records
    t = np.array([r.t for r in recs])
    m1_0 = recs[0].m1
    e0 = traj.config.dim * recs[0].n ** 2 * recs[0].T
    c0 = 1.0 / m1_0 if m1_0 > 0.0 else math.inf
    c1 = 1.0 / math.sqrt(e0) if e0 > 0.0 else math.inf
    lower = (c0 + 2.0 * t) ** (-float(power))
    upper = (c1 + 0.5 * alpha * t) ** (-float(power))
    margin = np.minimum(values - lower, upper - values)
    with np.errstate(divide="ignore", invalid="ignore"):
        margin_sigma = np.where(sigmas > 0.0, margin / sigmas,
                                np.where(margin >= 0.0, math.inf, -math.inf))
    violations = int(np.count_nonzero(margin_sigma < -3.0))
    return {
        "t": t, "value": values, "lower": lower, "upper": upper,
        "sigma": sigmas, "margin_sigma": margin_sigma,
        "violations": violations,
        "worst_margin_sigma": float(margin_sigma.min()),
        "ok": violations == 0,
        "c0": c0, "c1": c1, "alpha": alpha,
    }


def product_bound_check(traj, alpha=None):
    """Two-sided envelope on the product E(t) = d n(t)^2 T(t).

    (c0 + 2t)^{-2} <= E <= (c1 + alpha t / 2)^{-2} with c0 = 1/m1(0) and
    c1 = 1/sqrt(E(0)); the upper branch is tight at t = 0 by construction.
    A record violates when it sits more than 3 batch-sigma outside.
    """
    if alpha is None:
        alpha = traj.config.alpha
    d = traj.config.dim
    values = np.array([d * r.n ** 2 * r.T for r in traj.records])
    sigmas = np.array([s.E for s in traj.record_sigmas])
    return _envelope_report(traj, alpha, values, sigmas, power=2)


def m1_bound_check(traj, alpha=None):
    """Two-sided envelope on m1(t) = weighted mean deviation speed density.

    (c0 + 2t)^{-1} <= m1 <= (c1 + alpha t / 2)^{-1} with the same constants
    as product_bound_check; the lower branch is tight at t = 0.  Also
    reports the per-record Cauchy-Schwarz identity m1^2 <= d n^2 T, which
    holds exactly for every ensemble (cs_min_margin should only ever be
    negative at rounding level).
    """
    if alpha is None:
        alpha = traj.config.alpha
    d = traj.config.dim
    values = np.array([r.m1 for r in traj.records])
    sigmas = np.array([s.m1 for s in traj.record_sigmas])
    report = _envelope_report(traj, alpha, values, sigmas, power=1)
    e_vals = np.array([d * r.n ** 2 * r.T for r in traj.records])
    cs_margin = e_vals - values ** 2
    tol = 1e-12 * np.maximum(e_vals, 1.0)
    report["cs_min_margin"] = float(cs_margin.min())
    report["cs_ok"] = bool(np.all(cs_margin >= -tol))
    return report


# ---------------------------------------------------------------------------
# pointwise lower-bound scan
# ---------------------------------------------------------------------------

def lower_bound_scan(hist, r_max=3.0):
    """Check that a rescaled profile stays strictly positive out to r_max.

    Returns positive_radius (largest radius verified positive: the lower
    edge of the first empty bin, or r_max itself), first_zero_bin (-1 when
    none), and ok.  Reported, never raised: a zero bin is a finding.
    """
    r_mid = hist.r_mid
    sel = r_mid <= r_max
    zero = np.where(sel & (hist.density <= 0.0))[0]
    if zero.size:
        first = int(zero[0])
        return {"positive_radius": float(hist.edges[first]),
                "r_max": float(r_max), "ok": False, "first_zero_bin": first}
    return {"positive_radius": float(r_max), "r_max": float(r_max),
            "ok": True, "first_zero_bin": -1}
