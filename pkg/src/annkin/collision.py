"""Hard-sphere collision geometry and the angular constants of the model.

Conventions: scattering directions sigma live on the unit sphere S^{d-1}
carrying the *normalized* uniform measure.  The elastic exchange map is

    v'  = (v + v*)/2 + (|v - v*|/2) sigma
    v'* = (v + v*)/2 - (|v - v*|/2) sigma

which conserves momentum and kinetic energy and preserves |v - v*| exactly
(up to rounding) for every sigma.
"""

import math

import numpy as np
from scipy import integrate, special

__all__ = [
    "sphere_area",
    "post_collision",
    "sample_sigma",
    "povzner_rho",
    "povzner_rho_closed",
    "alpha_star",
    "maxwellian_density",
    "maxwellian_coefficients",
    "maxwellian_radial_moment",
    "povzner_angular_lhs",
    "povzner_angular_check",
]


def sphere_area(n):
    """Surface measure |S^n| of the unit n-sphere embedded in R^{n+1}.

    |S^n| = 2 pi^{(n+1)/2} / Gamma((n+1)/2).  n = 0 gives 2 (two points),
    n = 1 gives 2 pi, n = 2 gives 4 pi.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    return 2.0 * math.pi ** ((n + 1) / 2.0) / math.gamma((n + 1) / 2.0)


# ---------------------------------------------------------------------------
# collision map
# ---------------------------------------------------------------------------

def post_collision(v, vs, sigma):
    """Elastic hard-sphere exchange of velocities v, vs along direction sigma.

    All three arguments broadcast against each other over leading axes; the
    last axis is the velocity dimension.  sigma must be unit length to within
    1e-12 (checked).  Returns (v', vs').
    """
    v = np.asarray(v, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    norms = np.sqrt(np.einsum("...i,...i->...", sigma, sigma))
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ValueError("sigma must be unit length (max |norm-1| = %.3e)"
                         % float(np.max(np.abs(norms - 1.0))))
    center = 0.5 * (v + vs)
    rel = v - vs
    half_speed = 0.5 * np.sqrt(np.einsum("...i,...i->...", rel, rel))
    offset = half_speed[..., None] * sigma
    return center + offset, center - offset


def sample_sigma(dim, rng, size=None):
    """Unit vectors drawn uniformly from S^{dim-1}.

    With size=None returns a single (dim,) vector; otherwise shape (size, dim).
    d = 2 draws an angle, d = 3 uses the cylinder (area-preserving) map, both
    cheaper than normalizing Gaussians; higher d falls back to the Gaussian
    construction.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if size is None:
        return sample_sigma(dim, rng, size=1)[0]
    if dim == 2:
        theta = rng.uniform(0.0, 2.0 * math.pi, size)
        out = np.empty((size, 2))
        out[:, 0] = np.cos(theta)
        out[:, 1] = np.sin(theta)
        return out
    if dim == 3:
        # Archimedes: z uniform on [-1,1], azimuth uniform, is exactly uniform on S^2
        z = rng.uniform(-1.0, 1.0, size)
        phi = rng.uniform(0.0, 2.0 * math.pi, size)
        rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        out = np.empty((size, 3))
        out[:, 0] = rho * np.cos(phi)
        out[:, 1] = rho * np.sin(phi)
        out[:, 2] = z
        return out
    g = rng.standard_normal((size, dim))
    g /= np.sqrt(np.einsum("ij,ij->i", g, g))[:, None]
    return g


# ---------------------------------------------------------------------------
# angular moment constants
# ---------------------------------------------------------------------------

def _angular_average(f, dim):
    """Average of f(cos theta) over the normalized sphere S^{dim-1}.

    Reduces to C_d * int_0^pi f(cos t) sin^{d-2} t dt with
    C_d = |S^{d-2}| / |S^{d-1}|.  Integrating in t (not in cos t) keeps the
    d = 2 integrand bounded at the endpoints.
    """
    d = dim
    cd = sphere_area(d - 2) / sphere_area(d - 1)

    def integrand(t):
        return f(math.cos(t)) * math.sin(t) ** (d - 2)

    val, err = integrate.quad(integrand, 0.0, math.pi,
                              epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > 1e-9:
        raise RuntimeError("angular quadrature did not converge (err = %.2e)" % err)
    return cd * val


def povzner_rho(k, dim):
    """Angular contraction factor rho_k, the pair-summed average of ((1+cos)/2)^k.

    rho_k = 2 * avg over sigma of ((1 + cos theta)/2)^k, normalized so the
    two post-collision particles together saturate energy conservation:
    rho_0 = 2, rho_1 = 1 in every dimension, and rho_k decreases strictly
    in k.  In d = 3 it equals 2/(k+1).  Computed by quadrature; see
    povzner_rho_closed for the Beta-function closed form used as a
    cross-check.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    return 2.0 * _angular_average(lambda c: ((1.0 + c) / 2.0) ** k, dim)


def povzner_rho_closed(k, dim):
    """Closed form of povzner_rho via the Beta function.

    Substituting s = (1+cos t)/2 turns the pair-summed angular average into
    C_d * 2^{d-1} * B(k + (d-1)/2, (d-1)/2) with C_d = |S^{d-2}|/|S^{d-1}|.
    In d = 3 this collapses to 2/(k+1).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    d = dim
    cd = sphere_area(d - 2) / sphere_area(d - 1)
    return cd * 2.0 ** (d - 1) * special.beta(k + (d - 1) / 2.0, (d - 1) / 2.0)


def alpha_star(dim):
    """Annihilation-probability threshold below which moment contraction holds.

    alpha_star = (rho_half - 1) / (rho_half + 1) with
    rho_half = povzner_rho(1/2, dim) in (1, 2); equals 1/7 in d = 3 and
    (4 - pi)/(4 + pi) in d = 2.  At alpha >= alpha_star the contraction
    argument behind the decay-rate predictions loses its sign, so such runs
    deserve a warning flag rather than a hard error.
    """
    rho_half = povzner_rho(0.5, dim)
    return (rho_half - 1.0) / (rho_half + 1.0)


def maxwellian_density(xi, dim):
    """Unit-mass, unit-variance-scale Gaussian pi^{-d/2} exp(-|xi|^2) at xi.

    xi may be a scalar radius, a (dim,) vector, or an (..., dim) array of
    vectors; scalar input is treated as a radius.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if xi.ndim == 0:
        rsq = float(xi) ** 2
    elif xi.shape[-1] == dim:
        rsq = np.einsum("...i,...i->...", xi, xi)
    else:
        raise ValueError("xi must be scalar or have last axis of size dim")
    return math.pi ** (-dim / 2.0) * np.exp(-rsq)


def maxwellian_radial_moment(s, dim):
    """int |xi|^s M(xi) dxi = Gamma((d+s)/2) / Gamma(d/2) for the Gaussian above."""
    if s <= -dim:
        raise ValueError("moment diverges for s <= -dim")
    return math.exp(math.lgamma((dim + s) / 2.0) - math.lgamma(dim / 2.0))


def maxwellian_coefficients(dim):
    """Pair-averaged coefficients of the Gaussian fixed profile.

    a0 = E|xi - xi*| over two independent Gaussians
       = sqrt(2) Gamma((d+1)/2) / Gamma(d/2),
    b0 = ((2d+1)/(2d)) a0,
    B0 = (b0 - a0)/2,  A0 = d B0 - a0  (per unit annihilation probability).

    The universal decay exponents are built from these:
    density exponent 2 a0/(a0 + b0) = 4d/(4d+1), temperature exponent
    2 (b0 - a0)/(a0 + b0) = 2/(4d+1) — both independent of d only through
    the b0/a0 ratio.
    """
    d = dim
    a0 = math.sqrt(2.0) * math.exp(math.lgamma((d + 1) / 2.0) - math.lgamma(d / 2.0))
    b0 = (2.0 * d + 1.0) / (2.0 * d) * a0
    B0 = 0.5 * (b0 - a0)
    A0 = d * B0 - a0
    return {"a0": a0, "b0": b0, "A0": A0, "B0": B0}


# ---------------------------------------------------------------------------
# pointwise angular inequality
# ---------------------------------------------------------------------------

def povzner_angular_lhs(v, vs, k):
    """avg over sigma of (|v'|^{2k} + |vs'|^{2k}) for one incoming pair.

    With P = (v + vs)/2 and r = |v - vs|/2 the post-collision speeds are
    |P|^2 + r^2 +- 2 r |P| cos(angle between sigma and P), so the spherical
    average collapses to a 1-D integral regardless of dimension:

        C_d int_0^pi [(A + B c)^k + (A - B c)^k] sin^{d-2}t dt,
        A = |P|^2 + r^2,  B = 2 r |P|,  c = cos t.
    """
    v = np.asarray(v, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if v.shape != vs.shape or v.ndim != 1:
        raise ValueError("v and vs must be equal-length 1-D vectors")
    d = v.size
    if d < 2:
        raise ValueError("dim must be >= 2")
    P = 0.5 * (v + vs)
    r = 0.5 * math.sqrt(float(np.dot(v - vs, v - vs)))
    A = float(np.dot(P, P)) + r * r
    B = 2.0 * r * math.sqrt(float(np.dot(P, P)))
    return _angular_average(lambda c: (A + B * c) ** k + (A - B * c) ** k, d)


def povzner_angular_check(v, vs, k, dim=None, tol=1e-8):
    """True iff the angular average of post-collision |.|^{2k} obeys its bound.

    The bound is avg(|v'|^{2k} + |vs'|^{2k}) <= rho_k (|v|^2 + |vs|^2)^k,
    valid for all k >= 1 with equality at k = 1 (energy conservation).
    """
    if k < 1:
        raise ValueError("the bound needs k >= 1")
    v = np.asarray(v, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if dim is None:
        dim = v.size
    elif dim != v.size:
        raise ValueError("dim does not match the vectors")
    lhs = povzner_angular_lhs(v, vs, k)
    rhs = povzner_rho(k, dim) * (float(np.dot(v, v)) + float(np.dot(vs, vs))) ** k
    return bool(lhs <= rhs + tol)
