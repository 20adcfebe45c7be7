"""Self-similar change of variables and rescaled-coefficient estimation.

The rescaled variable is xi = (v - u) / sqrt(2 T) with (u, T) measured from
the ensemble itself, and the rescaled weight makes total mass exactly 1, so
every rescaled ensemble carries mass 1, momentum 0 and kinetic energy d/2 by
construction.  The rescaled dynamics is never time-stepped here: rescaled
snapshots are always produced by transforming physical-frame particles.
"""

import math

import numpy as np

from .core import CoefficientSet, ParticleEnsemble, compute_moments

__all__ = ["to_selfsimilar", "estimate_coefficients", "reconstruct_moments"]


def to_selfsimilar(ens):
    """Map an ensemble to the self-similar frame.

    Returns a new ParticleEnsemble with velocities (v - u)/sqrt(2 T) and
    weight 1/count.  Raises on zero temperature (a point mass has no
    self-similar frame).
    """
    rec = compute_moments(ens)
    if not (rec.T > 0.0):
        raise ValueError("degenerate temperature: cannot rescale")
    scale = math.sqrt(2.0 * rec.T)
    xi = (ens.velocities - rec.u) / scale
    return ParticleEnsemble(dim=ens.dim, velocities=xi, weight=1.0 / ens.count)


def _pair_terms(vi, vj):
    """Per-pair relative speed g, energy-weighted g, and momentum-weighted g.

    Symmetrized in (i, j): g, (|vi|^2+|vj|^2) g, ((vi+vj)/2) g.
    """
    diff = vi - vj
    g = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    esum = np.einsum("ij,ij->i", vi, vi) + np.einsum("ij,ij->i", vj, vj)
    return g, esum * g, 0.5 * (vi + vj) * g[:, None]


def estimate_coefficients(psi, alpha, pair_samples, rng):
    """Pair-averaged coefficients of a rescaled ensemble.

    a  = E|xi - xi*|                    over independent pairs from psi
    b  = (1/d) E[(|xi|^2 + |xi*|^2) |xi - xi*|]
    Bv = -alpha E[((xi + xi*)/2) |xi - xi*|]
    B  = alpha (b - a) / 2,  A = d B - alpha a   (derived, not estimated,
    so the linear identities alpha*a = d B - A and alpha*b = (d+2) B - A
    hold exactly).

    All count*(count-1)/2 unordered pairs are enumerated exactly when that is
    <= pair_samples (stderr 0: the estimator is then deterministic given the
    ensemble); otherwise pair_samples pairs are drawn with replacement and
    standard errors are the per-pair sample spread over sqrt(pair_samples).
    """
    v = psi.velocities
    count = v.shape[0]
    d = psi.dim
    if count < 2:
        raise ValueError("need at least 2 particles to estimate pair coefficients")
    if pair_samples < 1:
        raise ValueError("pair_samples must be >= 1")

    npairs_exact = count * (count - 1) // 2
    if npairs_exact <= pair_samples:
        # exact U-statistic, blocked to keep memory linear
        sum_g = 0.0
        sum_bg = 0.0
        sum_mv = np.zeros(d)
        for i in range(count - 1):
            g, bg, mv = _pair_terms(np.broadcast_to(v[i], v[i + 1:].shape), v[i + 1:])
            sum_g += float(np.sum(g))
            sum_bg += float(np.sum(bg))
            sum_mv += np.sum(mv, axis=0)
        a = sum_g / npairs_exact
        b = sum_bg / (d * npairs_exact)
        Bv = -alpha * sum_mv / npairs_exact
        stderr_a = 0.0
        stderr_b = 0.0
    else:
        P = int(pair_samples)
        i = rng.integers(0, count, P)
        jr = rng.integers(0, count - 1, P)
        j = jr + (jr >= i)  # uniform over j != i
        g, bg, mv = _pair_terms(v[i], v[j])
        a = float(np.mean(g))
        b = float(np.mean(bg)) / d
        Bv = -alpha * mv.mean(axis=0)
        stderr_a = float(np.std(g, ddof=1)) / math.sqrt(P)
        stderr_b = float(np.std(bg, ddof=1)) / (d * math.sqrt(P))

    B = alpha * (b - a) / 2.0
    A = d * B - alpha * a
    return CoefficientSet(A=A, B=B, Bv=Bv, a=a, b=b, alpha=alpha,
                          stderr_a=stderr_a, stderr_b=stderr_b)


def reconstruct_moments(coeff_history, n0, T0):
    """Predicted n and T curves from a coefficient history.

    coeff_history is a sequence of either (tau, CoefficientSet) pairs or
    objects with .tau and .coeffs attributes (run snapshots).  The decay
    exponents are trapezoid integrals of the history:

        n(tau) = n0 exp(-alpha int_0^tau a),   T(tau) = T0 exp(-2 int_0^tau B)

    Returns (tau, n, T) arrays on the history's own grid.  The history must
    be tau-ordered and share a single alpha.
    """
    taus = []
    avals = []
    bvals = []
    alphas = []
    for item in coeff_history:
        if hasattr(item, "coeffs"):
            tau, cs = item.tau, item.coeffs
        else:
            tau, cs = item
        taus.append(float(tau))
        avals.append(cs.a)
        bvals.append(cs.B)
        alphas.append(cs.alpha)
    taus = np.asarray(taus)
    if taus.size == 0:
        raise ValueError("empty coefficient history")
    if np.any(np.diff(taus) < 0.0):
        raise ValueError("coefficient history must be tau-ordered")
    if len(set(alphas)) > 1:
        raise ValueError("coefficient history mixes alpha values")
    alpha = alphas[0]
    avals = np.asarray(avals)
    bvals = np.asarray(bvals)

    int_a = np.concatenate(([0.0], np.cumsum(0.5 * (avals[1:] + avals[:-1]) * np.diff(taus))))
    int_B = np.concatenate(([0.0], np.cumsum(0.5 * (bvals[1:] + bvals[:-1]) * np.diff(taus))))
    n = n0 * np.exp(-alpha * int_a)
    T = T0 * np.exp(-2.0 * int_B)
    return taus, n, T
