"""Self-similar rescaling and pair-coefficient estimation."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from annkin.core import CoefficientSet, ParticleEnsemble, compute_moments
from annkin.rescale import estimate_coefficients, reconstruct_moments, to_selfsimilar


def two_particle():
    return ParticleEnsemble(
        dim=3, velocities=np.array([[1.0, 0, 0], [-1.0, 0, 0]]), weight=0.5)


def gaussian_psi(n, rng, dim=3):
    """A rescaled ensemble drawn from the gaussian attractor shape."""
    raw = ParticleEnsemble(dim=dim, velocities=rng.standard_normal((n, dim)),
                           weight=1.0)
    return to_selfsimilar(raw)


class TestToSelfsimilar:
    def test_two_particle_oracle(self):
        # T = 1/3, u = 0, so xi = v / sqrt(2/3) = +-sqrt(3/2) e1, weight 1/2
        psi = to_selfsimilar(two_particle())
        expected = math.sqrt(1.5)
        assert psi.weight == 0.5
        np.testing.assert_allclose(
            psi.velocities, [[expected, 0, 0], [-expected, 0, 0]], rtol=1e-15)

    def test_invariants_exact(self, rng):
        # mass 1, momentum ~0, energy d/2 for any input ensemble
        for dim in (2, 3, 4):
            ens = ParticleEnsemble(
                dim=dim, velocities=3.0 + 2.0 * rng.standard_normal((5000, dim)),
                weight=0.37)
            psi = to_selfsimilar(ens)
            rec = compute_moments(psi)
            assert abs(rec.n - 1.0) < 1e-15
            assert np.max(np.abs(rec.u)) < 1e-13
            energy = dim * rec.n * rec.T  # second moment sum w |xi|^2
            assert abs(energy - dim / 2.0) < 1e-12

    def test_degenerate_temperature_raises(self):
        ens = ParticleEnsemble(dim=3, velocities=np.ones((4, 3)), weight=1.0)
        with pytest.raises(ValueError, match="degenerate"):
            to_selfsimilar(ens)


class TestEstimateCoefficients:
    def test_two_particle_exact(self, rng):
        # single pair: a = |xi1 - xi2| = sqrt(6); |xi|^2 sum = 3 => b = sqrt(6);
        # symmetric pair => Bv = 0; B = alpha(b-a)/2 = 0; A = -alpha a
        psi = to_selfsimilar(two_particle())
        cs = estimate_coefficients(psi, alpha=0.2, pair_samples=100, rng=rng)
        root6 = math.sqrt(6.0)
        assert abs(cs.a - root6) < 1e-14
        assert abs(cs.b - root6) < 1e-14
        assert abs(cs.B) < 1e-15
        assert abs(cs.A + 0.2 * root6) < 1e-14
        np.testing.assert_allclose(cs.Bv, 0.0, atol=1e-15)
        assert cs.stderr_a == 0.0 and cs.stderr_b == 0.0
        assert cs.alpha == 0.2

    def test_exact_path_matches_double_loop(self, rng):
        n = 40
        psi = gaussian_psi(n, rng)
        alpha = 0.13
        cs = estimate_coefficients(psi, alpha, pair_samples=10_000, rng=rng)
        assert cs.stderr_a == 0.0  # 780 pairs <= 10000 -> exact enumeration
        v = psi.velocities
        sg = sbg = 0.0
        smv = np.zeros(3)
        npairs = 0
        for i in range(n):
            for j in range(i + 1, n):
                g = float(np.linalg.norm(v[i] - v[j]))
                sg += g
                sbg += (float(v[i] @ v[i]) + float(v[j] @ v[j])) * g
                smv += 0.5 * (v[i] + v[j]) * g
                npairs += 1
        assert abs(cs.a - sg / npairs) < 1e-13
        assert abs(cs.b - sbg / (3 * npairs)) < 1e-13
        np.testing.assert_allclose(cs.Bv, -alpha * smv / npairs, atol=1e-14)

    def test_linear_identities(self, rng):
        psi = gaussian_psi(500, rng)
        for alpha in (0.0, 0.05, 0.3):
            cs = estimate_coefficients(psi, alpha, pair_samples=200_000, rng=rng)
            # A and B are derived from (a, b), so these hold to rounding
            assert cs.A == 3 * cs.B - alpha * cs.a
            assert abs(2 * cs.B + alpha * cs.a - alpha * cs.b) < 1e-12

    def test_sampled_path_matches_exact(self, rng):
        n = 2000  # 1,999,000 pairs
        psi = gaussian_psi(n, rng)
        exact = estimate_coefficients(psi, 0.05, pair_samples=2_000_000,
                                      rng=np.random.default_rng(1))
        assert exact.stderr_a == 0.0
        mc = estimate_coefficients(psi, 0.05, pair_samples=50_000,
                                   rng=np.random.default_rng(2))
        assert mc.stderr_a > 0.0 and mc.stderr_b > 0.0
        assert abs(mc.a - exact.a) < 5 * mc.stderr_a
        assert abs(mc.b - exact.b) < 5 * mc.stderr_b

    def test_gaussian_limits(self, rng):
        # On the gaussian attractor shape: a -> 2 sqrt(2/pi), b/a -> 7/6,
        # Bv -> 0 (d = 3).
        n = 200_000
        psi = gaussian_psi(n, rng)
        cs = estimate_coefficients(psi, 0.05, pair_samples=500_000, rng=rng)
        a0 = 2.0 * math.sqrt(2.0 / math.pi)
        # budget: pair-sampling stderr + between-ensemble U-statistic spread
        band_a = 4.0 * math.sqrt(cs.stderr_a**2 + (2 * 0.67 / math.sqrt(n)) ** 2)
        assert abs(cs.a - a0) < band_a
        band_ratio = 4.0 * math.sqrt(
            (cs.stderr_b / cs.a) ** 2 + (cs.stderr_a * cs.b / cs.a**2) ** 2
            + (6.0 / math.sqrt(n)) ** 2)
        assert abs(cs.b / cs.a - 7.0 / 6.0) < band_ratio
        assert np.max(np.abs(cs.Bv)) < 0.01

    def test_stderr_scaling(self, rng):
        psi = gaussian_psi(5000, rng)  # ~12.5M pairs: forces sampling
        s1 = estimate_coefficients(psi, 0.05, pair_samples=50_000,
                                   rng=np.random.default_rng(11)).stderr_a
        s2 = estimate_coefficients(psi, 0.05, pair_samples=100_000,
                                   rng=np.random.default_rng(12)).stderr_a
        assert 0.68 < s2 / s1 < 0.735  # ~1/sqrt(2)

    def test_validation(self, rng):
        one = ParticleEnsemble(dim=3, velocities=np.ones((1, 3)), weight=1.0)
        with pytest.raises(ValueError, match="at least 2"):
            estimate_coefficients(one, 0.1, pair_samples=10, rng=rng)
        psi = to_selfsimilar(two_particle())
        with pytest.raises(ValueError, match="pair_samples"):
            estimate_coefficients(psi, 0.1, pair_samples=0, rng=rng)


def const_history(taus, a, B, alpha, dim=3):
    b = 2 * B / alpha + a if alpha else a
    cs = CoefficientSet(A=dim * B - alpha * a, B=B, Bv=np.zeros(dim),
                        a=a, b=b, alpha=alpha)
    return [(tau, cs) for tau in taus]


class TestReconstructMoments:
    def test_constant_coefficients_exact(self):
        # trapezoid rule is exact for a constant integrand
        taus = np.linspace(0.0, 5.0, 11)
        a, B, alpha = 1.6, 0.004, 0.05
        got_t, n, T = reconstruct_moments(const_history(taus, a, B, alpha),
                                          n0=2.0, T0=0.5)
        np.testing.assert_array_equal(got_t, taus)
        np.testing.assert_allclose(n, 2.0 * np.exp(-alpha * a * taus), rtol=1e-12)
        np.testing.assert_allclose(T, 0.5 * np.exp(-2 * B * taus), rtol=1e-12)

    def test_alpha_zero_is_constant(self):
        taus = np.linspace(0.0, 9.0, 7)
        _, n, T = reconstruct_moments(const_history(taus, 1.6, 0.0, 0.0),
                                      n0=1.0, T0=0.5)
        np.testing.assert_array_equal(n, np.ones(7))
        np.testing.assert_array_equal(T, 0.5 * np.ones(7))

    def test_snapshot_like_objects(self):
        taus = [0.0, 1.0, 3.0]
        hist = const_history(taus, 1.5, 0.01, 0.05)
        objs = [SimpleNamespace(tau=tau, coeffs=cs) for tau, cs in hist]
        ref = reconstruct_moments(hist, 1.0, 1.0)
        got = reconstruct_moments(objs, 1.0, 1.0)
        for r, g in zip(ref, got):
            np.testing.assert_array_equal(r, g)

    def test_validation(self):
        hist = const_history([0.0, 2.0, 1.0], 1.5, 0.01, 0.05)
        with pytest.raises(ValueError, match="ordered"):
            reconstruct_moments(hist, 1.0, 1.0)
        mixed = (const_history([0.0], 1.5, 0.01, 0.05)
                 + const_history([1.0], 1.5, 0.01, 0.06))
        with pytest.raises(ValueError, match="alpha"):
            reconstruct_moments(mixed, 1.0, 1.0)
        with pytest.raises(ValueError, match="empty"):
            reconstruct_moments([], 1.0, 1.0)
