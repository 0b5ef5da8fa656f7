import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from jumpdiff.gig import (GigError, GigHeights, GigParams, GigTable, bessel_k, bessel_kve, gig_cdf, gig_density,
                          gig_mean, gig_variance, log_bessel_k, sample_gig_approx, sample_gig_exact, table_spacing)
from jumpdiff.jumps import sample_partition_1d

P = GigParams(0.25, 9.0, -1.0)


class TestBessel:
    @pytest.mark.parametrize("nu", [0.0, 0.5, 1.0, 2.3, 5.0])
    @pytest.mark.parametrize("z", [1e-3, 0.1, 1.5, 10.0, 300.0])
    def test_against_scipy(self, nu, z):
        assert bessel_kve(nu, z) == pytest.approx(special.kve(nu, z), rel=1e-13)

    def test_reference_values(self):
        assert bessel_k(0, 1.5) == pytest.approx(0.21381, abs=1e-5)
        assert bessel_k(1, 1.5) == pytest.approx(0.27739, abs=1e-5)

    @pytest.mark.parametrize("nu", [0.5, 1.0, 3.7])
    def test_order_symmetry(self, nu):
        assert bessel_k(-nu, 2.0) == bessel_k(nu, 2.0)

    def test_half_order_closed_form(self):
        z = 3.0
        assert bessel_k(0.5, z) == pytest.approx(math.sqrt(math.pi / (2 * z)) * math.exp(-z), rel=1e-14)

    def test_log_no_underflow(self):
        # K_0(2000) underflows double precision but its logarithm is finite
        assert log_bessel_k(0.0, 2000.0) == pytest.approx(math.log(special.kve(0, 2000.0)) - 2000.0, rel=1e-13)

    def test_nonpositive_argument(self):
        with pytest.raises(GigError):
            bessel_k(1.0, 0.0)


class TestDensity:
    def test_normalised(self):
        val, _ = integrate.quad(lambda x: gig_density(x, P), 0, np.inf, epsabs=1e-13, epsrel=1e-13, limit=200)
        assert abs(val - 1.0) < 1e-8

    def test_mean_bessel_ratio(self):
        ratio = 6.0 * special.kv(0, 1.5) / special.kv(1, 1.5)
        assert gig_mean(P) == pytest.approx(ratio, rel=1e-12)
        assert gig_mean(P) == pytest.approx(4.6243, rel=1e-4)
        mean, _ = integrate.quad(lambda x: x * gig_density(x, P), 0, np.inf, limit=200)
        assert mean == pytest.approx(ratio, rel=1e-9)

    def test_variance(self):
        m2, _ = integrate.quad(lambda x: x * x * gig_density(x, P), 0, np.inf, limit=200)
        assert gig_variance(P) == pytest.approx(m2 - gig_mean(P) ** 2, rel=1e-8)

    @pytest.mark.parametrize("psi,chi,lam", [(1.0, 1.0, 0.5), (2.0, 0.5, 3.0), (0.1, 4.0, -2.5)])
    def test_matches_scipy_geninvgauss(self, psi, chi, lam):
        p = GigParams(psi, chi, lam)
        x = np.linspace(0.05, 10, 40)
        # scipy's standard form has b = sqrt(psi chi), scale sqrt(chi / psi)
        ref = stats.geninvgauss(lam, math.sqrt(psi * chi), scale=math.sqrt(chi / psi)).pdf(x)
        assert np.allclose(gig_density(x, p), ref, rtol=1e-10)

    @pytest.mark.parametrize("x", [0.0, -1.0])
    def test_domain(self, x):
        with pytest.raises(GigError):
            gig_density(x, P)

    @pytest.mark.parametrize("psi,chi", [(0.0, 1.0), (1.0, -1.0)])
    def test_invalid_params(self, psi, chi):
        with pytest.raises(GigError):
            GigParams(psi, chi, 0.0)


class TestExactSampler:
    def test_mean_and_support(self):
        x = sample_gig_exact(P, np.random.default_rng(0), size=1_000_000)
        assert x.min() > 0
        assert abs(x.mean() - gig_mean(P)) < 0.01 * gig_mean(P)

    def test_ks_against_quadrature_cdf(self):
        x = np.sort(sample_gig_exact(P, np.random.default_rng(1), size=1_000_000))
        F = gig_cdf(P).cdf(x)
        n = x.size
        ks = max(np.max(np.arange(1, n + 1) / n - F), np.max(F - np.arange(n) / n))
        assert ks < 0.002

    @pytest.mark.parametrize("lam", [-1.0, 0.0, 0.7, 4.0])
    def test_other_orders(self, lam):
        p = GigParams(0.5, 2.0, lam)
        x = sample_gig_exact(p, np.random.default_rng(2), size=200_000)
        sd = math.sqrt(gig_variance(p) / x.size)
        assert abs(x.mean() - gig_mean(p)) < 4 * sd

    def test_scalar_draw(self):
        x = sample_gig_exact(P, np.random.default_rng(3))
        assert np.ndim(x) == 0 and x > 0


class TestCdf:
    def test_endpoints(self):
        cdf = gig_cdf(P)
        assert cdf.cdf(1e-6) < 1e-12
        assert cdf.sf(1e4) < 1e-12

    def test_ppf_inverts(self):
        cdf = gig_cdf(P)
        u = np.array([1e-9, 1e-4, 0.1, 0.5, 0.9, 1 - 1e-6])
        assert np.allclose(cdf.cdf(cdf.ppf(u)), u, rtol=1e-9, atol=1e-15)

    def test_matches_scipy(self):
        ref = stats.geninvgauss(-1.0, 1.5, scale=6.0)
        x = np.array([0.5, 2.0, 4.0, 10.0, 40.0])
        assert np.allclose(gig_cdf(P).cdf(x), ref.cdf(x), atol=1e-10)


class TestApproxSampler:
    @pytest.mark.parametrize("eps", [1e-2, 1e-3, 1e-4])
    def test_per_draw_coupling(self, eps):
        u = np.random.default_rng(4).random(20_000)
        approx = GigTable(P, table_spacing(eps))(u)
        exact = gig_cdf(P).ppf(u)
        assert np.max(np.abs(approx - exact)) <= table_spacing(eps) * (1 + 1e-9)

    @pytest.mark.parametrize("eps", [1e-2, 1e-3, 1e-4])
    def test_moment_bound(self, eps):
        h = GigHeights(0.25, 9.0, -1.0)
        u = np.random.default_rng(5).random(20_000)
        approx = h.from_uniforms(u, eps)
        assert approx.bias <= eps
        assert np.mean((approx.values - h.exact_from_uniforms(u)) ** 2) <= eps

    def test_large_eps_in_support(self):
        x, bound = sample_gig_approx(P, 100.0, np.random.default_rng(6), size=1000)
        assert x.min() > 0 and bound <= 100.0

    def test_exact_mode(self):
        h = GigHeights(0.25, 9.0, -1.0)
        u = np.array([0.2, 0.7])
        assert h.from_uniforms(u, 0.0).bias == 0.0
        assert np.array_equal(h.from_uniforms(u, 0.0).values, h.exact_from_uniforms(u))

    def test_cap_error_names_minimum(self):
        with pytest.raises(GigError, match="minimum achievable eps"):
            GigTable(P, 1e-9)

    @pytest.mark.parametrize("eps", [0.0, -1.0])
    def test_nonpositive_eps(self, eps):
        with pytest.raises(GigError):
            sample_gig_approx(P, eps, np.random.default_rng(0))

    @pytest.mark.slow
    @pytest.mark.parametrize("eps", [1e-2, 1e-3, 1e-4])
    def test_partition_max_error(self, eps):
        # E(max_i |P~_i - P_i|^2) <= lambda(D) eps with 12 expected cells
        g = np.random.default_rng(7)
        h = GigHeights(0.25, 9.0, -1.0)
        counts = np.array([sample_partition_1d(12.0, g).n_cells for _ in range(10_000)])
        u = g.random(counts.sum())
        err = (h.from_uniforms(u, eps).values - h.exact_from_uniforms(u)) ** 2
        worst = np.maximum.reduceat(err, np.r_[0, np.cumsum(counts)[:-1]])
        assert np.mean(worst) <= 12 * eps
