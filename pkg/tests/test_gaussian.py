import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats, special

from isorobust.gaussian import (RngStream, as_generator, isoperimetric_expand, sample_std_gaussian,
                                sample_uniform_ball, std_normal_cdf, std_normal_pdf, std_normal_quantile)
from isorobust.verify import bisect_quantile


def quad_cdf(x):
    val, _ = integrate.quad(std_normal_pdf, -np.inf, x, epsabs=1e-14, epsrel=1e-13)
    return val


class TestCdf:
    def test_median(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_196_against_quadrature(self):
        # oracle value 0.9750021048517795 from adaptive quadrature of the density
        assert abs(std_normal_cdf(1.96) - 0.9750021048517795) <= 1e-12
        assert abs(std_normal_cdf(1.96) - quad_cdf(1.96)) <= 1e-12

    def test_far_tail(self):
        assert std_normal_cdf(-40.0) < 1e-300
        assert std_normal_cdf(40.0) == 1.0
        assert std_normal_cdf(-np.inf) == 0.0 and std_normal_cdf(np.inf) == 1.0

    @pytest.mark.parametrize("x", np.linspace(-8, 8, 33))
    def test_absolute_error_on_grid(self, x):
        assert abs(std_normal_cdf(x) - quad_cdf(x)) <= 1e-12

    def test_monotone(self):
        xs = np.linspace(-12, 12, 20001)
        assert np.all(np.diff(std_normal_cdf(xs)) >= 0)


class TestQuantile:
    def test_median(self):
        assert std_normal_quantile(0.5) == 0.0

    def test_196(self):
        # oracle: bisection on the CDF
        assert abs(std_normal_quantile(0.975002) - 1.96) <= 1e-4
        assert abs(std_normal_quantile(0.975002) - bisect_quantile(0.975002)) <= 1e-12

    def test_sentinels(self):
        assert std_normal_quantile(0.0) == -np.inf
        assert std_normal_quantile(1.0) == np.inf

    @pytest.mark.parametrize("p", [-0.1, 1.1, float("nan")])
    def test_rejects_outside_unit_interval(self, p):
        with pytest.raises(ValueError):
            std_normal_quantile(p)

    @pytest.mark.parametrize("p", [1e-10, 1e-6, 0.01, 0.2, 0.5, 0.8, 0.99, 1 - 1e-6, 1 - 1e-10])
    def test_cdf_residual(self, p):
        assert abs(std_normal_cdf(std_normal_quantile(p)) - p) <= 1e-9

    def test_matches_scipy_ndtri_to_rounding(self):
        ps = np.concatenate([np.logspace(-300, -1, 200), np.linspace(0.01, 0.99, 99)])
        q = std_normal_quantile(ps)
        ref = special.ndtri(ps)
        assert np.max(np.abs(q - ref) / np.maximum(np.abs(ref), 1.0)) <= 1e-13

    @given(st.floats(min_value=-6, max_value=6))
    def test_round_trip(self, x):
        assert abs(std_normal_quantile(std_normal_cdf(x)) - x) <= 1e-7

    @given(st.floats(min_value=0.5, max_value=1 - 1e-12))
    def test_symmetry(self, q):
        # 1 - q is exact for q >= 0.5, so the two tails must mirror exactly
        assert std_normal_quantile(q) == -std_normal_quantile(1 - q)

    def test_vectorised_shape(self):
        out = std_normal_quantile(np.array([[0.1, 0.5], [0.9, 1.0]]))
        assert out.shape == (2, 2) and out[1, 1] == np.inf


class TestIsoperimetricExpand:
    def test_zero_expansion(self):
        assert isoperimetric_expand(0.3, 0.0) == pytest.approx(0.3, abs=1e-15)

    def test_table_term(self):
        # per-class term behind the 98.2% bound: Phi(Phi^-1(0.015) + 1/11)
        expected = stats.norm.cdf(stats.norm.ppf(0.015) + 1 / 11)
        assert abs(isoperimetric_expand(0.015, 1 / 11) - expected) <= 1e-12
        assert abs(isoperimetric_expand(0.015, 1 / 11) - 0.01880) <= 1e-5

    def test_full_and_empty_sets(self):
        assert isoperimetric_expand(1.0, 5.0) == 1.0
        assert isoperimetric_expand(0.0, 5.0) == 0.0

    def test_negative_t_rejected(self):
        with pytest.raises(ValueError):
            isoperimetric_expand(0.2, -0.1)

    @given(st.floats(min_value=1e-9, max_value=1 - 1e-9), st.floats(min_value=0, max_value=3),
           st.floats(min_value=0, max_value=3))
    def test_semigroup(self, p, s, t):
        lhs = isoperimetric_expand(p, s + t)
        rhs = isoperimetric_expand(isoperimetric_expand(p, s), t)
        assert abs(lhs - rhs) <= 1e-12

    @given(st.floats(min_value=0, max_value=1), st.floats(min_value=0, max_value=5))
    def test_dominates_p(self, p, t):
        assert isoperimetric_expand(p, t) >= p - 1e-15

    @given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0),
           st.floats(min_value=0, max_value=4))
    def test_monotone_in_p(self, a, b, t):
        lo, hi = min(a, b), max(a, b)
        assert isoperimetric_expand(lo, t) <= isoperimetric_expand(hi, t) + 1e-15


class TestStreams:
    def test_determinism(self):
        a = sample_std_gaussian(4, RngStream(7, 3), size=5)
        b = sample_std_gaussian(4, RngStream(7, 3), size=5)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = sample_std_gaussian(4, RngStream(7, 3))
        b = sample_std_gaussian(4, RngStream(7, 4))
        c = sample_std_gaussian(4, RngStream(7, 3).substream(0))
        assert not np.array_equal(a, b) and not np.array_equal(a, c)

    def test_pinned_first_draw(self):
        # frozen from SeedSequence(7, spawn_key=(3,)) feeding PCG64 with numpy's standard_normal
        ref = np.random.Generator(np.random.PCG64(np.random.SeedSequence(7, spawn_key=(3,)))).standard_normal(3)
        assert np.array_equal(sample_std_gaussian(3, RngStream(7, 3)), ref)

    def test_rejects_bad_seed(self):
        with pytest.raises(ValueError):
            RngStream(-1)

    def test_as_generator_accepts_int_and_generator(self):
        g = np.random.default_rng(1)
        assert as_generator(g) is g
        assert isinstance(as_generator(5), np.random.Generator)

    def test_dimension_zero_rejected(self):
        with pytest.raises(ValueError):
            sample_std_gaussian(0, RngStream(0))


class TestGaussianSampling:
    def test_moments(self):
        x = sample_std_gaussian(3, RngStream(11, 1), size=1_000_000)
        assert np.all(np.abs(x.mean(axis=0)) <= 0.005)
        assert np.all(np.abs(x.var(axis=0) - 1) <= 0.01)

    def test_cdf_fraction(self):
        x = sample_std_gaussian(1, RngStream(11, 2), size=1_000_000)
        assert abs(np.mean(x[:, 0] <= 1.96) - 0.975) <= 0.001


class TestBallSampling:
    def test_containment(self):
        c = np.array([1.0, -2.0, 0.5])
        pts = sample_uniform_ball(c, 0.7, RngStream(3, 1), size=20000)
        assert np.all(np.linalg.norm(pts - c, axis=1) <= 0.7)

    def test_radial_law_d2(self):
        pts = sample_uniform_ball(np.zeros(2), 2.0, RngStream(3, 2), size=100_000)
        u = np.sum(pts ** 2, axis=1) / 4.0
        ks = stats.kstest(u, "uniform")
        # 99% critical value of the one-sample KS statistic
        assert ks.statistic < 1.628 / math.sqrt(u.size)

    def test_translation_equivariance(self):
        v = np.array([3.0, -1.0])
        a = sample_uniform_ball(np.zeros(2), 1.0, RngStream(5, 9), size=100)
        b = sample_uniform_ball(v, 1.0, RngStream(5, 9), size=100)
        assert np.allclose(b - a, v, atol=1e-14)

    @pytest.mark.parametrize("r", [0.0, -1.0])
    def test_bad_radius(self, r):
        with pytest.raises(ValueError):
            sample_uniform_ball(np.zeros(2), r, RngStream(0))

    def test_direction_uniform_d3(self):
        pts = sample_uniform_ball(np.zeros(3), 1.0, RngStream(8, 1), size=60000)
        dirs = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        # a uniform direction has mean zero and covariance I/3
        assert np.all(np.abs(dirs.mean(axis=0)) < 0.015)
        assert np.allclose(np.cov(dirs.T), np.eye(3) / 3, atol=0.01)
