import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boundwatch.distributions import (
    DiagonalGaussian,
    WeightSample,
    is_feasible,
    log_density,
    project_variances,
    renyi2_divergence,
    renyi2_gradient,
    sample,
    sample_many,
)


class ZeroNormal:
    """Stand-in generator whose normal draws are all zero."""

    def standard_normal(self, size):
        return np.zeros(size)


def gaussian(mean, var):
    return DiagonalGaussian(np.asarray(mean, float), np.log(np.asarray(var, float)))


def mc_renyi2(p, p0, rng, draws=200_000):
    """Monte-Carlo ln E_{w~P0}[(P/P0)^2] with a delta-method standard error."""
    w, _ = sample_many(p0, draws, rng)
    log_ratio = log_density(p, w) - log_density(p0, w)
    ratio_sq = np.exp(2.0 * log_ratio)
    mean = ratio_sq.mean()
    se = ratio_sq.std(ddof=1) / math.sqrt(draws) / mean
    return math.log(mean), se


def random_feasible_pair(rng, d):
    mean0 = rng.normal(size=d)
    var0 = rng.uniform(0.5, 2.0, size=d)
    var = var0 * rng.uniform(0.5, 1.3, size=d)
    mean = mean0 + rng.normal(scale=0.3, size=d) * np.sqrt(var0)
    return gaussian(mean, var), gaussian(mean0, var0)


class TestDiagonalGaussian:
    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="lengths differ"):
            DiagonalGaussian([0.0, 1.0], [0.0])

    def test_rejects_non_finite_log_variance(self):
        with pytest.raises(ValueError):
            DiagonalGaussian([0.0], [-np.inf])

    def test_arrays_are_read_only(self):
        g = DiagonalGaussian([0.0], [0.0])
        with pytest.raises(ValueError):
            g.mean[0] = 1.0

    def test_json_round_trip(self):
        g = gaussian([1.0, -2.0], [0.5, 3.0])
        assert DiagonalGaussian.from_dict(g.to_dict()) == g

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            DiagonalGaussian.from_dict({"mean": [0], "log_variance": [0], "cov": 1})


class TestSample:
    def test_zero_noise_returns_mean(self):
        g = DiagonalGaussian(np.zeros(3), np.zeros(3))
        w = sample(g, ZeroNormal())
        np.testing.assert_array_equal(w.weights, np.zeros(3))

    def test_same_seed_same_weights(self):
        g = gaussian([1.0, 2.0], [0.3, 4.0])
        assert sample(g, 7) == sample(g, 7)
        assert sample(g, 7).seed_tag == 7

    def test_mu_plus_sigma_z(self):
        class One:
            def standard_normal(self, size):
                return np.ones(size)

        assert sample(gaussian([5.0], [4.0]), One()).weights[0] == 7.0

    def test_sample_many_shapes(self):
        w, z = sample_many(gaussian([0, 0, 0], [1, 1, 1]), 5, 0)
        assert w.shape == z.shape == (5, 3)


class TestLogDensity:
    def test_standard_normal_at_zero(self):
        value = log_density(DiagonalGaussian([0.0], [0.0]), WeightSample([0.0]))
        assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        assert value == pytest.approx(-0.918939, abs=1e-6)

    def test_mode_at_mean(self):
        g = gaussian([0.3], [1.0])
        grid = np.linspace(-3, 3, 601)
        values = log_density(g, grid[:, None])
        assert grid[np.argmax(values)] == pytest.approx(0.3)

    def test_factorizes(self):
        g = gaussian([0.1, -1.0], [2.0, 0.5])
        w = np.array([0.7, 0.2])
        parts = [log_density(gaussian([m], [v]), [x]) for m, v, x in zip([0.1, -1.0], [2.0, 0.5], w)]
        assert log_density(g, w) == pytest.approx(sum(parts), rel=1e-12)

    def test_matches_scipy(self):
        from scipy.stats import norm

        g = gaussian([0.5, -0.5], [0.2, 3.0])
        w = np.array([1.0, 2.0])
        expected = norm.logpdf(w, g.mean, np.sqrt(g.variance)).sum()
        assert log_density(g, w) == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            log_density(gaussian([0, 0], [1, 1]), [0.0])


class TestRenyi2:
    def test_identical_is_zero(self):
        g = gaussian([1.0, 2.0], [0.5, 2.0])
        assert renyi2_divergence(g, g) == 0.0

    def test_mean_shift_example(self):
        p = gaussian([1.0, 0.0], [1.0, 1.0])
        p0 = gaussian([0.0, 0.0], [1.0, 1.0])
        assert renyi2_divergence(p, p0) == pytest.approx(1.0, abs=1e-12)
        estimate, _ = mc_renyi2(p, p0, np.random.default_rng(0), draws=10_000_000)
        assert estimate == pytest.approx(1.0, abs=0.01)

    def test_infeasible_is_infinite(self):
        assert renyi2_divergence(gaussian([0.0], [2.5]), gaussian([0.0], [1.0])) == math.inf
        assert not is_feasible(gaussian([0.0], [2.5]), gaussian([0.0], [1.0]))

    def test_equal_covariance_special_case(self, rng):
        for _ in range(20):
            var = rng.uniform(0.2, 3.0, size=3)
            p, p0 = gaussian(rng.normal(size=3), var), gaussian(rng.normal(size=3), var)
            expected = np.sum((p.mean - p0.mean) ** 2 / var)
            assert renyi2_divergence(p, p0) == pytest.approx(expected, rel=1e-10)

    def test_matches_monte_carlo_on_random_pairs(self):
        rng = np.random.default_rng(5)
        failures = 0
        for _ in range(100):
            p, p0 = random_feasible_pair(rng, int(rng.integers(1, 6)))
            estimate, se = mc_renyi2(p, p0, rng, draws=50_000)
            failures += abs(estimate - renyi2_divergence(p, p0)) > 3 * se + 1e-3
        # 3-sigma bands: a handful of misses is expected by chance
        assert failures <= 3

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            renyi2_divergence(gaussian([0, 0], [1, 1]), gaussian([0], [1]))

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-3, 3), min_size=1, max_size=5),
        st.lists(st.floats(0.05, 1.95), min_size=5, max_size=5),
        st.lists(st.floats(-3, 3), min_size=5, max_size=5),
    )
    def test_nonnegative(self, mean, ratio, mean0):
        d = len(mean)
        p0 = gaussian(mean0[:d], np.ones(d))
        p = gaussian(mean, ratio[:d])
        assert renyi2_divergence(p, p0) >= -1e-12

    def test_gradient_matches_finite_differences(self, rng):
        p, p0 = random_feasible_pair(rng, 4)
        g_mean, g_logvar = renyi2_gradient(p, p0)
        h = 1e-6
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd_mean = (
                renyi2_divergence(DiagonalGaussian(p.mean + e, p.log_variance), p0)
                - renyi2_divergence(DiagonalGaussian(p.mean - e, p.log_variance), p0)
            ) / (2 * h)
            fd_logvar = (
                renyi2_divergence(DiagonalGaussian(p.mean, p.log_variance + e), p0)
                - renyi2_divergence(DiagonalGaussian(p.mean, p.log_variance - e), p0)
            ) / (2 * h)
            assert g_mean[i] == pytest.approx(fd_mean, rel=1e-6, abs=1e-9)
            assert g_logvar[i] == pytest.approx(fd_logvar, rel=1e-6, abs=1e-9)


class TestProjectVariances:
    def test_feasible_unchanged(self):
        p, p0 = gaussian([1.0], [1.5]), gaussian([0.0], [1.0])
        assert project_variances(p, p0, 0.01) == p

    def test_clamp_arithmetic(self):
        out = project_variances(gaussian([0.3], [3.0]), gaussian([0.0], [1.0]), 0.1)
        assert out.variance[0] == pytest.approx(1.9)
        assert out.mean[0] == 0.3

    @pytest.mark.parametrize("margin", [0.0, 1.0, -0.5])
    def test_margin_range(self, margin):
        with pytest.raises(ValueError):
            project_variances(gaussian([0], [1]), gaussian([0], [1]), margin)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-8, 8), min_size=1, max_size=6), st.floats(1e-3, 0.999))
    def test_output_always_feasible(self, log_var, margin):
        d = len(log_var)
        p = DiagonalGaussian(np.zeros(d), log_var)
        p0 = DiagonalGaussian(np.zeros(d), np.zeros(d))
        assert math.isfinite(renyi2_divergence(project_variances(p, p0, margin), p0))
