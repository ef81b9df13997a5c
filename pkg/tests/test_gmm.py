"""Mixture math: densities, convolved marginals, exact posteriors, sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from deconv import autodiff as ad
from deconv.autodiff import Tape
from deconv.errors import CovarianceError
from deconv.gmm import (
    Gmm,
    GmmParams,
    init_gmm_params,
    kmeans_pp_centers,
    mvn_log_prob,
)

# the three-Gaussian synthetic target used throughout
TOY_WEIGHTS = np.full(3, 1 / 3)
TOY_MEANS = np.array([[-2.0, 0.0], [0.0, -2.0], [0.0, 2.0]])
TOY_COVS = np.array(
    [np.diag([0.09, 1.0]), np.diag([1.0, 0.09]), np.diag([1.0, 0.09])]
)
TOY_NOISE = np.diag([0.1, 1.0])


def toy_gmm():
    return Gmm(TOY_WEIGHTS, TOY_MEANS, TOY_COVS)


class TestLogProb:
    def test_single_standard_normal_at_origin(self):
        g = Gmm([1.0], np.zeros((1, 2)), np.eye(2)[None])
        assert np.isclose(g.log_prob(np.zeros(2))[0], -np.log(2 * np.pi),
                          atol=1e-12)

    def test_toy_mixture_value_by_hand(self):
        # at v = (-2, 0): component 1 sits at its peak, the others are far
        g = toy_gmm()
        term1 = 1.0 / (2 * np.pi * np.sqrt(0.09))
        term2 = (1.0 / (2 * np.pi * np.sqrt(0.09))) * np.exp(
            -0.5 * (4.0 / 1.0 + 4.0 / 0.09)
        )
        expected = np.log((term1 + 2 * term2) / 3.0)
        assert np.isclose(g.log_prob(np.array([-2.0, 0.0]))[0], expected,
                          atol=1e-12)

    def test_matches_monte_carlo_histogram(self):
        g = toy_gmm()
        samples = g.sample(10**6, 0)
        # probability of a few coarse cells vs density integral (midpoint)
        cells = [(-2.5, -1.5, -0.5, 0.5), (-0.5, 0.5, 1.5, 2.5),
                 (-0.5, 0.5, -2.5, -1.5)]
        for x0, x1, y0, y1 in cells:
            inside = (
                (samples[:, 0] >= x0) & (samples[:, 0] < x1)
                & (samples[:, 1] >= y0) & (samples[:, 1] < y1)
            )
            p_hat = inside.mean()
            gx = np.linspace(x0, x1, 41)[:-1] + (x1 - x0) / 80
            gy = np.linspace(y0, y1, 41)[:-1] + (y1 - y0) / 80
            xx, yy = np.meshgrid(gx, gy, indexing="ij")
            pts = np.stack([xx.ravel(), yy.ravel()], 1)
            p_int = np.exp(g.log_prob(pts)).sum() * (x1 - x0) * (y1 - y0) / 1600
            se = np.sqrt(p_int * (1 - p_int) / len(samples))
            assert abs(p_hat - p_int) < 4 * se + 1e-4


class TestMarginal:
    def test_variance_adds_for_single_component(self):
        g = Gmm([1.0], np.zeros((1, 2)), np.eye(2)[None])
        got = g.marginal_log_prob(np.zeros(2), np.eye(2))[0]
        assert np.isclose(got, -np.log(4 * np.pi), atol=1e-12)
        assert np.isclose(got, -2.531024, atol=1e-6)

    def test_zero_noise_reduces_to_log_prob_exactly(self):
        g = toy_gmm()
        v = np.random.default_rng(0).standard_normal((50, 2)) * 2
        assert np.array_equal(
            g.marginal_log_prob(v, np.zeros((2, 2))), g.log_prob(v)
        )

    def test_matches_convolution_quadrature(self):
        g = toy_gmm()
        rng = np.random.default_rng(1)
        w = rng.standard_normal((10, 2)) * 1.5
        got = g.marginal_log_prob(w, TOY_NOISE)
        want = oracles.convolution_log_density(
            TOY_WEIGHTS, TOY_MEANS, TOY_COVS, TOY_NOISE, w
        )
        assert np.allclose(got, want, atol=1e-4)

    def test_per_point_noise_matches_shared(self):
        g = toy_gmm()
        w = np.random.default_rng(2).standard_normal((8, 2))
        s_stack = np.repeat(TOY_NOISE[None], 8, axis=0)
        assert np.allclose(
            g.marginal_log_prob(w, s_stack), g.marginal_log_prob(w, TOY_NOISE),
            atol=1e-12,
        )

    def test_non_spd_covariance_raises(self):
        g = Gmm([1.0], np.zeros((1, 2)), np.eye(2)[None])
        with pytest.raises(CovarianceError):
            g.marginal_log_prob(np.zeros(2), -2.0 * np.eye(2))


class TestExactPosterior:
    def test_conjugate_single_gaussian(self):
        g = Gmm([1.0], np.zeros((1, 2)), np.eye(2)[None])
        post = g.exact_posterior(np.array([2.0, 0.0]), np.eye(2))
        assert np.allclose(post.means[0], [1.0, 0.0], atol=1e-12)
        assert np.allclose(post.covs[0], 0.5 * np.eye(2), atol=1e-12)

    def test_uninformative_noise_recovers_prior(self):
        g = toy_gmm()
        post = g.exact_posterior(np.array([0.3, -0.7]), 1e6 * np.eye(2))
        assert np.allclose(post.weights, TOY_WEIGHTS, atol=1e-3)
        assert np.allclose(post.means, TOY_MEANS, atol=1e-3)

    def test_pointwise_bayes_ratio_is_constant(self):
        g = toy_gmm()
        w = np.array([0.5, 1.0])
        post = g.exact_posterior(w, TOY_NOISE)
        rng = np.random.default_rng(3)
        v = post.sample(100, rng)
        s_inv = np.linalg.inv(TOY_NOISE)
        diff = w - v
        log_noise = (
            -0.5 * np.einsum("ni,ij,nj->n", diff, s_inv, diff)
            - 0.5 * np.log((2 * np.pi) ** 2 * np.linalg.det(TOY_NOISE))
        )
        log_ratio = log_noise + g.log_prob(v) - post.log_prob(v)
        assert log_ratio.std() < 1e-8
        assert np.allclose(log_ratio, g.marginal_log_prob(w, TOY_NOISE)[0],
                           atol=1e-8)


class TestSampling:
    def test_degenerate_weights_pick_one_component(self):
        g = Gmm([1.0, 0.0], np.array([[0.0, 0.0], [100.0, 100.0]]),
                np.stack([np.eye(2), np.eye(2)]))
        s = g.sample(1000, 7)
        assert np.all(np.linalg.norm(s - 0.0, axis=1) < 10)

    def test_sample_moments(self):
        mean = np.array([1.0, -2.0])
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        g = Gmm([1.0], mean[None], cov[None])
        s = g.sample(10**5, 11)
        se_mean = np.sqrt(np.diag(cov) / len(s))
        assert np.all(np.abs(s.mean(0) - mean) < 3 * se_mean)
        assert np.allclose(np.cov(s.T), cov, atol=0.05)

    def test_component_frequencies_match_weights(self):
        w = np.array([0.2, 0.5, 0.3])
        g = Gmm(w, np.array([[0.0, 0], [50, 50], [-50, 50]]),
                np.stack([0.01 * np.eye(2)] * 3))
        s = g.sample(10**5, 13)
        labels = np.argmin(
            np.linalg.norm(s[:, None, :] - g.means[None], axis=2), axis=1
        )
        freq = np.bincount(labels, minlength=3) / len(s)
        se = np.sqrt(w * (1 - w) / len(s))
        assert np.all(np.abs(freq - w) < 3 * se)


class TestGmmParams:
    def test_round_trip_parameterization(self):
        params = GmmParams(3, 2)
        params.logits.assign(np.log(TOY_WEIGHTS))
        params.means.assign(TOY_MEANS)
        params.set_covariances(TOY_COVS)
        g = params.to_gmm()
        assert np.allclose(g.weights, TOY_WEIGHTS, atol=1e-12)
        assert np.allclose(g.means, TOY_MEANS)
        assert np.allclose(g.covs, TOY_COVS, atol=1e-10)

    def test_recorded_density_matches_frozen(self):
        params = GmmParams(3, 2)
        params.logits.assign(np.array([0.3, -0.2, 0.5]))
        params.means.assign(TOY_MEANS)
        params.set_covariances(TOY_COVS)
        g = params.to_gmm()
        w = np.random.default_rng(5).standard_normal((20, 2))
        tape = Tape()
        node = params.marginal_log_prob(tape, w, TOY_NOISE)
        assert np.allclose(node.value, g.marginal_log_prob(w, TOY_NOISE),
                           atol=1e-12)
        tape = Tape()
        node = params.log_prob(tape, w)
        assert np.allclose(node.value, g.log_prob(w), atol=1e-12)

    def test_marginal_gradient_wrt_means(self):
        params = GmmParams(3, 2)
        params.means.assign(TOY_MEANS)
        params.set_covariances(TOY_COVS)
        w = np.random.default_rng(6).standard_normal((6, 2))

        def build(_):
            tape = Tape()
            return ad.amean(params.marginal_log_prob(tape, w, TOY_NOISE))

        assert ad.grad_check(build, [params.means], eps=1e-5) < 1e-6

    def test_full_gradient_including_cholesky_params(self):
        params = GmmParams(2, 2)
        params.means.assign(np.array([[-1.0, 0.0], [1.0, 0.5]]))
        params.set_covariances(np.stack([np.eye(2), 0.5 * np.eye(2)]))
        params.logits.assign(np.array([0.2, -0.2]))
        w = np.random.default_rng(7).standard_normal((5, 2))

        def build(_):
            tape = Tape()
            return ad.amean(params.marginal_log_prob(tape, w, TOY_NOISE))

        assert ad.grad_check(build, params.params(), eps=1e-5) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_any_raw_parameters_give_spd_covariances(self, seed):
        rng = np.random.default_rng(seed)
        params = GmmParams(2, 3)
        params.tril.assign(rng.standard_normal(params.tril.value.shape) * 3)
        evals = np.linalg.eigvalsh(params.covariances())
        assert np.all(evals >= 1e-4 - 1e-12)


class TestInit:
    def test_kmeanspp_centers_are_data_points(self):
        x = np.random.default_rng(8).standard_normal((200, 2))
        centers = kmeans_pp_centers(x, 5, np.random.default_rng(9))
        for c in centers:
            assert np.any(np.all(np.isclose(x, c), axis=1))

    def test_init_covariance_moment_matched(self):
        rng = np.random.default_rng(10)
        v = rng.standard_normal((20000, 2)) @ np.diag([2.0, 0.5])
        noise = rng.standard_normal((20000, 2)) @ np.sqrt(TOY_NOISE)
        w = v + noise
        params = init_gmm_params(w, TOY_NOISE, 3, seed=0)
        c0 = params.covariances()[0]
        sample_latent_cov = np.cov(w.T) - TOY_NOISE
        assert np.allclose(c0, sample_latent_cov, atol=0.15)


def test_mvn_log_prob_against_scipy():
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(12)
    x = rng.standard_normal((10, 3))
    mean = rng.standard_normal(3)
    a = rng.standard_normal((3, 3))
    cov = a @ a.T + np.eye(3)
    got = mvn_log_prob(x, mean[None], cov[None])[:, 0]
    want = multivariate_normal(mean, cov).logpdf(x)
    assert np.allclose(got, want, atol=1e-10)
