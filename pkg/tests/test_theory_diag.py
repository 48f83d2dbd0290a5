"""theory_diag 测试."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from data_pipeline import synth_regression
from errors import DomainError, InvalidArgumentError
from gaussian_core import GaussianParamSet
from theory_diag import (
    BoundInputs,
    avg_kl_to_prior,
    bound_inputs_for,
    eps_n,
    hellinger_sq_estimate,
    optimal_posterior,
    optimal_prior,
    r_n,
    sigma_star_sq,
    theory_report,
)


def inputs(**overrides):
    values = dict(L=1, K=10, e0=2, T1=4, T2=6, n=100, N=10)
    values.update(overrides)
    return BoundInputs(**values)


def gaussian(mu, sigma):
    return GaussianParamSet.from_mu_sigma(np.atleast_1d(mu), np.atleast_1d(sigma))


class TestRn:
    def test_pinned(self):
        assert_allclose(r_n(inputs()), 0.644961, atol=1e-6)

    def test_matches_direct_evaluation(self):
        inp = inputs(L=2, K=7, e0=5, T1=30, T2=70, n=1000, N=20)
        expected = 3 * 100 / 1000 * math.log(20) + 100 / 1000 * math.log(5 * math.sqrt(1000 / 100))
        assert_allclose(r_n(inp), expected, rtol=1e-12)

    def test_second_term_vanishes(self):
        inp = inputs(e0=1, T1=5, T2=5, n=10)
        assert_allclose(r_n(inp), 2 * 10 / 10 * math.log(10), rtol=1e-12)

    def test_decreasing_in_n(self):
        assert r_n(inputs(n=200)) < r_n(inputs(n=100))

    def test_zero_samples(self):
        with pytest.raises(InvalidArgumentError):
            r_n(inputs(n=0))


class TestEpsN:
    def test_matches_direct_evaluation(self):
        inp = inputs(alpha=1.0, delta=1.1)
        radicand = 10 * (2 * math.log(10) + math.log(2 * math.sqrt(100 / 10)))
        expected = 1 / math.sqrt(100) * math.log(100) ** 1.1 * math.sqrt(radicand)
        assert_allclose(eps_n(inp), expected, rtol=1e-12)

    def test_vanishes_with_n(self):
        assert eps_n(inputs(n=10**6)) < eps_n(inputs(n=10**3))

    def test_negative_radicand(self):
        with pytest.raises(DomainError):
            eps_n(inputs(K=1, e0=1, n=5))

    def test_needs_two_samples(self):
        with pytest.raises(InvalidArgumentError):
            eps_n(inputs(n=1))


class TestSigmaStar:
    def test_matches_direct_evaluation(self):
        inp = inputs(B=1.0)
        bk = 10.0
        bracket = (2 + bk / (bk - 1)) ** 2 + 1 / ((2 * bk) ** 2 - 1) + 2 / (2 * bk - 1) ** 2
        expected = 10 / (8 * 100) / math.log(3 * 2 * 10) * (2 * bk) ** (-4) / bracket
        assert_allclose(sigma_star_sq(inp), expected, rtol=1e-12)

    def test_requires_bk_above_one(self):
        with pytest.raises(DomainError):
            sigma_star_sq(inputs(K=1, B=1.0))

    def test_optimal_posterior(self):
        inp = inputs()
        posterior = optimal_posterior([0.5, -1.0], inp)
        assert_allclose(posterior.mu, [0.5, -1.0])
        assert_allclose(posterior.sigma**2, sigma_star_sq(inp), rtol=1e-9)


class TestOptimalPrior:
    def test_two_clients(self):
        prior = optimal_prior([gaussian(1.0, 1.0), gaussian(3.0, 1.0)])
        assert_allclose(prior.mu, [2.0])
        assert_allclose(prior.sigma**2, [2.0], rtol=1e-12)

    def test_single_client_exact(self):
        q = gaussian([0.3, -1.0], [0.2, 1.5])
        assert optimal_prior([q]).identical(q)

    def test_identical_clients_exact(self):
        q = gaussian([0.3, -1.0, 4.0], [0.2, 1.5, 1e-3])
        assert optimal_prior([q, q, q]).identical(q)

    @staticmethod
    def coordinate_avg_kl(posteriors, k, mu_p, sigma_p):
        """第 k 个坐标上的平均 KL，mu_p/sigma_p 可以是网格."""
        total = 0.0
        for q in posteriors:
            mu_q, sigma_q = q.mu[k], q.sigma[k]
            total = total + (
                np.log(sigma_p / sigma_q) + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2 * sigma_p**2) - 0.5
            )
        return total / len(posteriors)

    @staticmethod
    def random_posteriors(rng):
        dims, count = rng.integers(1, 6), rng.integers(1, 9)
        return [gaussian(rng.normal(0, 1, dims), rng.uniform(0.2, 2, dims)) for _ in range(count)]

    def test_grid_optimality(self):
        rng = np.random.default_rng(0)
        offsets = np.linspace(-0.5, 0.5, 41)
        for _ in range(50):
            posteriors = self.random_posteriors(rng)
            best = optimal_prior(posteriors)
            # 平均 KL 逐坐标可加，各坐标 41x41 网格最小值之和就是联合网格的最小值
            grid_min = 0.0
            for k in range(best.size):
                mu_grid, sigma_grid = np.meshgrid(
                    best.mu[k] + offsets, best.sigma[k] * (1.0 + offsets), indexing="ij"
                )
                grid_min += float(np.min(self.coordinate_avg_kl(posteriors, k, mu_grid, sigma_grid)))
            assert avg_kl_to_prior(posteriors, best) <= grid_min + 1e-9

    def test_gradient_vanishes(self):
        rng = np.random.default_rng(1)
        h = 1e-6
        for _ in range(50):
            posteriors = self.random_posteriors(rng)
            best = optimal_prior(posteriors)
            grad = []
            for k in range(best.size):
                mu, sigma = best.mu[k], best.sigma[k]
                grad.append(
                    (self.coordinate_avg_kl(posteriors, k, mu + h, sigma)
                     - self.coordinate_avg_kl(posteriors, k, mu - h, sigma)) / (2 * h)
                )
                grad.append(
                    (self.coordinate_avg_kl(posteriors, k, mu, sigma + h)
                     - self.coordinate_avg_kl(posteriors, k, mu, sigma - h)) / (2 * h)
                )
            assert np.linalg.norm(grad) <= 1e-5

    def test_self_kl_zero(self):
        q = gaussian([1.0], [0.5])
        assert avg_kl_to_prior([q], q) == 0.0

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            optimal_prior([])


class TestHellinger:
    def test_identical(self):
        assert hellinger_sq_estimate([1.0, 2.0], [1.0, 2.0], 1.0) == 0.0

    def test_one_sigma(self):
        assert_allclose(hellinger_sq_estimate([1.0, 2.0], [0.0, 1.0], 1.0), 0.117503, atol=1e-6)
        assert_allclose(hellinger_sq_estimate([0.5], [0.0], 0.5), 1 - math.exp(-1 / 8), rtol=1e-12)

    def test_far_apart(self):
        value = hellinger_sq_estimate([100.0], [0.0], 1.0)
        assert 0.999 < value < 1.0 + 1e-12

    def test_monotone(self):
        diffs = np.linspace(0, 5, 20)
        values = [hellinger_sq_estimate([d], [0.0], 1.0) for d in diffs]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            hellinger_sq_estimate([0.0], [0.0], 0.0)
        with pytest.raises(InvalidArgumentError):
            hellinger_sq_estimate([0.0, 1.0], [0.0], 1.0)

    def test_least_squares_fit_beats_zero_predictor(self):
        data = synth_regression(2000, 3, seed=4, noise_std=0.5)
        design = np.hstack([data.x, np.ones((data.x.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(design, data.y, rcond=None)
        fitted = hellinger_sq_estimate(design @ coef, data.f_true, data.noise_std)
        zero = hellinger_sq_estimate(np.zeros_like(data.f_true), data.f_true, data.noise_std)
        assert 0.0 < fitted < zero


class TestReport:
    def test_bound_inputs_for(self):
        inp = bound_inputs_for([784, 100, 10], 1010, 78500, n=250, N=10)
        assert (inp.L, inp.K, inp.e0, inp.T) == (1, 100, 784, 79510)

    def test_undefined_terms_are_none(self):
        report = theory_report(inputs(K=1, e0=1, n=5))
        assert report["eps_n"] is None
        assert report["sigma_star_sq"] is None
        assert report["r_n"] is not None
        assert report["avg_kl_to_optimal_prior"] is None

    def test_with_posteriors(self):
        posteriors = [gaussian([1.0], [1.0]), gaussian([3.0], [1.0])]
        report = theory_report(inputs(), posteriors)
        assert report["inputs"]["T1"] == 4
        assert report["avg_kl_to_optimal_prior"] > 0

    def test_invalid_delta(self):
        with pytest.raises(InvalidArgumentError):
            inputs(delta=1.0)
