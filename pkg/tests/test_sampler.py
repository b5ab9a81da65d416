import math

import numpy as np
import pytest
from scipy import stats

from conftest import random_instance
from phylomds.core import DissimilarityData
from phylomds.prior import PriorHyperparams, matrix_normal_logpdf_pruning
from phylomds.sampler import (
    ChainError,
    ConfigError,
    HmcConfig,
    PosteriorModel,
    gibbs_sigma_mat,
    gibbs_tree_index,
    hmc_transition,
    initial_state,
    leapfrog_trajectory,
    log_posterior_x,
    mh_sigma2,
    run_chain,
    sample_sigma_mat,
    warmup,
)
from phylomds.tree import parse_newick, random_coalescent_tree


def empty_data(n):
    return DissimilarityData(np.zeros((n, n)), np.zeros((n, n), bool))


def gaussian_model(n, d, tau_e=1.0, s0=1.0, r0=1.0):
    """No trees and no data: X rows are iid N(0, tau_e * Sigma)."""
    return PosteriorModel(empty_data(n), [], 0.0, 1.0, tau_e, PriorHyperparams(d + 2.0, np.eye(d), s0, r0), use_likelihood=False)


def data_model(rng, n=6, d=2):
    data, x, sigma2 = random_instance(rng, n, d)
    tree = random_coalescent_tree([f"t{i}" for i in range(n)], rng)
    model = PosteriorModel(data, [[tree]], 0.0, 1.0, 1.0, PriorHyperparams(d + 2.0, np.eye(d), 1.0, 1.0))
    return model, x, sigma2


def batch_se(values, batches=50):
    means = np.array([b.mean() for b in np.array_split(values, batches)])
    return means.std(ddof=1) / math.sqrt(batches)


class TestHmcConfig:
    @pytest.mark.parametrize("kwargs", [dict(step_size=0.0, leapfrog_steps=3), dict(step_size=0.1, leapfrog_steps=0), dict(step_size=0.1, leapfrog_steps=2, mass=[1.0, -1.0]), dict(step_size=0.1, leapfrog_steps=2, jitter=1.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            HmcConfig(**kwargs)

    def test_mass_shape_checked(self, rng):
        model = gaussian_model(3, 2)
        state = initial_state(model, np.zeros((3, 2)), seed=1)
        with pytest.raises(ConfigError):
            hmc_transition(state, HmcConfig(0.1, 2, mass=[1.0, 2.0, 3.0]), model)


class TestLeapfrog:
    def test_reversible(self, rng):
        model, x, sigma2 = data_model(rng)
        state = initial_state(model, x, sigma2=sigma2, seed=3)
        hmc = HmcConfig(0.02, 25)
        momentum = rng.standard_normal(x.shape)
        forward = leapfrog_trajectory(state, hmc, model, momentum)
        state.x = forward.x
        back = leapfrog_trajectory(state, hmc, model, -forward.momentum)
        np.testing.assert_allclose(back.x, x, atol=1e-8)
        np.testing.assert_allclose(-back.momentum, momentum, atol=1e-8)
        assert back.delta_h == pytest.approx(-forward.delta_h, abs=1e-8)

    def test_energy_error_scales_quadratically(self):
        model = gaussian_model(5, 2)
        gen = np.random.default_rng(11)
        errors = {0.1: [], 0.05: []}
        for _ in range(200):
            state = initial_state(model, gen.standard_normal((5, 2)), seed=0)
            momentum = gen.standard_normal((5, 2))
            for eps in errors:
                traj = leapfrog_trajectory(state, HmcConfig(eps, int(round(1.0 / eps))), model, momentum)
                errors[eps].append(abs(traj.delta_h))
        ratio = np.mean(errors[0.1]) / np.mean(errors[0.05])
        assert 3.5 <= ratio <= 4.5

    def test_tiny_step_accepts(self, rng):
        model, x, sigma2 = data_model(rng)
        state = initial_state(model, x, sigma2=sigma2, seed=4)
        _, prob = hmc_transition(state, HmcConfig(1e-7, 3), model)
        assert prob == pytest.approx(1.0, abs=1e-6)

    def test_divergence_rejected(self):
        model = gaussian_model(2, 2)
        x0 = np.array([[0.5, -0.5], [1.0, 2.0]])
        state = initial_state(model, x0, seed=5)
        traj = leapfrog_trajectory(state, HmcConfig(1e300, 4), model, np.ones((2, 2)))
        assert traj.divergent
        state, prob = hmc_transition(state, HmcConfig(1e300, 4), model)
        assert prob == 0.0
        np.testing.assert_array_equal(state.x, x0)
        assert state.accepted["x"] == 0 and state.attempted["x"] == 1


class TestHmcTransition:
    def test_standard_normal_moments(self):
        model = gaussian_model(1, 1)
        state = initial_state(model, np.zeros((1, 1)), seed=2024)
        hmc = HmcConfig(0.9, 3, jitter=0.2)
        draws = np.empty(30_000)
        for i in range(draws.size):
            hmc_transition(state, hmc, model)
            draws[i] = state.x[0, 0]
        assert abs(draws.mean()) < 3 * batch_se(draws)
        sq = draws ** 2
        assert abs(sq.mean() - 1.0) < 3 * batch_se(sq)

    def test_seeded_chain_reproducible(self, rng):
        model, x, sigma2 = data_model(rng)
        logs = []
        for _ in range(2):
            state = initial_state(model, x, sigma2=sigma2, seed=99)
            logs.append(run_chain(state, model, HmcConfig(0.05, 5), 60).to_csv())
        assert logs[0] == logs[1]


class TestSigmaMat:
    def test_prior_mean_without_rows(self):
        hyper = PriorHyperparams(5.0, np.array([[2.0, 0.5], [0.5, 1.0]]), 1.0, 1.0)
        gen = np.random.default_rng(8)
        prec = np.array([np.linalg.inv(sample_sigma_mat(hyper, np.zeros((2, 2)), 0, gen)) for _ in range(50_000)])
        expected = 5.0 * np.linalg.inv(hyper.t0_mat)
        se = prec.std(axis=0, ddof=1) / math.sqrt(prec.shape[0])
        assert np.all(np.abs(prec.mean(axis=0) - expected) < 3 * se)

    def test_one_dimension_is_gamma(self):
        hyper = PriorHyperparams(3.0, np.array([[0.8]]), 1.0, 1.0)
        gen = np.random.default_rng(9)
        scatter, n = 2.2, 4
        prec = np.array([1.0 / sample_sigma_mat(hyper, [[scatter]], n, gen)[0, 0] for _ in range(5000)])
        ref = stats.gamma(a=(3.0 + n) / 2, scale=2.0 / (0.8 + scatter))
        assert stats.kstest(prec, ref.cdf).pvalue > 0.01

    def test_conjugate_posterior_mean(self):
        model = gaussian_model(4, 2)
        x = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0], [0.5, -0.5]])
        state = initial_state(model, x, seed=10)
        cov = model.covariance(0)
        np.testing.assert_array_equal(cov.values, np.eye(4))
        draws = []
        for _ in range(20_000):
            gibbs_sigma_mat(state, cov, model)
            draws.append(np.linalg.inv(state.sigma_mat))
        draws = np.array(draws)
        expected = (model.hyper.d0 + 4) * np.linalg.inv(model.hyper.t0_mat + x.T @ x)
        se = draws.std(axis=0, ddof=1) / math.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - expected) < 3 * se)


class TestSigma2:
    def test_tiny_proposal_stays_put(self, rng):
        model, x, sigma2 = data_model(rng)
        state = initial_state(model, x, sigma2=sigma2, seed=12)
        for _ in range(50):
            mh_sigma2(state, model, 1e-12)
        assert state.sigma2 == pytest.approx(sigma2, rel=1e-9)
        assert state.accepted["sigma2"] >= 45

    def test_bad_proposal_sd(self, rng):
        model, x, _ = data_model(rng)
        with pytest.raises(ConfigError):
            mh_sigma2(initial_state(model, x, seed=1), model, 0.0)

    def test_targets_gamma_without_data(self):
        # with the likelihood off, sigma^-2 must follow its Gamma(s0, r0) prior
        model = gaussian_model(2, 1, s0=3.0, r0=2.0)
        state = initial_state(model, np.zeros((2, 1)), sigma2=1.0, seed=13)
        tau = np.empty(200_000)
        for i in range(tau.size):
            mh_sigma2(state, model, 0.8)
            tau[i] = 1.0 / state.sigma2
        assert abs(tau.mean() - 1.5) < 3 * batch_se(tau)
        thinned = tau[::40]
        assert stats.kstest(thinned, stats.gamma(a=3.0, scale=0.5).cdf).pvalue > 0.01


class TestTreeIndex:
    def test_matches_full_conditional(self, rng):
        labels = ["a", "b", "c", "d"]
        trees = [parse_newick("((a:1,b:1):1,(c:1,d:1):1);"), parse_newick("((a:1,c:1):1,(b:1,d:1):1);"), parse_newick("(((a:0.5,b:0.5):0.5,c:1):1,d:2);")]
        data = DissimilarityData(np.zeros((4, 4)), np.zeros((4, 4), bool), labels)
        model = PosteriorModel(data, [[t] for t in trees], 0.0, 1.0, 1.0, PriorHyperparams(4.0, np.eye(2), 1, 1), use_likelihood=False)
        x = np.array([[0.0, 0.0], [0.3, 0.1], [1.5, 1.0], [1.2, 1.4]])
        state = initial_state(model, x, seed=14)
        dp = model.diffusion(np.eye(2))
        logw = np.array([matrix_normal_logpdf_pruning(x, comp, dp) for comp in model.components])
        probs = np.exp(logw - logw.max())
        probs /= probs.sum()
        counts = np.zeros(3)
        draws = 20_000
        for _ in range(draws):
            gibbs_tree_index(state, model)
            counts[state.tree_index] += 1
        se = np.sqrt(probs * (1 - probs) / draws)
        assert np.all(np.abs(counts / draws - probs) < 3 * se + 1e-12)


class TestRunChain:
    def test_x_only_schedule_freezes_others(self, rng):
        model, x, sigma2 = data_model(rng)
        state = initial_state(model, x, sigma2=sigma2, seed=15)
        log = run_chain(state, model, HmcConfig(0.05, 5), 40, schedule={"x": 1.0})
        assert set(log.column("block")) == {"x"}
        for name in ("sigma2", "trace_sigma", "sigma_1_2", "tree_index"):
            assert len(set(log.column(name))) == 1
        assert log.x.shape == (40, 6, 2)

    @pytest.mark.parametrize("schedule", [{"x": 0.0, "sigma2": 0.0}, {"x": 1.0, "bogus": 1.0}, {"x": -1.0, "sigma2": 2.0}])
    def test_bad_schedule(self, rng, schedule):
        model, x, _ = data_model(rng)
        with pytest.raises(ConfigError):
            run_chain(initial_state(model, x, seed=1), model, HmcConfig(0.1, 2), 5, schedule=schedule)

    def test_thinning(self, rng):
        model, x, sigma2 = data_model(rng)
        log = run_chain(initial_state(model, x, sigma2=sigma2, seed=16), model, HmcConfig(0.05, 3), 30, thin=10)
        np.testing.assert_array_equal(log.column("iteration"), [10, 20, 30])
        header = log.to_csv().splitlines()[0].split(",")
        assert header[:7] == ["iteration", "block", "accepted", "log_posterior", "log_likelihood", "sigma2", "trace_sigma"]

    def test_failure_reports_iteration_and_snapshot(self, rng):
        model, x, _ = data_model(rng)
        state = initial_state(model, x, seed=17)
        run_chain(state, model, HmcConfig(0.05, 2), 3, schedule={"x": 1.0})
        state.sigma2 = -1.0
        with pytest.raises(ChainError) as info:
            run_chain(state, model, HmcConfig(0.05, 2), 3, schedule={"sigma2": 1.0})
        assert info.value.iteration == 4
        assert info.value.snapshot.sigma2 == -1.0
        assert info.value.snapshot is not state

    def test_warmup_reaches_target(self):
        model = gaussian_model(3, 2)
        state = initial_state(model, np.zeros((3, 2)), seed=18)
        result = warmup(state, model, HmcConfig(1.5, 5), 1500, schedule={"x": 1.0})
        state.iteration = 0
        probs = [hmc_transition(state, result.hmc, model)[1] for _ in range(2000)]
        assert np.mean(probs) == pytest.approx(0.65, abs=0.1)


class TestLogPosterior:
    def test_sum_of_parts(self, rng):
        model, x, sigma2 = data_model(rng)
        state = initial_state(model, x, sigma2=sigma2, seed=1)
        expected = model.engine.log_likelihood(model.data, x, sigma2) + matrix_normal_logpdf_pruning(x, model.components[0], model.diffusion(np.eye(2)))
        assert log_posterior_x(state, model) == pytest.approx(expected, rel=1e-14)

    def test_flat_prior_limit(self, rng):
        data, x, sigma2 = random_instance(rng, 5, 2)
        # the root scale and the branch lengths both have to grow for the prior to flatten
        tree = random_coalescent_tree(list("abcde"), rng, scale=1e9)
        model = PosteriorModel(data, [[tree]], 0.0, 1e9, 1e9, PriorHyperparams(4.0, np.eye(2), 1, 1))
        x2 = x + 0.1 * rng.standard_normal(x.shape)
        a = initial_state(model, x, sigma2=sigma2)
        b = initial_state(model, x2, sigma2=sigma2)
        lik_diff = model.log_likelihood(x, sigma2) - model.log_likelihood(x2, sigma2)
        assert log_posterior_x(a, model) - log_posterior_x(b, model) == pytest.approx(lik_diff, abs=1e-6)
