import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jnf import autodiff as ad
from jnf.distributions import DiagGaussian, StandardNormalPrior
from jnf.hmc import (
    FlowExpert, GaussianExpert, HmcChain, HmcConfig, SamplingError, SubsetPosteriorTarget,
    hmc_transition, leapfrog, sample_subset_posterior, target_log_density,
)
from flowcases import perturbed_stack


def gaussian_experts(n, params):
    return [GaussianExpert(np.full((n, len(mu)), mu, dtype=float),
                           np.full((n, len(mu)), 2 * np.log(sd), dtype=float))
            for mu, sd in params]


def product_moments(params):
    """Precision-weighted product of 1-d Gaussian experts divided by N(0,1)^(|S|-1)."""
    prec = sum(1 / sd[0] ** 2 for _, sd in params) - (len(params) - 1)
    mean = sum(mu[0] / sd[0] ** 2 for mu, sd in params) / prec
    return mean, 1 / prec


class DoubleWell:
    """log f(z) = -2 (z^2 - 1)^2, one row per chain."""

    def __init__(self, n):
        self.n = n

    def log_density(self, z):
        z = ad.constant(z)
        return ad.scale(ad.sum(ad.square(ad.add_scalar(ad.square(z), -1.0)), axis=1), -2.0)

    def sample(self, rng):
        return rng.standard_normal((self.n, 1))

    def take(self, index):
        return DoubleWell(len(index))


class NanExpert(DoubleWell):
    def log_density(self, z):
        z = ad.constant(z)
        return ad.sum(ad.mul(z, np.full(z.shape, np.nan)), axis=1)


PRIOR1 = StandardNormalPrior(1)


def test_single_expert_target_is_the_expert():
    e, = gaussian_experts(5, [([0.3], [0.7])])
    z = np.linspace(-2, 2, 5)[:, None]
    t = SubsetPosteriorTarget([e], PRIOR1)
    want = DiagGaussian(e.mu, e.log_var).log_density(z).data
    assert np.array_equal(target_log_density(t, z)[0], want)


def test_prior_experts_cancel():
    e = GaussianExpert(np.zeros((7, 2)), np.zeros((7, 2)))
    t = SubsetPosteriorTarget([e, e], StandardNormalPrior(2))
    z = np.random.default_rng(0).standard_normal((7, 2))
    np.testing.assert_allclose(target_log_density(t, z)[0],
                               StandardNormalPrior(2).log_density(z).data, atol=1e-12)


def test_two_gaussian_target_on_grid():
    params = [([1.0], [0.8]), ([-0.5], [0.6])]
    z = np.linspace(-3, 3, 41)[:, None]
    t = SubsetPosteriorTarget(gaussian_experts(len(z), params), PRIOR1)
    lp, grad = target_log_density(t, z)
    mean, var = product_moments(params)
    closed = -0.5 * (z[:, 0] - mean) ** 2 / var
    diff = lp - closed
    assert np.ptp(diff) < 1e-10
    np.testing.assert_allclose(grad[:, 0], -(z[:, 0] - mean) / var, atol=1e-10)


def test_empty_subset_rejected():
    with pytest.raises(ValueError):
        SubsetPosteriorTarget([], PRIOR1)


def _std_normal_target(n, d=2):
    return SubsetPosteriorTarget([GaussianExpert(np.zeros((n, d)), np.zeros((n, d)))],
                                 StandardNormalPrior(d))


def test_leapfrog_zero_steps_is_identity():
    t = _std_normal_target(4)
    rng = np.random.default_rng(1)
    z, v = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    z1, v1, _, _ = leapfrog(t, z, v, 0.1, 0)
    assert np.array_equal(z, z1) and np.array_equal(v, v1)


def test_leapfrog_energy_drift_on_harmonic_oscillator():
    t = _std_normal_target(50)
    rng = np.random.default_rng(2)
    z, v = rng.standard_normal((50, 2)), rng.standard_normal((50, 2))
    h0 = 0.5 * np.sum(z * z + v * v, axis=1)
    z1, v1, _, _ = leapfrog(t, z, v, 0.1, 50)
    h1 = 0.5 * np.sum(z1 * z1 + v1 * v1, axis=1)
    assert np.max(np.abs(h1 - h0)) < 1e-2


def test_leapfrog_time_reversal():
    stack = perturbed_stack(2, 3, seed=5, scale=0.2)
    rng = np.random.default_rng(3)
    c = rng.standard_normal((20, 3))
    t = SubsetPosteriorTarget([FlowExpert(stack, c), GaussianExpert(np.zeros((20, 2)), np.zeros((20, 2)))],
                              StandardNormalPrior(2))
    z, v = rng.standard_normal((20, 2)), rng.standard_normal((20, 2))
    z1, v1, _, _ = leapfrog(t, z, v, 0.05, 10)
    z2, v2, _, _ = leapfrog(t, z1, -v1, 0.05, 10)
    assert np.max(np.abs(z2 - z)) < 1e-10
    assert np.max(np.abs(-v2 - v)) < 1e-10


def test_leapfrog_nan_gradient_raises():
    t = SubsetPosteriorTarget([NanExpert(3)], PRIOR1)
    with pytest.raises(SamplingError):
        leapfrog(t, np.zeros((3, 1)), np.ones((3, 1)), 0.1, 2)


def test_zero_step_transitions_always_accept():
    t = _std_normal_target(30)
    cfg = HmcConfig(leapfrog_steps=0)
    rng = np.random.default_rng(4)
    chain = HmcChain.start(t, rng.standard_normal((30, 2)))
    for _ in range(20):
        chain = hmc_transition(t, chain, cfg, rng)
        assert np.all(chain.last_alpha == 1.0)
    assert np.all(chain.accepted == 20)


def test_tiny_step_acceptance():
    stack = perturbed_stack(2, 2, seed=1, scale=0.2)
    t = SubsetPosteriorTarget([FlowExpert(stack, np.ones((1, 2)))], StandardNormalPrior(2))
    cfg = HmcConfig(leapfrog_steps=1, step_size=1e-6)
    rng = np.random.default_rng(5)
    chain = HmcChain.start(t, np.zeros((1, 2)))
    for _ in range(1000):
        chain = hmc_transition(t, chain, cfg, rng)
    assert chain.accepted[0] / 1000 > 0.999


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0), st.integers(0, 6))
def test_acceptance_probability_bounds(seed, eps, l):
    t = _std_normal_target(8)
    rng = np.random.default_rng(seed)
    chain = HmcChain.start(t, 3 * rng.standard_normal((8, 2)))
    chain = hmc_transition(t, chain, HmcConfig(leapfrog_steps=l, step_size=eps), rng)
    assert np.all((chain.last_alpha >= 0) & (chain.last_alpha <= 1))
    assert np.all(chain.accepted <= chain.transitions)


def test_double_well_histogram_matches_quadrature():
    n_chains, keep = 500, 100
    t = SubsetPosteriorTarget([DoubleWell(n_chains)], PRIOR1)
    cfg = HmcConfig(leapfrog_steps=10, step_size=0.1)
    rng = np.random.default_rng(6)
    chain = HmcChain.start(t, rng.standard_normal((n_chains, 1)))
    for _ in range(50):
        chain = hmc_transition(t, chain, cfg, rng)
    kept = []
    for _ in range(keep):
        chain = hmc_transition(t, chain, cfg, rng)
        kept.append(chain.z[:, 0].copy())
    samples = np.concatenate(kept)
    edges = np.linspace(-2.5, 2.5, 41)
    fine = np.linspace(-2.5, 2.5, 40 * 200 + 1)
    dens = np.exp(-2 * (fine ** 2 - 1) ** 2)
    cell = np.add.reduceat(dens[:-1] + dens[1:], np.arange(0, len(fine) - 1, 200)) / 2
    expected = cell / cell.sum()
    observed = np.histogram(samples, edges)[0] / len(samples)
    assert 0.5 * np.abs(observed - expected).sum() < 0.05


def test_standard_normal_moments():
    n = 10_000
    t = SubsetPosteriorTarget([GaussianExpert(np.zeros((n, 2)), np.zeros((n, 2)))] * 2,
                              StandardNormalPrior(2))
    z, report = sample_subset_posterior(t, HmcConfig(seed=0), n)
    assert report.acceptance_rate > 0.4
    se_mean, se_var = 1 / np.sqrt(n), np.sqrt(2 / n)
    assert np.all(np.abs(z.mean(axis=0)) < 3 * se_mean)
    assert np.all(np.abs(z.var(axis=0) - 1) < 3 * se_var)


def test_two_gaussian_product_moments():
    n = 10_000
    params = [([1.0], [0.8]), ([-0.5], [0.6])]
    t = SubsetPosteriorTarget(gaussian_experts(n, params), PRIOR1)
    z, _ = sample_subset_posterior(t, HmcConfig(seed=1), n)
    mean, var = product_moments(params)
    assert abs(z.mean() - mean) < 3 * np.sqrt(var / n)
    assert abs(z.var() - var) < 3 * var * np.sqrt(2 / n)


def test_fixed_seed_and_thread_count_do_not_change_samples(monkeypatch):
    n = 600
    params = [([0.5], [0.9]), ([0.0], [0.7])]
    t = SubsetPosteriorTarget(gaussian_experts(n, params), PRIOR1)
    cfg = HmcConfig(seed=3, n_transitions=10)
    monkeypatch.setenv("JNF_THREADS", "0")
    a, _ = sample_subset_posterior(t, cfg, n)
    b, _ = sample_subset_posterior(t, cfg, n)
    monkeypatch.setenv("JNF_THREADS", "3")
    c, _ = sample_subset_posterior(t, cfg, n)
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_seeds_are_exchangeable():
    n = 4000
    params = [([0.5], [0.9]), ([0.0], [0.7])]
    t = SubsetPosteriorTarget(gaussian_experts(n, params), PRIOR1)
    a, _ = sample_subset_posterior(t, HmcConfig(seed=10, n_transitions=30), n)
    b, _ = sample_subset_posterior(t, HmcConfig(seed=11, n_transitions=30), n)
    assert not np.array_equal(a, b)
    _, var = product_moments(params)
    assert abs(a.mean() - b.mean()) < 4 * np.sqrt(2 * var / n)


def test_low_acceptance_warns():
    t = _std_normal_target(50)
    cfg = HmcConfig(step_size=20.0, leapfrog_steps=5, adapt=False, n_transitions=5)
    with pytest.warns(RuntimeWarning, match="acceptance"):
        _, report = sample_subset_posterior(t, cfg, 50)
    assert report.warnings


def test_warmup_halves_step_size():
    t = _std_normal_target(50)
    _, report = sample_subset_posterior(t, HmcConfig(step_size=20.0, n_transitions=5), 50)
    assert report.step_sizes[0] < 20.0
    assert report.acceptance_rate > 0.1


def _energy_distance(a, b):
    def mean_dist(x, y):
        return np.mean(np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1))
    return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)


def test_single_subset_hmc_matches_direct_flow_sampling():
    stack = perturbed_stack(2, 2, seed=7, scale=0.3)
    n = 400
    c = np.tile([[0.5, -1.0]], (n, 1))
    t = SubsetPosteriorTarget([FlowExpert(stack, c)], StandardNormalPrior(2))
    hmc, _ = sample_subset_posterior(t, HmcConfig(seed=2, init="prior"), n)
    direct = stack.sample(c, seed=99)
    stat = _energy_distance(hmc, direct)
    rng = np.random.default_rng(0)
    pooled = np.concatenate([hmc, direct])
    perms = []
    for _ in range(200):
        idx = rng.permutation(2 * n)
        perms.append(_energy_distance(pooled[idx[:n]], pooled[idx[n:]]))
    p = (1 + np.sum(np.array(perms) >= stat)) / 201
    assert p > 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        HmcConfig(leapfrog_steps=-1)
    with pytest.raises(ValueError):
        HmcConfig(step_size=0.0)
    with pytest.raises(ValueError):
        HmcConfig(init="median")
