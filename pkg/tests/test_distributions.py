"""Exact-law machinery: mixture kernels, conditionals, scores, moments."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ardlab.config import ar1_sequence, bivariate_pair, two_mode
from ardlab.distributions import (
    GaussianComponent,
    NoisyState,
    SequenceDistribution,
    SequenceSpec,
    chunk_second_moment,
    condition_clean_prefix_batch,
    condition_on_coordinates,
    conditional_clean_dist,
    df_conditional_dist,
    exact_score,
    forward_noise,
    joint_posterior_mean,
    mixture_moments,
    noisy_log_density,
    noisy_marginal,
    sample_clean,
)

RHO = 0.8
DIST = bivariate_pair(RHO)


def test_spec_layout():
    spec = SequenceSpec(n_frames=6, frame_dim=2, chunk_size=3)
    assert spec.total_dim == 12
    assert spec.n_chunks == 2
    assert spec.chunk_dim == 6
    assert spec.chunk_slice(2) == slice(6, 12)
    assert spec.prefix_slice(2) == slice(0, 6)
    assert spec.prefix_dim(1) == 0


def test_spec_rejects_bad_chunking():
    with pytest.raises(ValueError):
        SequenceSpec(n_frames=5, frame_dim=1, chunk_size=2)
    with pytest.raises(ValueError):
        SequenceSpec(n_frames=0, frame_dim=1)


def test_component_validation():
    with pytest.raises(ValueError):
        GaussianComponent(1.0, np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(ValueError):
        GaussianComponent(1.0, np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        SequenceDistribution(
            SequenceSpec(1, 1), (GaussianComponent(0.7, np.zeros(1), np.eye(1)),)
        )


def test_sampling_matches_mixture_moments():
    dist = two_mode(3.0)
    draws = sample_clean(dist, 60_000, seed=3)
    mean, cov = mixture_moments(dist)
    assert np.allclose(draws.mean(axis=0), mean, atol=0.05)
    assert np.allclose(np.cov(draws, rowvar=False), cov, atol=0.2)


def test_sampling_is_deterministic():
    a = sample_clean(DIST, 100, seed=11)
    b = sample_clean(DIST, 100, seed=11)
    assert np.array_equal(a, b)


@given(t=st.floats(0.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_forward_noise_interpolates(t):
    x0 = np.array([[1.0, -2.0], [0.5, 0.25]])
    eps = np.array([[0.3, 0.7], [-1.1, 0.2]])
    state = forward_noise(x0, t, eps)
    assert state.time == t
    assert np.allclose(state.values, (1.0 - t) * x0 + t * eps)


def test_noisy_marginal_covariance():
    t = 0.4
    marg = noisy_marginal(DIST, t)
    comp = marg.components[0]
    expected = (1.0 - t) ** 2 * DIST.components[0].covariance + t**2 * np.eye(2)
    assert np.allclose(comp.covariance, expected)
    assert np.allclose(comp.mean, (1.0 - t) * DIST.components[0].mean)


def test_score_matches_log_density_gradient():
    dist = two_mode(2.0)
    t = 0.5
    h = 1e-6
    for x in (-2.5, -0.3, 0.0, 1.7):
        state = NoisyState(values=np.array([x]), time=t)
        score = exact_score(dist, state)
        up = noisy_log_density(dist, NoisyState(values=np.array([x + h]), time=t))
        dn = noisy_log_density(dist, NoisyState(values=np.array([x - h]), time=t))
        fd = (up - dn) / (2.0 * h)
        assert abs(score[0] - fd) < 1e-5


def test_posterior_mean_matches_tweedie():
    # E[(1 - t) x0 | x_t] = x_t + t^2 * score(x_t)
    dist = two_mode(3.0)
    t = 0.6
    x = np.array([[0.8], [-1.5], [2.2]])
    state = NoisyState(values=x, time=t)
    post = joint_posterior_mean(dist, state)
    score = exact_score(dist, state)
    assert np.allclose((1.0 - t) * post, x + t**2 * score, atol=1e-10)


def test_two_mode_posterior_mean_symmetry():
    dist = two_mode(3.0)
    state = NoisyState(values=np.array([0.0]), time=0.5)
    assert abs(joint_posterior_mean(dist, state)[0]) < 1e-12
    pos = joint_posterior_mean(dist, NoisyState(values=np.array([1.0]), time=0.5))
    assert pos[0] > 0.0


def test_condition_on_coordinates_schur():
    cov = DIST.components[0].covariance
    marg = noisy_marginal(DIST, 0.5)
    noisy_cov = marg.components[0].covariance
    cond = condition_on_coordinates(marg, np.array([0]), np.array([1.2]))
    expected_mean = noisy_cov[1, 0] / noisy_cov[0, 0] * 1.2
    expected_var = noisy_cov[1, 1] - noisy_cov[1, 0] ** 2 / noisy_cov[0, 0]
    comp = cond.components[0]
    assert np.allclose(comp.mean, [expected_mean], atol=1e-12)
    assert np.allclose(comp.covariance, [[expected_var]], atol=1e-12)
    assert cov is DIST.components[0].covariance  # untouched


def test_conditional_clean_dist_bivariate():
    cond = conditional_clean_dist(DIST, 2, np.array([0.7]))
    comp = cond.components[0]
    assert np.allclose(comp.mean, [RHO * 0.7], atol=1e-12)
    assert np.allclose(comp.covariance, [[1.0 - RHO**2]], atol=1e-12)


def test_df_conditional_noisy_prefix_moments():
    # observing z = (1 - t) y + t w shrinks the regression coefficient to
    # (1 - t) rho / ((1 - t)^2 + t^2) and widens the conditional variance
    t = 0.3
    z = 0.9
    a = 1.0 - t
    cond = df_conditional_dist(DIST, 2, NoisyState(values=np.array([z]), time=t))
    comp = cond.components[0]
    coef = a * RHO / (a**2 + t**2)
    var = 1.0 - a * RHO * coef
    assert np.allclose(comp.mean, [coef * z], atol=1e-12)
    assert np.allclose(comp.covariance, [[var]], atol=1e-12)


def test_batched_conditional_matches_scalar_closed_form():
    # chunk 2 | y is N(rho y, 1 - rho^2); its posterior mean after noising is
    # the standard scalar-Gaussian formula
    prefixes = np.array([[0.5], [-1.0], [2.0]])
    cond = condition_clean_prefix_batch(DIST, 2, prefixes)
    t = 0.45
    a = 1.0 - t
    x = np.array([[0.2], [0.4], [-0.9]])
    mu = RHO * prefixes
    s2 = 1.0 - RHO**2
    expected = mu + a * s2 * (x - a * mu) / (a**2 * s2 + t**2)
    assert np.allclose(cond.posterior_mean(x, t), expected, atol=1e-10)


def test_batched_conditional_score_consistency():
    prefixes = np.array([[0.5], [-1.0]])
    cond = condition_clean_prefix_batch(DIST, 2, prefixes)
    t = 0.45
    x = np.array([[0.2], [-0.9]])
    post = cond.posterior_mean(x, t)
    # score of N((1-t) mu, (1-t)^2 s^2 + t^2) relates to the posterior mean by
    # s = ((1 - t) post - x) / t^2
    assert np.allclose(cond.score(x, t), ((1.0 - t) * post - x) / t**2, atol=1e-10)


def test_chunk_second_moment():
    assert chunk_second_moment(DIST, 1) == pytest.approx(1.0)
    assert chunk_second_moment(two_mode(3.0), 1) == pytest.approx(10.0)
    ar = ar1_sequence(6, 0.8, chunk_size=3)
    assert chunk_second_moment(ar, 2) == pytest.approx(3.0)


def test_ar1_covariance_structure():
    dist = ar1_sequence(4, 0.5)
    cov = dist.components[0].covariance
    assert cov[0, 3] == pytest.approx(0.5**3)
    assert np.allclose(np.diag(cov), 1.0)


def test_noisy_state_validation():
    with pytest.raises(ValueError):
        NoisyState(values=np.array([np.nan]), time=0.5)
    with pytest.raises(ValueError):
        NoisyState(values=np.array([0.0]), time=1.5)
