"""Random-feature students: featurization, ridge fits, gradients, model sets."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ardlab.distributions import SequenceSpec
from ardlab.errors import SingularCovarianceError
from ardlab.models import (
    FeatureSpec,
    LinearStudent,
    TrainConfig,
    build_student,
    copy_head,
    ema_update,
    featurize,
    fit_ridge,
    grad_output_wrt_params,
    make_chunk_models,
    member_seed,
    predict,
    predict_x0,
    sgd_step,
    time_embedding,
)

SPEC = SequenceSpec(n_frames=2, frame_dim=1, chunk_size=1)


def test_time_embedding_values():
    emb = time_embedding(0.25)
    assert np.allclose(emb, [0.25, 0.75, 1.0, 0.0], atol=1e-12)
    batch = time_embedding(np.array([0.0, 1.0]))
    assert batch.shape == (2, 4)
    assert np.allclose(batch[0], [0.0, 1.0, 0.0, 1.0], atol=1e-12)


def test_feature_spec_is_seed_deterministic():
    a = FeatureSpec(m=16, chunk_dim=1, prefix_dim=2, seed=7)
    b = FeatureSpec(m=16, chunk_dim=1, prefix_dim=2, seed=7)
    c = FeatureSpec(m=16, chunk_dim=1, prefix_dim=2, seed=8)
    assert np.array_equal(a.frequencies, b.frequencies)
    assert np.array_equal(a.phases, b.phases)
    assert not np.array_equal(a.frequencies, c.frequencies)
    assert a == b and a != c


def test_featurize_bound_and_broadcast():
    spec = FeatureSpec(m=64, chunk_dim=2, prefix_dim=1, seed=0)
    chunk = np.array([0.3, -0.4])
    phi_single = featurize(spec, chunk, np.array([1.0]), 0.5)
    phi_batch = featurize(spec, chunk[None, :], np.array([[1.0]]), 0.5)
    assert phi_single.shape == (64,)
    assert np.array_equal(phi_single, phi_batch[0])
    assert np.max(np.abs(phi_single)) <= np.sqrt(2.0 / 64) + 1e-12


def test_featurize_rejects_bad_widths():
    spec = FeatureSpec(m=8, chunk_dim=2, prefix_dim=1, seed=0)
    with pytest.raises(ValueError):
        featurize(spec, np.zeros((3, 1)), np.zeros((3, 1)), 0.5)
    with pytest.raises(ValueError):
        featurize(spec, np.zeros((3, 2)), np.zeros((3, 2)), 0.5)


def test_fit_ridge_recovers_planted_head():
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((400, 20))
    theta_true = rng.standard_normal((20, 2))
    theta = fit_ridge(phi, phi @ theta_true, ridge_lambda=1e-10)
    assert np.allclose(theta, theta_true, atol=1e-6)


def test_fit_ridge_rankdeficient_raises_without_lambda():
    rng = np.random.default_rng(1)
    phi = rng.standard_normal((5, 12))  # fewer rows than features
    with pytest.raises(SingularCovarianceError):
        fit_ridge(phi, np.zeros(5), ridge_lambda=0.0)
    theta = fit_ridge(phi, np.zeros(5), ridge_lambda=1e-6)
    assert np.allclose(theta, 0.0)


def test_fit_ridge_integer_weights_equal_row_duplication():
    rng = np.random.default_rng(2)
    phi = rng.standard_normal((30, 6))
    y = rng.standard_normal((30, 1))
    w = rng.integers(1, 4, size=30).astype(float)
    weighted = fit_ridge(phi, y, 1e-8, sample_weight=w)
    rows = np.repeat(np.arange(30), w.astype(int))
    duplicated = fit_ridge(phi[rows], y[rows], 1e-8)
    assert np.allclose(weighted, duplicated, atol=1e-8)


def test_ridge_solution_is_strict_local_minimum():
    rng = np.random.default_rng(3)
    phi = rng.standard_normal((200, 16))
    y = rng.standard_normal((200, 2))
    lam = 1e-3
    theta_hat = fit_ridge(phi, y, lam)

    def loss(theta):
        return float(np.sum((phi @ theta - y) ** 2) + lam * np.sum(theta**2))

    base = loss(theta_hat)
    for _ in range(50):
        delta = rng.standard_normal(theta_hat.shape)
        delta *= 1e-3 / np.linalg.norm(delta)
        assert loss(theta_hat + delta) > base


def test_head_jacobian_matches_finite_differences():
    model = build_student(m=24, chunk_dim=2, prefix_dim=1, role="generator", seed=4)
    rng = np.random.default_rng(4)
    model.theta[:] = rng.standard_normal(model.theta.shape)
    chunk = rng.standard_normal(2)
    prefix = rng.standard_normal(1)
    t = 0.35
    phi = grad_output_wrt_params(model, chunk, prefix, t)
    h = 1e-6
    for j in (0, 7, 23):
        for k in (0, 1):
            bumped = model.theta.copy()
            bumped[j, k] += h
            up = predict(LinearStudent(model.features, bumped, "generator"), chunk, prefix, t)
            bumped[j, k] -= 2 * h
            dn = predict(LinearStudent(model.features, bumped, "generator"), chunk, prefix, t)
            fd = (up[k] - dn[k]) / (2 * h)
            assert abs(fd - phi[j]) < 1e-8


@given(t=st.floats(0.0, 1.0), x=st.floats(-3.0, 3.0))
@settings(max_examples=40, deadline=None)
def test_anchored_readout_identity_at_zero(t, x):
    model = build_student(
        m=8, chunk_dim=1, prefix_dim=0, role="generator", seed=5,
        parameterization="anchored",
    )
    model.theta[:] = 0.7
    out = predict_x0(model, np.array([x]), np.empty(0), t)
    head = predict(model, np.array([x]), np.empty(0), t)
    assert out[0] == pytest.approx(x - t * head[0], abs=1e-12)
    if t == 0.0:
        assert out[0] == x


def test_student_validation():
    spec = FeatureSpec(m=4, chunk_dim=1, prefix_dim=0, seed=0)
    with pytest.raises(ValueError):
        LinearStudent(spec, np.zeros((5, 1)))
    with pytest.raises(ValueError):
        LinearStudent(spec, np.zeros((4, 1)), role="oracle")
    with pytest.raises(ValueError):
        LinearStudent(spec, np.zeros((4, 1)), parameterization="affine")


def test_sgd_step_and_ema():
    model = build_student(m=4, chunk_dim=1, prefix_dim=0, role="generator", seed=0)
    grad = np.ones_like(model.theta)
    stepped = sgd_step(model, grad, 0.1)
    assert np.allclose(stepped.theta, model.theta - 0.1)
    with pytest.raises(ValueError):
        sgd_step(model, np.full_like(grad, np.nan), 0.1)
    with pytest.raises(ValueError):
        sgd_step(model, grad[:2], 0.1)
    theta_minus = np.zeros((4, 1))
    updated = ema_update(theta_minus, np.ones((4, 1)), 0.75)
    assert np.allclose(updated, 0.25)
    with pytest.raises(ValueError):
        ema_update(theta_minus, theta_minus, 1.0)


def test_ema_geometric_recursion():
    # n updates toward a fixed head give 1 - rate^n of the way there
    rate = 0.9
    theta_minus = np.zeros((2, 1))
    target = np.ones((2, 1))
    for _ in range(10):
        theta_minus = ema_update(theta_minus, target, rate)
    assert np.allclose(theta_minus, 1.0 - rate**10, atol=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(ema_rate=1.0)
    with pytest.raises(ValueError):
        TrainConfig(method="adam")
    cfg = TrainConfig(loss_weight=lambda t: t)
    assert np.allclose(cfg.weight(np.array([0.5])), [0.5])
    assert np.allclose(TrainConfig().weight(np.array([0.3, 0.9])), 1.0)


def test_member_seed_is_role_free_and_banks_match():
    assert member_seed(10, 1) != member_seed(10, 2)
    assert member_seed(10, 1) != member_seed(11, 1)
    velocities = make_chunk_models(SPEC, role="ar-velocity", m=32, seed=10)
    generators = make_chunk_models(
        SPEC, role="generator", m=32, seed=10, parameterization="anchored"
    )
    for i in (1, 2):
        assert velocities.member(i).features == generators.member(i).features


def test_copy_head_transfers_and_checks_banks():
    velocities = make_chunk_models(SPEC, role="ar-velocity", m=32, seed=10)
    generators = make_chunk_models(
        SPEC, role="generator", m=32, seed=10, parameterization="anchored"
    )
    velocities.member(1).theta[:] = 3.0
    copy_head(velocities, generators)
    assert np.allclose(generators.member(1).theta, 3.0)
    assert generators.member(1).parameterization == "anchored"
    other = make_chunk_models(SPEC, role="generator", m=32, seed=11)
    with pytest.raises(ValueError):
        copy_head(velocities, other)


def test_chunk_model_set_prefix_widths():
    models = make_chunk_models(SPEC, role="generator", m=16, seed=0)
    assert models.member(1).features.prefix_dim == 0
    assert models.member(2).features.prefix_dim == 1
    with pytest.raises(ValueError):
        from ardlab.models import ChunkModelSet

        ChunkModelSet(SPEC, "generator", (models.member(2), models.member(2)))
