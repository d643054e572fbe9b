"""Training stages: denoising regression, distillation, DMD, consistency."""

import numpy as np
import pytest

from ardlab.config import bivariate_pair, two_mode
from ardlab.distributions import (
    GaussianComponent,
    NoisyState,
    SequenceDistribution,
    SequenceSpec,
    exact_score,
    sample_clean,
)
from ardlab.errors import ConfigError, DivergenceError
from ardlab.models import TrainConfig, build_student, make_chunk_models, predict, predict_x0
from ardlab.ode import DEFAULT_GRID, gaussian_flow_map, make_pairs_causal, velocity_bi
from ardlab.stages import (
    StageResult,
    cd_train,
    dmd_generator_gradient,
    dmd_train,
    fake_score,
    few_step_sample_batch,
    implied_posterior_mean,
    ode_distill,
    rollout,
    score_from_velocity,
    train_ar_diffusion_tf,
)

RHO = 0.8
DIST = bivariate_pair(RHO)
SPEC = DIST.spec


def standard_normal_dist(dim):
    spec = SequenceSpec(n_frames=dim, frame_dim=1, chunk_size=1)
    return SequenceDistribution(
        spec, (GaussianComponent(1.0, np.zeros(dim), np.eye(dim)),)
    )


# ---------------------------------------------------------------------------
# velocity/score algebra
# ---------------------------------------------------------------------------


def test_score_from_velocity_matches_exact_score():
    t = 0.45
    x = np.array([[0.2, -0.7], [1.1, 0.4]])
    v = velocity_bi(DIST, NoisyState(values=x, time=t))
    s = score_from_velocity(x, v, t)
    assert np.allclose(s, exact_score(DIST, NoisyState(values=x, time=t)), atol=1e-10)


def test_implied_posterior_mean_inverts_velocity():
    model = build_student(m=16, chunk_dim=1, prefix_dim=0, role="ar-velocity", seed=0)
    model.theta[:] = np.random.default_rng(0).standard_normal(model.theta.shape)
    x = np.array([[0.5], [-1.0]])
    t = 0.6
    v = predict(model, x, np.empty((2, 0)), t)
    assert np.allclose(implied_posterior_mean(model, x, np.empty((2, 0)), t), x - t * v)


# ---------------------------------------------------------------------------
# stage 1: denoising regression
# ---------------------------------------------------------------------------


def test_tf_training_learns_standard_normal_velocity():
    # regression against the noisy target eps - x0 recovers the conditional
    # mean; with a 60k-row design the in-distribution error is noise-limited
    dist = standard_normal_dist(1)
    students = make_chunk_models(dist.spec, role="ar-velocity", m=256, seed=1)
    cfg = TrainConfig(method="ridge", step_count=600, batch_size=100)
    result = train_ar_diffusion_tf(dist, students, cfg, seed=2)
    assert result.loss_trace.shape == (1,)
    rng = np.random.default_rng(3)
    for t in (0.2, 0.5, 0.8):
        sd = np.sqrt((1 - t) ** 2 + t**2)
        x = sd * rng.standard_normal((200, 1))
        v = predict(students.member(1), x, np.empty((200, 0)), t)
        coef = (2 * t - 1) / (2 * t**2 - 2 * t + 1)
        assert np.sqrt(np.mean((v - coef * x) ** 2)) < 0.15


def test_velocity_training_rejects_wrong_role():
    students = make_chunk_models(SPEC, role="generator", m=16, seed=0)
    with pytest.raises(ConfigError):
        train_ar_diffusion_tf(DIST, students, TrainConfig(step_count=1), seed=0)


def test_sgd_velocity_training_descends():
    students = make_chunk_models(SPEC, role="ar-velocity", m=64, seed=3)
    cfg = TrainConfig(method="sgd", learning_rate=0.5, step_count=400, batch_size=128)
    result = train_ar_diffusion_tf(DIST, students, cfg, seed=4)
    assert result.loss_trace.shape == (400,)
    assert np.mean(result.loss_trace[-50:]) < np.mean(result.loss_trace[:50])


# ---------------------------------------------------------------------------
# stage 2: distillation
# ---------------------------------------------------------------------------


def _distilled_students(m=256, count=1500, seed=5):
    pairs = make_pairs_causal(DIST, DEFAULT_GRID, count=count, steps=96, seed=seed)
    students = make_chunk_models(
        SPEC, role="generator", m=m, seed=seed + 1, parameterization="anchored"
    )
    ode_distill(pairs, students, TrainConfig(method="ridge"), seed=seed + 2)
    return students


def test_distill_learns_conditional_flow_map():
    students = _distilled_students()
    rng = np.random.default_rng(6)
    worst = 0.0
    for t in DEFAULT_GRID:
        y = rng.standard_normal((64, 1))
        x = rng.standard_normal((64, 1))
        pred = predict_x0(students.member(2), x, y, t)
        # conditional flow map of N(rho y, 1 - rho^2): the per-eigenmode
        # rescaling x0 = mu + s (x - a mu) / sqrt(a^2 s^2 + t^2)
        a, s2 = 1.0 - t, 1.0 - RHO**2
        expected = RHO * y + np.sqrt(s2) * (x - a * RHO * y) / np.sqrt(a**2 * s2 + t**2)
        worst = max(worst, float(np.sqrt(np.mean((pred - expected) ** 2))))
    assert worst < 0.05


def test_distill_requires_generator_role_and_matching_spec():
    pairs = make_pairs_causal(DIST, DEFAULT_GRID, count=8, steps=8, seed=0)
    wrong_role = make_chunk_models(SPEC, role="ar-velocity", m=8, seed=0)
    with pytest.raises(ConfigError):
        ode_distill(pairs, wrong_role, TrainConfig(), seed=0)
    other_spec = SequenceSpec(n_frames=4, frame_dim=1, chunk_size=1)
    wrong_spec = make_chunk_models(other_spec, role="generator", m=8, seed=0)
    with pytest.raises(ConfigError):
        ode_distill(pairs, wrong_spec, TrainConfig(), seed=0)


def test_distill_noisy_prefix_needs_bidirectional_data():
    pairs = make_pairs_causal(DIST, DEFAULT_GRID, count=8, steps=8, seed=0)
    students = make_chunk_models(SPEC, role="generator", m=8, seed=0)
    with pytest.raises(ConfigError):
        ode_distill(pairs, students, TrainConfig(), seed=0, prefix_mode="noisy")


# ---------------------------------------------------------------------------
# few-step sampling
# ---------------------------------------------------------------------------


def test_few_step_sampler_deterministic_and_shaped():
    students = _distilled_students(m=128, count=400)
    prefixes = np.array([[0.5], [-0.5], [1.5]])
    a = few_step_sample_batch(students.member(2), DEFAULT_GRID, prefixes, seed=7)
    b = few_step_sample_batch(students.member(2), DEFAULT_GRID, prefixes, seed=7)
    c = few_step_sample_batch(students.member(2), DEFAULT_GRID, prefixes, seed=8)
    assert a.shape == (3, 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rollout_matches_data_moments():
    students = _distilled_students()
    seqs = rollout(students, DEFAULT_GRID, seed=9, count=4000)
    assert seqs.shape == (4000, 2)
    cov = np.cov(seqs, rowvar=False)
    assert np.allclose(cov, DIST.components[0].covariance, atol=0.12)


# ---------------------------------------------------------------------------
# stage 3: distribution matching
# ---------------------------------------------------------------------------


def test_fake_score_consistent_with_velocity_algebra():
    # the fake field is v = -x + t * head; its implied score must equal the
    # bounded closed form the fake head trains against
    model = build_student(
        m=32, chunk_dim=1, prefix_dim=0, role="fake-score", seed=10,
        parameterization="anchored",
    )
    model.theta[:] = np.random.default_rng(10).standard_normal(model.theta.shape)
    x = np.array([[0.4], [-1.2]])
    t = np.array([0.3, 0.9])
    head = predict(model, x, np.empty((2, 0)), t)
    v = -x + t[:, None] * head
    assert np.allclose(
        fake_score(model, x, np.empty((2, 0)), t),
        score_from_velocity(x, v, t),
        atol=1e-10,
    )


def test_dmd_generator_gradient_matches_surrogate_fd():
    # gradient of mean_b <delta_b, sample_b(theta)> with the sampler's final
    # application as the only theta-dependent piece
    model = build_student(
        m=20, chunk_dim=1, prefix_dim=1, role="generator", seed=11,
        parameterization="anchored",
    )
    rng = np.random.default_rng(11)
    model.theta[:] = rng.standard_normal(model.theta.shape)
    n, t_last = 16, 0.625
    final_in = rng.standard_normal((n, 1))
    prefixes = rng.standard_normal((n, 1))
    delta = rng.standard_normal((n, 1))
    grad = dmd_generator_gradient(model, final_in, prefixes, t_last, delta)

    def surrogate(theta):
        from ardlab.models import LinearStudent

        probe = LinearStudent(model.features, theta, "generator", "anchored")
        return -float(np.mean(
            np.sum(delta * predict_x0(probe, final_in, prefixes, t_last), axis=1)
        ))

    h = 1e-6
    for j in (0, 9, 19):
        bumped = model.theta.copy()
        bumped[j, 0] += h
        up = surrogate(bumped)
        bumped[j, 0] -= 2 * h
        dn = surrogate(bumped)
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[j, 0]) < 1e-6 * max(1.0, abs(grad[j, 0]))


def test_dmd_forced_real_fake_is_a_fixed_point():
    dist = two_mode(3.0)
    generators = make_chunk_models(
        dist.spec, role="generator", m=64, seed=12, parameterization="anchored"
    )
    fakes = make_chunk_models(
        dist.spec, role="fake-score", m=32, seed=13, parameterization="anchored"
    )
    before = generators.member(1).theta.copy()
    result = dmd_train(
        generators, fakes, dist, DEFAULT_GRID,
        TrainConfig(step_count=20, batch_size=64, learning_rate=0.1),
        seed=14, force_real_fake=True,
    )
    assert np.array_equal(generators.member(1).theta, before)
    assert np.max(result.loss_trace) == 0.0


def test_dmd_improves_energy_distance():
    from ardlab.diagnostics import energy_distance

    dist = two_mode(3.0)
    generators = make_chunk_models(
        dist.spec, role="generator", m=128, seed=15, parameterization="anchored"
    )
    fakes = make_chunk_models(
        dist.spec, role="fake-score", m=64, seed=16, parameterization="anchored"
    )
    data = sample_clean(dist, 1500, seed=41)
    ed_before = energy_distance(rollout(generators, DEFAULT_GRID, seed=40, count=1500), data)
    cfg = TrainConfig(
        method="ridge", step_count=300, batch_size=256, learning_rate=0.05,
        fake_update_ratio=2,
    )
    dmd_train(generators, fakes, dist, DEFAULT_GRID, cfg, seed=17)
    ed_after = energy_distance(rollout(generators, DEFAULT_GRID, seed=40, count=1500), data)
    assert ed_after < 0.35 * ed_before


def test_dmd_validates_roles():
    dist = two_mode(3.0)
    generators = make_chunk_models(
        dist.spec, role="generator", m=8, seed=0, parameterization="anchored"
    )
    direct_fakes = make_chunk_models(dist.spec, role="fake-score", m=8, seed=1)
    with pytest.raises(ConfigError):
        dmd_train(generators, direct_fakes, dist, DEFAULT_GRID, TrainConfig(), seed=0)
    with pytest.raises(ConfigError):
        dmd_train(generators, generators, dist, DEFAULT_GRID, TrainConfig(), seed=0)


# ---------------------------------------------------------------------------
# stage 4: consistency training
# ---------------------------------------------------------------------------


def test_cd_requires_anchored_generators():
    direct = make_chunk_models(SPEC, role="generator", m=8, seed=0)
    with pytest.raises(ConfigError):
        cd_train(DIST, direct, TrainConfig(step_count=1), seed=0)
    velocity = make_chunk_models(SPEC, role="ar-velocity", m=8, seed=0)
    with pytest.raises(ConfigError):
        cd_train(DIST, velocity, TrainConfig(step_count=1), seed=0)
    anchored = make_chunk_models(
        SPEC, role="generator", m=8, seed=0, parameterization="anchored"
    )
    with pytest.raises(ConfigError):
        cd_train(DIST, anchored, TrainConfig(step_count=1), seed=0, grid_size=1)
    with pytest.raises(ConfigError):
        cd_train(
            DIST, anchored, TrainConfig(step_count=1), seed=0, teacher_kind="joint"
        )


def test_cd_boundary_is_exact_regardless_of_training():
    students = make_chunk_models(
        SPEC, role="generator", m=64, seed=18, parameterization="anchored"
    )
    cd_train(
        DIST, students,
        TrainConfig(method="ridge", step_count=8, batch_size=512, ema_rate=0.0),
        seed=19, grid_size=8,
    )
    x = np.array([[0.3], [-2.0]])
    y = np.array([[0.5], [0.5]])
    assert np.array_equal(predict_x0(students.member(2), x, y, 0.0), x)


def test_cd_fitted_iteration_improves_consistency():
    from ardlab.diagnostics import consistency_rms

    students = make_chunk_models(
        SPEC, role="generator", m=256, seed=20, parameterization="anchored"
    )
    init = consistency_rms(students, DIST, DEFAULT_GRID, 2, count=600, steps=120, seed=21)
    cd_train(
        DIST, students,
        TrainConfig(method="ridge", step_count=24, batch_size=2048, ema_rate=0.0),
        seed=22, grid_size=8,
    )
    after = consistency_rms(students, DIST, DEFAULT_GRID, 2, count=600, steps=120, seed=21)
    assert after["rms_gap"].value < 0.1
    assert after["rms_gap"].value < 0.2 * init["rms_gap"].value


def test_stage_result_rejects_nonfinite_trace():
    students = make_chunk_models(SPEC, role="generator", m=8, seed=0)
    with pytest.raises(DivergenceError):
        StageResult(
            models=students,
            loss_trace=np.array([1.0, np.nan]),
            config=TrainConfig(),
            master_seed=0,
            wall_seconds=0.0,
        )
