"""Training stages built on the random-feature students.

Four stages are implemented, all sharing TrainConfig and StageResult:

* train_ar_velocity -- per-chunk denoising regression toward the velocity
  target eps - x0, with the prefix fed either clean or independently noised
  at the chunk's own time.
* ode_distill -- regression of few-step generators onto (noisy snapshot,
  flow endpoint) pairs recorded by the ODE integrators.
* dmd_train -- distribution matching: the generator head descends the score
  difference between the exact conditional law and a learned law of its own
  samples.
* cd_train -- consistency training against a one-step teacher solve on a
  uniform time grid, with an EMA target head.

Generators are "anchored": G(x, prefix, t) = x - t * head(x, prefix, t), so
G at t = 0 is the identity map no matter what the head does.  Ridge fits for
anchored models scale feature rows by t and regress onto x - x0, which is the
same least-squares problem as matching G to x0 directly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .distributions import (
    SequenceDistribution,
    condition_clean_prefix_batch,
    sample_clean_with_rng,
)
from .errors import ConfigError, DivergenceError
from .models import (
    ChunkModelSet,
    LinearStudent,
    TrainConfig,
    ema_update,
    featurize,
    fit_ridge,
    predict,
    sgd_step,
)
from .models import predict_x0 as _predict_x0
from .ode import PairDataset, TimestepGrid, bi_velocity_field, integrate

DMD_DIVERGENCE_LIMIT = 1e6


@dataclass
class StageResult:
    """What a training stage hands back: the models plus bookkeeping."""

    models: ChunkModelSet
    loss_trace: np.ndarray
    config: TrainConfig
    master_seed: int
    wall_seconds: float
    info: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        trace = np.asarray(self.loss_trace, dtype=float)
        if not np.all(np.isfinite(trace)):
            raise DivergenceError("loss trace contains non-finite entries")
        self.loss_trace = trace


def _uniform_times(rng: np.random.Generator, n: int) -> np.ndarray:
    """Noise times uniform on (0, 1]; zero is excluded so scores stay finite."""
    return 1.0 - rng.random(n)


def _as_time_column(t) -> np.ndarray:
    t_arr = np.asarray(t, dtype=float)
    return t_arr[:, None] if t_arr.ndim == 1 else t_arr


def score_from_velocity(x: np.ndarray, v: np.ndarray, t) -> np.ndarray:
    """Score implied by a velocity field: s(x, t) = -(x + (1 - t) v) / t."""
    t_col = _as_time_column(t)
    return -(x + (1.0 - t_col) * v) / t_col


def implied_posterior_mean(model: LinearStudent, chunk, prefix, t) -> np.ndarray:
    """Posterior-mean readout x - t * v implied by a velocity model."""
    v = predict(model, chunk, prefix, t)
    chunk = np.asarray(chunk, dtype=float)
    if v.ndim == 2:
        return chunk - _as_time_column(t) * v
    return chunk - float(t) * v


# ---------------------------------------------------------------------------
# stage 1: autoregressive denoising regression
# ---------------------------------------------------------------------------


def _velocity_design(dist, n, rng, prefix_mode):
    """Sampled design shared by both prefix modes.

    Draw order is fixed (data, chunk indices, times, chunk noise, prefix
    noise) so the two modes consume identical streams for the shared draws.
    """
    spec = dist.spec
    x0 = sample_clean_with_rng(dist, n, rng)
    chunk_idx = rng.integers(1, spec.n_chunks + 1, size=n)
    t = _uniform_times(rng, n)
    eps_chunk = rng.standard_normal((n, spec.chunk_dim))
    if prefix_mode == "noisy":
        eps_prefix = rng.standard_normal((n, spec.total_dim))
        prefix_source = (1.0 - t)[:, None] * x0 + t[:, None] * eps_prefix
    else:
        prefix_source = x0
    return x0, chunk_idx, t, eps_chunk, prefix_source


def train_ar_diffusion_tf(
    dist: SequenceDistribution,
    students: ChunkModelSet,
    cfg: TrainConfig,
    seed: int = 0,
) -> StageResult:
    """Teacher-forced denoising regression: each chunk sees its clean past."""
    return _train_velocity(dist, students, cfg, seed, prefix_mode="clean")


def train_ar_diffusion_df(
    dist: SequenceDistribution,
    students: ChunkModelSet,
    cfg: TrainConfig,
    seed: int = 0,
) -> StageResult:
    """Diffusion-forced denoising regression: the past is independently
    re-noised at the chunk's own time, matching what the model sees when its
    inputs are still noisy at sampling time."""
    return _train_velocity(dist, students, cfg, seed, prefix_mode="noisy")


def _train_velocity(
    dist: SequenceDistribution,
    students: ChunkModelSet,
    cfg: TrainConfig,
    seed: int,
    prefix_mode: str,
) -> StageResult:
    """Fit per-chunk velocity students to the target eps - x0."""
    if prefix_mode not in ("clean", "noisy"):
        raise ConfigError(f"unknown prefix_mode {prefix_mode!r}")
    if students.role != "ar-velocity":
        raise ConfigError("train_ar_velocity expects ar-velocity students")
    if students.parameterization != "direct":
        raise ConfigError("velocity students must use the direct readout")
    spec = students.seq_spec
    if spec != dist.spec:
        raise ConfigError("student and distribution sequence layouts differ")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)

    if cfg.method == "ridge":
        n = cfg.step_count * cfg.batch_size
        x0, chunk_idx, t, eps_chunk, prefix_source = _velocity_design(
            dist, n, rng, prefix_mode
        )
        per_chunk = np.empty(spec.n_chunks)
        for i in range(1, spec.n_chunks + 1):
            rows = chunk_idx == i
            sl = spec.chunk_slice(i)
            t_i = t[rows]
            noisy = (1.0 - t_i)[:, None] * x0[rows, sl] + t_i[:, None] * eps_chunk[rows]
            target = eps_chunk[rows] - x0[rows, sl]
            prefix = prefix_source[rows, spec.prefix_slice(i)]
            phi = featurize(students.member(i).features, noisy, prefix, t_i)
            w = cfg.weight(t_i)
            theta = fit_ridge(phi, target, cfg.ridge_lambda, w)
            students.replace_member(
                i, LinearStudent(students.member(i).features, theta, "ar-velocity")
            )
            resid = phi @ theta - target
            per_chunk[i - 1] = float(np.mean(w[:, None] * resid**2))
        trace = np.array([float(np.mean(per_chunk))])
    else:
        per_chunk = None
        trace = np.empty(cfg.step_count)
        for step in range(cfg.step_count):
            i = int(rng.integers(1, spec.n_chunks + 1))
            x0, _, t, eps_chunk, prefix_source = _velocity_design(
                dist, cfg.batch_size, rng, prefix_mode
            )
            sl = spec.chunk_slice(i)
            noisy = (1.0 - t)[:, None] * x0[:, sl] + t[:, None] * eps_chunk
            target = eps_chunk - x0[:, sl]
            prefix = prefix_source[:, spec.prefix_slice(i)]
            member = students.member(i)
            phi = featurize(member.features, noisy, prefix, t)
            w = cfg.weight(t)
            resid = phi @ member.theta - target
            grad = (2.0 / cfg.batch_size) * phi.T @ (w[:, None] * resid)
            students.replace_member(i, sgd_step(member, grad, cfg.learning_rate))
            trace[step] = float(np.mean(w[:, None] * resid**2))

    info = {"prefix_mode": prefix_mode, "mode": cfg.method}
    if per_chunk is not None:
        info["per_chunk_loss"] = per_chunk
    return StageResult(
        models=students,
        loss_trace=trace,
        config=cfg,
        master_seed=seed,
        wall_seconds=time.perf_counter() - start,
        info=info,
    )


# ---------------------------------------------------------------------------
# stage 2: distillation onto ODE pairs
# ---------------------------------------------------------------------------


def _sibling_snapshots(dataset: PairDataset):
    """(seed, chunk) -> record lookup for noisy-prefix assembly."""
    lookup: dict[tuple[int, int], object] = {}
    for rec in dataset.records:
        lookup[(rec.seed, rec.chunk_index)] = rec
    return lookup


def _distill_design(dataset: PairDataset, prefix_mode: str):
    """Per-chunk (noisy chunk, prefix, time, endpoint) rows from a dataset."""
    spec = dataset.spec
    times = list(dataset.grid)
    lookup = _sibling_snapshots(dataset) if prefix_mode == "noisy" else None
    design: dict[int, dict[str, np.ndarray]] = {}
    for i in range(1, spec.n_chunks + 1):
        recs = dataset.records_for_chunk(i)
        if not recs:
            raise ConfigError(f"dataset has no records for chunk {i}")
        n = len(recs) * len(times)
        chunk_in = np.empty((n, spec.chunk_dim))
        prefix = np.empty((n, spec.prefix_dim(i)))
        t_col = np.empty(n)
        target = np.empty((n, spec.chunk_dim))
        row = 0
        for rec in recs:
            for t in times:
                chunk_in[row] = rec.snapshots[t]
                if prefix_mode == "noisy" and i > 1:
                    prefix[row] = np.concatenate(
                        [lookup[(rec.seed, j)].snapshots[t] for j in range(1, i)]
                    )
                else:
                    prefix[row] = rec.prefix
                t_col[row] = t
                target[row] = rec.endpoint
                row += 1
        design[i] = {
            "chunk": chunk_in,
            "prefix": prefix,
            "t": t_col,
            "target": target,
        }
    return design


def ode_distill(
    dataset: PairDataset,
    students: ChunkModelSet,
    cfg: TrainConfig,
    seed: int = 0,
    prefix_mode: str = "clean",
) -> StageResult:
    """Regress few-step generators onto recorded flow endpoints.

    Every record contributes one row per grid time: predict the record's
    endpoint from its snapshot at that time.  prefix_mode "noisy" swaps the
    stored clean prefix for the sibling chunks' snapshots at the same time,
    which only exists for jointly-integrated datasets.
    """
    if prefix_mode not in ("clean", "noisy"):
        raise ConfigError(f"unknown prefix_mode {prefix_mode!r}")
    if prefix_mode == "noisy" and dataset.provenance != "bidirectional":
        raise ConfigError(
            "noisy-prefix distillation needs a jointly-integrated dataset; "
            f"got provenance {dataset.provenance!r}"
        )
    if students.role != "generator":
        raise ConfigError("ode_distill expects generator students")
    if students.seq_spec != dataset.spec:
        raise ConfigError("student and dataset sequence layouts differ")
    spec = students.seq_spec
    anchored = students.parameterization == "anchored"
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    design = _distill_design(dataset, prefix_mode)

    def residual(member, rows, theta=None):
        theta = member.theta if theta is None else theta
        phi = featurize(member.features, rows["chunk"], rows["prefix"], rows["t"])
        out = phi @ theta
        if anchored:
            pred = rows["chunk"] - rows["t"][:, None] * out
        else:
            pred = out
        return phi, pred - rows["target"]

    if cfg.method == "ridge":
        per_chunk = np.empty(spec.n_chunks)
        for i in range(1, spec.n_chunks + 1):
            rows = design[i]
            member = students.member(i)
            phi = featurize(member.features, rows["chunk"], rows["prefix"], rows["t"])
            w = cfg.weight(rows["t"])
            if anchored:
                theta = fit_ridge(
                    phi * rows["t"][:, None],
                    rows["chunk"] - rows["target"],
                    cfg.ridge_lambda,
                    w,
                )
            else:
                theta = fit_ridge(phi, rows["target"], cfg.ridge_lambda, w)
            students.replace_member(
                i,
                LinearStudent(
                    member.features, theta, "generator", member.parameterization
                ),
            )
            _, resid = residual(students.member(i), rows)
            per_chunk[i - 1] = float(np.mean(w[:, None] * resid**2))
        trace = np.array([float(np.mean(per_chunk))])
    else:
        per_chunk = None
        trace = np.empty(cfg.step_count)
        for step in range(cfg.step_count):
            i = int(rng.integers(1, spec.n_chunks + 1))
            rows_all = design[i]
            pick = rng.integers(0, rows_all["t"].size, size=cfg.batch_size)
            rows = {k: v[pick] for k, v in rows_all.items()}
            member = students.member(i)
            phi, resid = residual(member, rows)
            w = cfg.weight(rows["t"])
            wr = w[:, None] * resid
            if anchored:
                grad = -(2.0 / cfg.batch_size) * (phi * rows["t"][:, None]).T @ wr
            else:
                grad = (2.0 / cfg.batch_size) * phi.T @ wr
            students.replace_member(i, sgd_step(member, grad, cfg.learning_rate))
            trace[step] = float(np.mean(wr * resid))

    info = {
        "prefix_mode": prefix_mode,
        "mode": cfg.method,
        "rows_per_chunk": {i: design[i]["t"].size for i in design},
    }
    if per_chunk is not None:
        info["per_chunk_loss"] = per_chunk
    return StageResult(
        models=students,
        loss_trace=trace,
        config=cfg,
        master_seed=seed,
        wall_seconds=time.perf_counter() - start,
        info=info,
    )


# ---------------------------------------------------------------------------
# few-step sampling and rollout
# ---------------------------------------------------------------------------


def _sample_chunk_batch(model, prefixes, grid, rng, capture=False):
    """Few-step re-noising sampler for one chunk over a prefix batch.

    Start from pure noise at t = 1, alternate clean prediction with forward
    re-noising at the next grid time, and return the final clean prediction.
    With capture=True also return the model input and time of the final
    prediction, which is all a head-gradient needs.
    """
    n = prefixes.shape[0]
    x = rng.standard_normal((n, model.features.chunk_dim))
    final_inputs = None
    for k, t in enumerate(grid):
        if k == len(grid) - 1 and capture:
            final_inputs = (x.copy(), float(t))
        x0_hat = _predict_x0(model, x, prefixes, float(t))
        if k < len(grid) - 1:
            t_next = float(grid[k + 1])
            eps = rng.standard_normal((n, model.features.chunk_dim))
            x = (1.0 - t_next) * x0_hat + t_next * eps
    if capture:
        return x0_hat, final_inputs
    return x0_hat


def few_step_sample_batch(
    model: LinearStudent, grid: TimestepGrid, prefixes: np.ndarray, seed: int = 0
) -> np.ndarray:
    """Draw one chunk per prefix row with the few-step sampler."""
    rng = np.random.default_rng(seed)
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=float))
    return _sample_chunk_batch(model, prefixes, grid, rng)


def few_step_sample(
    model: LinearStudent, grid: TimestepGrid, prefix, seed: int = 0
) -> np.ndarray:
    """Single-draw convenience wrapper around few_step_sample_batch."""
    prefix = np.asarray(prefix, dtype=float).reshape(1, -1)
    return few_step_sample_batch(model, grid, prefix, seed)[0]


def _rollout_batch(models: ChunkModelSet, grid, count, rng) -> np.ndarray:
    spec = models.seq_spec
    out = np.empty((count, spec.total_dim))
    for i in range(1, spec.n_chunks + 1):
        prefix = out[:, : (i - 1) * spec.chunk_dim]
        out[:, spec.chunk_slice(i)] = _sample_chunk_batch(
            models.member(i), prefix, grid, rng
        )
    return out


def rollout(
    models: ChunkModelSet, grid: TimestepGrid, seed: int = 0, count: int = 1
) -> np.ndarray:
    """Sample full sequences chunk by chunk, each conditioned on its own past."""
    rng = np.random.default_rng(seed)
    out = _rollout_batch(models, grid, count, rng)
    return out[0] if count == 1 else out


def learned_conditional_endpoints(
    model: LinearStudent,
    prefixes: np.ndarray,
    seed: int = 0,
    steps: int = 256,
    method: str = "heun",
) -> np.ndarray:
    """Integrate a trained velocity model from fresh noise to t = 0.

    This is the many-step sampler for one chunk's learned conditional law;
    each prefix row gets its own trajectory.
    """
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=float))
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((prefixes.shape[0], model.features.chunk_dim))

    def field_fn(x, t):
        return predict(model, x, prefixes, t)

    out, _ = integrate(field_fn, x1, 1.0, 0.0, steps, method)
    return out


# ---------------------------------------------------------------------------
# stage 3: distribution matching
# ---------------------------------------------------------------------------


def dmd_generator_gradient(
    model: LinearStudent,
    final_chunk_in: np.ndarray,
    prefixes: np.ndarray,
    t_last: float,
    delta: np.ndarray,
) -> np.ndarray:
    """Head gradient -mean_b delta_b (d sample_b / d theta).

    Gradients flow only through the sampler's final prediction.  For the
    anchored readout x - t * head the sample's sensitivity to head column k
    is -t_last * phi, so the estimate is (t_last / B) Phi^T delta; the direct
    readout drops the -t_last factor.
    """
    phi = featurize(model.features, final_chunk_in, prefixes, t_last)
    n = phi.shape[0]
    if model.parameterization == "anchored":
        return (t_last / n) * phi.T @ delta
    return -(phi.T @ delta) / n


def _dmd_prefixes(generators, dist, i, n, rng, prefix_source, grid):
    if prefix_source == "data":
        x_gt = sample_clean_with_rng(dist, n, rng)
        return x_gt[:, dist.spec.prefix_slice(i)]
    spec = generators.seq_spec
    prefix = np.empty((n, 0))
    for j in range(1, i):
        chunk = _sample_chunk_batch(generators.member(j), prefix, grid, rng)
        prefix = np.concatenate([prefix, chunk], axis=1)
    return prefix


def fake_score(model: LinearStudent, chunk, prefix, t) -> np.ndarray:
    """Score of the fake model's anchored velocity field: -x - (1 - t) head.

    The fake velocity is parameterized v(x, t) = -x + t * head(x, t), which
    is exact at t = 0 (where the velocity of any law is -x + E[eps|x] = -x)
    and whose implied score -(x + (1 - t) v) / t simplifies to the bounded
    form above.  A free-form velocity head would instead contribute
    fit-error / t to the score, and uniform time draws near 0 would blow the
    score difference up no matter how well the head fits.
    """
    chunk = np.asarray(chunk, dtype=float)
    t_col = _as_time_column(t)
    return -chunk - (1.0 - t_col) * predict(model, chunk, prefix, t)


def _fake_design(generators, dist, i, n, grid, rng, prefix_source):
    """Fresh generator samples noised at uniform times, plus the regression
    pieces for the anchored fake field: design scale t and bounded target
    (eps - x~) + x_t."""
    prefixes = _dmd_prefixes(generators, dist, i, n, rng, prefix_source, grid)
    fake_x0 = _sample_chunk_batch(generators.member(i), prefixes, grid, rng)
    t = _uniform_times(rng, n)
    eps = rng.standard_normal(fake_x0.shape)
    noisy = (1.0 - t)[:, None] * fake_x0 + t[:, None] * eps
    target = (eps - fake_x0) + noisy
    return prefixes, noisy, t, target


def _dmd_fake_refit(fake_models, generators, dist, i, grid, cfg, rng, prefix_source):
    """Refit the chunk-i fake head on fresh generator samples.

    One closed-form fit per generator step, on fake_update_ratio * batch_size
    rows, plays the role of that many inner updates.
    """
    n = cfg.fake_update_ratio * cfg.batch_size
    prefixes, noisy, t, target = _fake_design(
        generators, dist, i, n, grid, rng, prefix_source
    )
    member = fake_models.member(i)
    phi = featurize(member.features, noisy, prefixes, t)
    theta = fit_ridge(phi * t[:, None], target, cfg.ridge_lambda, cfg.weight(t))
    fake_models.replace_member(
        i, LinearStudent(member.features, theta, "fake-score", "anchored")
    )


def _dmd_fake_sgd(fake_models, generators, dist, i, grid, cfg, rng, prefix_source):
    for _ in range(cfg.fake_update_ratio):
        prefixes, noisy, t, target = _fake_design(
            generators, dist, i, cfg.batch_size, grid, rng, prefix_source
        )
        member = fake_models.member(i)
        phi = featurize(member.features, noisy, prefixes, t) * t[:, None]
        w = cfg.weight(t)
        resid = phi @ member.theta - target
        grad = (2.0 / cfg.batch_size) * phi.T @ (w[:, None] * resid)
        fake_models.replace_member(i, sgd_step(member, grad, cfg.learning_rate))


def dmd_train(
    generators: ChunkModelSet,
    fake_models: ChunkModelSet,
    dist: SequenceDistribution,
    grid: TimestepGrid,
    cfg: TrainConfig,
    seed: int = 0,
    prefix_source: str = "data",
    force_real_fake: bool = False,
) -> StageResult:
    """Distribution-matching updates of few-step generators.

    Per step: draw prefixes, sample the generator few-step, noise the samples
    at a fresh uniform time, and step the head along the score difference
    between the exact conditional law and a fake law fitted to the
    generator's own output (fake_update_ratio fresh-fit updates per
    generator update).  force_real_fake substitutes the exact score for the
    fake one, which makes the update identically zero and is only useful as
    a control.  The trace records mean |score difference|^2 per step; a trace
    above DMD_DIVERGENCE_LIMIT aborts with DivergenceError.
    """
    if prefix_source not in ("data", "rollout"):
        raise ConfigError(f"unknown prefix_source {prefix_source!r}")
    if generators.role != "generator":
        raise ConfigError("dmd_train expects generator students")
    if fake_models.role != "fake-score":
        raise ConfigError("dmd_train expects fake-score companions")
    if fake_models.parameterization != "anchored":
        raise ConfigError(
            "fake-score models must use the anchored readout; see fake_score"
        )
    if generators.seq_spec != dist.spec or fake_models.seq_spec != dist.spec:
        raise ConfigError("model and distribution sequence layouts differ")
    spec = dist.spec
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    trace = np.empty(cfg.step_count)

    for step in range(cfg.step_count):
        i = int(rng.integers(1, spec.n_chunks + 1))
        if not force_real_fake:
            if cfg.method == "ridge":
                _dmd_fake_refit(
                    fake_models, generators, dist, i, grid, cfg, rng, prefix_source
                )
            else:
                _dmd_fake_sgd(
                    fake_models, generators, dist, i, grid, cfg, rng, prefix_source
                )
        prefixes = _dmd_prefixes(
            generators, dist, i, cfg.batch_size, rng, prefix_source, grid
        )
        member = generators.member(i)
        x_tilde, (final_in, t_last) = _sample_chunk_batch(
            member, prefixes, grid, rng, capture=True
        )
        t = _uniform_times(rng, cfg.batch_size)
        eps = rng.standard_normal(x_tilde.shape)
        x_t = (1.0 - t)[:, None] * x_tilde + t[:, None] * eps
        cond = condition_clean_prefix_batch(dist, i, prefixes)
        s_real = cond.score(x_t, t)
        if force_real_fake:
            s_fake = s_real
        else:
            s_fake = fake_score(fake_models.member(i), x_t, prefixes, t)
        delta = s_real - s_fake
        trace[step] = float(np.mean(np.sum(delta**2, axis=1)))
        if not np.isfinite(trace[step]) or trace[step] > DMD_DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"score difference blew up at step {step}: {trace[step]:.3e}"
            )
        grad = dmd_generator_gradient(member, final_in, prefixes, t_last, delta)
        generators.replace_member(i, sgd_step(member, grad, cfg.learning_rate))

    return StageResult(
        models=generators,
        loss_trace=trace,
        config=cfg,
        master_seed=seed,
        wall_seconds=time.perf_counter() - start,
        info={"prefix_source": prefix_source, "fake_models": fake_models},
    )


# ---------------------------------------------------------------------------
# stage 4: consistency training
# ---------------------------------------------------------------------------


def _teacher_velocity(teacher, dist, i, prefixes, teacher_kind):
    """Velocity callable for one consistency step.

    autoregressive: chunk-conditional field given the step's clean prefixes,
    from the oracle (teacher None) or a trained velocity set.
    bidirectional: full-dimension joint oracle field.
    """
    if teacher_kind == "bidirectional":
        return bi_velocity_field(dist)
    if teacher is None:
        cond = condition_clean_prefix_batch(dist, i, prefixes)
        return lambda x, t: (x - cond.posterior_mean(x, t)) / _as_time_column(t)
    member = teacher.member(i)
    return lambda x, t: predict(member, x, prefixes, t)


def _one_teacher_step(field_fn, x, t, dt_mag):
    """One solver step from per-row times t down to t - dt_mag.

    Interior rows take a Heun step; rows landing exactly at 0 use the
    endpoint rule x - t * v(x, t), mirroring the integrator's last step.
    """
    t_next = t - dt_mag
    boundary = t_next <= 1e-12
    v0 = field_fn(x, t)
    euler = x - dt_mag * v0
    t_safe = np.where(boundary, dt_mag, t_next)
    v1 = field_fn(euler, t_safe)
    heun = x - 0.5 * dt_mag * (v0 + v1)
    return np.where(boundary[:, None], euler, heun), t_next


def cd_train(
    dist: SequenceDistribution,
    students: ChunkModelSet,
    cfg: TrainConfig,
    seed: int = 0,
    grid_size: int = 48,
    teacher=None,
    teacher_kind: str = "autoregressive",
) -> StageResult:
    """Consistency training on the uniform grid t_k = k / grid_size.

    Per step: noise ground-truth chunks at a random grid time, solve one
    teacher step backward, and pull the student's prediction toward the EMA
    target head's prediction at the earlier time.  teacher_kind
    "bidirectional" noises the whole sequence and solves the joint field
    instead, so chunk targets come from a one-step joint solve; the student
    still conditions on the clean prefix.

    cfg.method picks the inner optimizer.  "sgd" takes one gradient step on
    the consistency loss per draw.  "ridge" solves the same regression in
    closed form against the frozen targets (fitted iteration); information
    then propagates one grid cell per refit instead of diffusing at SGD
    speed, so a few dozen steps with a large batch replace thousands of
    gradient updates.
    """
    if grid_size < 2:
        raise ConfigError("consistency training needs a grid of at least 2 steps")
    if teacher_kind not in ("autoregressive", "bidirectional"):
        raise ConfigError(f"unknown teacher_kind {teacher_kind!r}")
    if teacher_kind == "bidirectional" and teacher is not None:
        raise ConfigError("the bidirectional teacher is always the exact field")
    if students.role != "generator":
        raise ConfigError("cd_train expects generator students")
    if students.parameterization != "anchored":
        raise ConfigError(
            "consistency training requires anchored students; the identity "
            "boundary at t = 0 is what the recursion bottoms out on"
        )
    spec = students.seq_spec
    if spec != dist.spec:
        raise ConfigError("student and distribution sequence layouts differ")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    dt = 1.0 / grid_size
    theta_minus = {
        i: students.member(i).theta.copy() for i in range(1, spec.n_chunks + 1)
    }
    trace = np.empty(cfg.step_count)

    for step in range(cfg.step_count):
        i = int(rng.integers(1, spec.n_chunks + 1))
        x_gt = sample_clean_with_rng(dist, cfg.batch_size, rng)
        k = rng.integers(1, grid_size + 1, size=cfg.batch_size)
        t = k * dt
        prefixes = x_gt[:, spec.prefix_slice(i)]
        member = students.member(i)
        if teacher_kind == "autoregressive":
            eps = rng.standard_normal((cfg.batch_size, spec.chunk_dim))
            x_t = (1.0 - t)[:, None] * x_gt[:, spec.chunk_slice(i)] + t[:, None] * eps
            field_fn = _teacher_velocity(teacher, dist, i, prefixes, teacher_kind)
            x_prev, t_prev = _one_teacher_step(field_fn, x_t, t, dt)
            student_in = x_t
        else:
            eps = rng.standard_normal((cfg.batch_size, spec.total_dim))
            x_t_full = (1.0 - t)[:, None] * x_gt + t[:, None] * eps
            field_fn = _teacher_velocity(teacher, dist, i, prefixes, teacher_kind)
            x_prev_full, t_prev = _one_teacher_step(field_fn, x_t_full, t, dt)
            student_in = x_t_full[:, spec.chunk_slice(i)]
            x_prev = x_prev_full[:, spec.chunk_slice(i)]
        phi = featurize(member.features, student_in, prefixes, t)
        pred = student_in - t[:, None] * (phi @ member.theta)
        target_model = LinearStudent(
            member.features, theta_minus[i], "generator", "anchored"
        )
        target = _predict_x0(target_model, x_prev, prefixes, t_prev)
        diff = pred - target
        trace[step] = float(np.mean(diff**2))
        if cfg.method == "ridge":
            theta_new = fit_ridge(
                phi * t[:, None], student_in - target, cfg.ridge_lambda
            )
            students.replace_member(
                i, LinearStudent(member.features, theta_new, "generator", "anchored")
            )
        else:
            grad = -(2.0 / cfg.batch_size) * (phi * t[:, None]).T @ diff
            students.replace_member(i, sgd_step(member, grad, cfg.learning_rate))
        theta_minus[i] = ema_update(
            theta_minus[i], students.member(i).theta, cfg.ema_rate
        )

    return StageResult(
        models=students,
        loss_trace=trace,
        config=cfg,
        master_seed=seed,
        wall_seconds=time.perf_counter() - start,
        info={"grid_size": grid_size, "teacher_kind": teacher_kind},
    )
