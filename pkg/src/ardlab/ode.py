"""Probability-flow ODE machinery: velocity fields, integration, pair datasets.

The joint field transports the noised mixture law back to the data law; the
autoregressive field does the same for one chunk's conditional law given a
clean prefix.  Pair datasets record (noisy snapshot, clean endpoint) couples
produced by integrating these fields from t = 1 to t = 0.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    BatchedConditional,
    NoisyState,
    SequenceDistribution,
    SequenceSpec,
    _mixture_posterior_mean,
    condition_clean_prefix_batch,
    sample_clean_with_rng,
)
from .errors import DivergenceError, GridError

_NODE_TOL = 1e-9
_BLOCK = 512

DATASET_STEPS = 256
ORACLE_STEPS = 1024

WORKERS_ENV = "ARDLAB_WORKERS"


# ---------------------------------------------------------------------------
# timestep grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimestepGrid:
    """Strictly decreasing denoising times in (0, 1], starting at exactly 1."""

    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if not times:
            raise GridError("a timestep grid needs at least one time")
        if times[0] != 1.0:
            raise GridError("the first grid time must be 1.0")
        for t in times:
            if not (0.0 < t <= 1.0):
                raise GridError("grid times must lie in (0, 1]")
        if any(b >= a for a, b in zip(times, times[1:])):
            raise GridError("grid times must be strictly decreasing")
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        return iter(self.times)

    def __getitem__(self, k):
        return self.times[k]


DEFAULT_GRID = TimestepGrid((1.0, 0.9375, 0.8333, 0.625))


# ---------------------------------------------------------------------------
# velocity fields
# ---------------------------------------------------------------------------


def velocity_bi(dist: SequenceDistribution, state: NoisyState) -> np.ndarray:
    """Joint-field velocity (x_t - E[x0 | x_t]) / t at the given state."""
    if state.time <= 0.0:
        raise ValueError("the velocity field is defined for t > 0 only")
    x = np.asarray(state.values, dtype=float)
    batch = np.atleast_2d(x)
    m = _mixture_posterior_mean(
        dist._log_w, dist._means, dist._eigvecs, dist._eigvals, batch, state.time
    )
    v = (batch - m) / state.time
    return v[0] if x.ndim == 1 else v


def _div_time(num: np.ndarray, t) -> np.ndarray:
    """Divide rows by a scalar time or by one time per row."""
    t_arr = np.asarray(t, dtype=float)
    if t_arr.ndim == 1:
        return num / t_arr[:, None]
    return num / float(t_arr)


def bi_velocity_field(dist: SequenceDistribution):
    """Velocity callable f(x, t) over row batches for the joint field."""

    def field_fn(x, t):
        m = _mixture_posterior_mean(
            dist._log_w, dist._means, dist._eigvecs, dist._eigvals, x, t
        )
        return _div_time(x - m, t)

    return field_fn


def conditional_velocity_field(cond: BatchedConditional):
    """Velocity callable over row batches for per-row conditional mixtures."""

    def field_fn(x, t):
        return _div_time(x - cond.posterior_mean(x, t), t)

    return field_fn


def velocity_ar(teacher, i: int, prefix: np.ndarray, x, t: float) -> np.ndarray:
    """Chunk-i conditional velocity given a clean prefix.

    `teacher` may be a SequenceDistribution (exact oracle) or a trained
    velocity model set; both expose the same (x, prefix, t) -> velocity map.
    """
    if t <= 0.0:
        raise ValueError("the velocity field is defined for t > 0 only")
    x = np.asarray(x, dtype=float)
    batch = np.atleast_2d(x)
    if isinstance(teacher, SequenceDistribution):
        prefixes = np.broadcast_to(
            np.asarray(prefix, dtype=float).reshape(-1), (batch.shape[0], teacher.spec.prefix_dim(i))
        )
        cond = condition_clean_prefix_batch(teacher, i, prefixes)
        v = (batch - cond.posterior_mean(batch, t)) / t
    else:
        model = teacher.member(i)
        from .models import predict

        pref = np.broadcast_to(
            np.asarray(prefix, dtype=float).reshape(-1), (batch.shape[0], model.features.prefix_dim)
        )
        v = predict(model, batch, pref, t)
    return v[0] if x.ndim == 1 else v


# ---------------------------------------------------------------------------
# fixed-step integration
# ---------------------------------------------------------------------------


def integrate(
    field_fn,
    x_start: np.ndarray,
    t_from: float,
    t_to: float,
    steps: int,
    method: str = "heun",
    snapshot_times=None,
):
    """Integrate dx/dt = field(x, t) on a uniform grid from t_from down to t_to.

    Snapshot times must coincide with grid nodes (within 1e-9).  When t_to is
    exactly 0 the final sub-step applies the endpoint rule
    x_0 = x - t_min * field(x, t_min), which avoids evaluating the field at
    the singular time 0 and is exact in the small-step limit.

    Returns (endpoint, snapshots) where snapshots maps each requested time to
    the state recorded at that node.
    """
    if method not in ("euler", "heun"):
        raise ValueError(f"unknown method {method!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0.0 <= t_to < t_from <= 1.0):
        raise ValueError("need 0 <= t_to < t_from <= 1")
    ts = np.linspace(t_from, t_to, steps + 1)
    wanted: dict[int, float] = {}
    for s in snapshot_times or ():
        k = int(round((t_from - s) / (t_from - t_to) * steps))
        if not (0 <= k <= steps) or abs(ts[k] - s) > _NODE_TOL:
            raise GridError(f"snapshot time {s} is not a node of the integration grid")
        wanted[k] = float(s)
    x = np.array(x_start, dtype=float)
    snapshots: dict[float, np.ndarray] = {}
    if 0 in wanted:
        snapshots[wanted[0]] = x.copy()
    terminal = t_to == 0.0
    for k in range(steps):
        t0 = float(ts[k])
        t1 = float(ts[k + 1])
        if terminal and k == steps - 1:
            x = x - t0 * field_fn(x, t0)
        else:
            dt = t1 - t0
            v0 = field_fn(x, t0)
            if method == "euler":
                x = x + dt * v0
            else:
                pred = x + dt * v0
                x = x + 0.5 * dt * (v0 + field_fn(pred, t1))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state while stepping to t={t1}")
        if k + 1 in wanted:
            snapshots[wanted[k + 1]] = x.copy()
    return x, snapshots


def flow_map_bi(
    dist: SequenceDistribution,
    values: np.ndarray,
    t: float,
    steps: int = ORACLE_STEPS,
    method: str = "heun",
) -> np.ndarray:
    """Transport x_t to its clean endpoint along the joint flow."""
    values = np.asarray(values, dtype=float)
    batch = np.atleast_2d(values)
    out, _ = integrate(bi_velocity_field(dist), batch, t, 0.0, steps, method)
    return out[0] if values.ndim == 1 else out


def flow_map_ar(
    teacher,
    i: int,
    prefix: np.ndarray,
    values: np.ndarray,
    t: float,
    steps: int = ORACLE_STEPS,
    method: str = "heun",
) -> np.ndarray:
    """Transport chunk-i values to the conditional flow endpoint given a prefix."""
    values = np.asarray(values, dtype=float)
    batch = np.atleast_2d(values)
    if isinstance(teacher, SequenceDistribution):
        prefixes = np.broadcast_to(
            np.asarray(prefix, dtype=float).reshape(-1),
            (batch.shape[0], teacher.spec.prefix_dim(i)),
        )
        cond = condition_clean_prefix_batch(teacher, i, prefixes)
        field_fn = conditional_velocity_field(cond)
    else:
        def field_fn(x, tt):
            return velocity_ar(teacher, i, prefix, x, tt)

    out, _ = integrate(field_fn, batch, t, 0.0, steps, method)
    return out[0] if values.ndim == 1 else out


def gaussian_flow_map(mean: np.ndarray, cov: np.ndarray, t: float):
    """Closed-form affine flow map x_0 = M x_t + b for one Gaussian component.

    Per eigenmode the flow preserves (x_t - a mu) / sqrt(a^2 lam + s^2), so
    M = Q diag(sqrt(lam) / sqrt(a^2 lam + t^2)) Q^T and b = mu - a M mu.
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    lam, q = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    a = 1.0 - t
    scale = np.sqrt(lam) / np.sqrt(a * a * lam + t * t)
    m = (q * scale[None, :]) @ q.T
    b = mean - a * (m @ mean)
    return m, b


# ---------------------------------------------------------------------------
# pair datasets
# ---------------------------------------------------------------------------


@dataclass
class ODEPairRecord:
    """One chunk of one trajectory: noisy snapshots and the clean endpoint."""

    chunk_index: int
    seed: int
    prefix: np.ndarray
    snapshots: dict[float, np.ndarray]
    endpoint: np.ndarray
    provenance: str


@dataclass
class PairDataset:
    spec: SequenceSpec
    grid: TimestepGrid
    provenance: str
    records: list[ODEPairRecord]
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def records_for_chunk(self, i: int) -> list[ODEPairRecord]:
        return [r for r in self.records if r.chunk_index == i]


def _record_seeds(master_seed: int, count: int) -> np.ndarray:
    """Counter-based split of the master seed into one seed per record."""
    return np.random.SeedSequence(master_seed).generate_state(count, dtype=np.uint64)


def _segment_plan(grid: TimestepGrid, steps: int):
    """Chain of (t_hi, t_lo, sub_steps) segments covering grid[0] down to 0.

    Each requested grid time becomes a segment boundary, so every snapshot is
    an exact node of its uniform sub-grid; sub-step counts are allocated
    proportionally to segment length.
    """
    bounds = list(grid.times) + [0.0]
    total = bounds[0]
    plan = []
    for hi, lo in zip(bounds, bounds[1:]):
        sub = max(1, int(round(steps * (hi - lo) / total)))
        plan.append((hi, lo, sub))
    return plan


def _integrate_segments(field_fn, x, plan, method):
    """Run the segment chain, recording the state at every boundary."""
    snaps = {plan[0][0]: x.copy()}
    for hi, lo, sub in plan:
        x, _ = integrate(field_fn, x, hi, lo, sub, method)
        if lo > 0.0:
            snaps[lo] = x.copy()
    return x, snaps


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def _map_blocks(worker, arg_blocks):
    n_workers = _worker_count()
    if n_workers <= 1 or len(arg_blocks) <= 1:
        return [worker(args) for args in arg_blocks]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker, arg_blocks))


def _bi_block(args):
    dist, grid, steps, method, seeds = args
    dim = dist.spec.total_dim
    x1 = np.empty((len(seeds), dim))
    for r, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        x1[r] = rng.standard_normal(dim)
    plan = _segment_plan(grid, steps)
    endpoint, snaps = _integrate_segments(bi_velocity_field(dist), x1, plan, method)
    return endpoint, snaps


def make_pairs_bi(
    dist: SequenceDistribution,
    grid: TimestepGrid = DEFAULT_GRID,
    count: int = 1000,
    steps: int = DATASET_STEPS,
    seed: int = 0,
    method: str = "heun",
) -> PairDataset:
    """Integrate the joint flow from fresh noise and emit per-chunk records.

    Record prefixes are the trajectory's own endpoint chunks, so a record's
    "clean prefix" is the generated past, not ground-truth data.
    """
    spec = dist.spec
    seeds = _record_seeds(seed, count)
    blocks = [
        (dist, grid, steps, method, seeds[lo : lo + _BLOCK])
        for lo in range(0, count, _BLOCK)
    ]
    records: list[ODEPairRecord] = []
    results = _map_blocks(_bi_block, blocks)
    for (endpoint, snaps), block in zip(results, blocks):
        block_seeds = block[4]
        for r in range(len(block_seeds)):
            for i in range(1, spec.n_chunks + 1):
                sl = spec.chunk_slice(i)
                records.append(
                    ODEPairRecord(
                        chunk_index=i,
                        seed=int(block_seeds[r]),
                        prefix=endpoint[r, spec.prefix_slice(i)].copy(),
                        snapshots={t: snaps[t][r, sl].copy() for t in grid},
                        endpoint=endpoint[r, sl].copy(),
                        provenance="bidirectional",
                    )
                )
    return PairDataset(
        spec=spec,
        grid=grid,
        provenance="bidirectional",
        records=records,
        metadata={
            "teacher": "oracle-bidirectional",
            "solver": method,
            "steps": steps,
            "master_seed": seed,
        },
    )


def _causal_block(args):
    dist, teacher, grid, steps, method, seeds = args
    spec = dist.spec
    n = len(seeds)
    dim = spec.total_dim
    cd = spec.chunk_dim
    gt = np.empty((n, dim))
    eps = np.empty((n, spec.n_chunks, cd))
    for r, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        gt[r] = sample_clean_with_rng(dist, 1, rng)[0]
        for i in range(spec.n_chunks):
            eps[r, i] = rng.standard_normal(cd)
    plan = _segment_plan(grid, steps)
    endpoints = np.empty((n, spec.n_chunks, cd))
    snapshots = []
    for i in range(1, spec.n_chunks + 1):
        prefixes = gt[:, spec.prefix_slice(i)]
        if teacher is None:
            cond = condition_clean_prefix_batch(dist, i, prefixes)
            field_fn = conditional_velocity_field(cond)
        else:
            model = teacher.member(i)
            from .models import predict

            def field_fn(x, t, _model=model, _pref=prefixes):
                return predict(_model, x, _pref, t)

        end, snaps = _integrate_segments(field_fn, eps[:, i - 1], plan, method)
        endpoints[:, i - 1] = end
        snapshots.append(snaps)
    return gt, endpoints, snapshots


def make_pairs_causal(
    dist: SequenceDistribution,
    grid: TimestepGrid = DEFAULT_GRID,
    count: int = 1000,
    steps: int = DATASET_STEPS,
    seed: int = 0,
    method: str = "heun",
    teacher=None,
) -> PairDataset:
    """Per-chunk conditional flows from fresh noise, prefixed by ground truth.

    Each record's prefix holds clean data chunks; the chunk trajectory solves
    the conditional flow for that prefix.  `teacher` may be a trained
    velocity model set; by default the exact conditional field is used.
    """
    spec = dist.spec
    seeds = _record_seeds(seed, count)
    provenance = (
        "autoregressive-oracle" if teacher is None else "autoregressive-learned"
    )
    blocks = [
        (dist, teacher, grid, steps, method, seeds[lo : lo + _BLOCK])
        for lo in range(0, count, _BLOCK)
    ]
    results = _map_blocks(_causal_block, blocks)
    records: list[ODEPairRecord] = []
    for (gt, endpoints, snapshots), block in zip(results, blocks):
        block_seeds = block[5]
        for r in range(len(block_seeds)):
            for i in range(1, spec.n_chunks + 1):
                records.append(
                    ODEPairRecord(
                        chunk_index=i,
                        seed=int(block_seeds[r]),
                        prefix=gt[r, spec.prefix_slice(i)].copy(),
                        snapshots={
                            t: snapshots[i - 1][t][r].copy() for t in grid
                        },
                        endpoint=endpoints[r, i - 1].copy(),
                        provenance=provenance,
                    )
                )
    return PairDataset(
        spec=spec,
        grid=grid,
        provenance=provenance,
        records=records,
        metadata={
            "teacher": "oracle-autoregressive" if teacher is None else "learned-autoregressive",
            "solver": method,
            "steps": steps,
            "master_seed": seed,
        },
    )
