"""Gaussian-mixture laws over fixed-length sequences, with exact oracles.

Every probabilistic quantity the lab needs (densities, scores, posterior
means, prefix conditionals) has a closed form for finite Gaussian mixtures,
which is what makes brute-force verification of the training stages
possible.  Distributions are immutable after construction; all sampling is
driven by explicit seeds or generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularCovarianceError

_SYM_TOL = 1e-12
_EIG_FLOOR = -1e-12
_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-interpolation forward process x_t = (1 - t) x0 + t eps on [0, 1].

    alpha(t) decays 1 -> 0 and sigma(t) grows 0 -> 1, so t = 0 is clean data
    and t = 1 is pure standard normal noise.
    """

    horizon: float = 1.0

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=float)

    def sigma(self, t):
        return np.asarray(t, dtype=float) + 0.0


SCHEDULE = NoiseSchedule()


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceSpec:
    """Shape of one sample: n_frames frames of frame_dim coordinates, grouped
    into chunks of chunk_size frames."""

    n_frames: int
    frame_dim: int
    chunk_size: int = 1

    def __post_init__(self):
        if self.n_frames < 1 or self.frame_dim < 1:
            raise ValueError("n_frames and frame_dim must be positive")
        if not (1 <= self.chunk_size <= self.n_frames):
            raise ValueError("chunk_size must lie in [1, n_frames]")
        if self.n_frames % self.chunk_size != 0:
            raise ValueError("chunk_size must divide n_frames")

    @property
    def total_dim(self) -> int:
        return self.n_frames * self.frame_dim

    @property
    def n_chunks(self) -> int:
        return self.n_frames // self.chunk_size

    @property
    def chunk_dim(self) -> int:
        return self.chunk_size * self.frame_dim

    def chunk_slice(self, i: int) -> slice:
        """Flat-coordinate slice of chunk i (1-based)."""
        if not (1 <= i <= self.n_chunks):
            raise ValueError(f"chunk index {i} out of range 1..{self.n_chunks}")
        lo = (i - 1) * self.chunk_dim
        return slice(lo, lo + self.chunk_dim)

    def prefix_slice(self, i: int) -> slice:
        """Flat-coordinate slice of all chunks before chunk i (1-based)."""
        if not (1 <= i <= self.n_chunks):
            raise ValueError(f"chunk index {i} out of range 1..{self.n_chunks}")
        return slice(0, (i - 1) * self.chunk_dim)

    def prefix_dim(self, i: int) -> int:
        return (i - 1) * self.chunk_dim


@dataclass(frozen=True)
class GaussianComponent:
    """One mixture component with cached eigendecomposition.

    The eigensystem is reused everywhere: sampling, noisy-marginal densities,
    posterior means, and closed-form flow maps all share it, because noising
    the component only rescales its eigenvalues (a^2 lam + s^2) and never
    rotates the eigenvectors.
    """

    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    eigvecs: np.ndarray = field(init=False, repr=False, compare=False)
    eigvals: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        if self.weight < 0.0:
            raise ValueError("component weight must be nonnegative")
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match the mean")
        if np.max(np.abs(cov - cov.T), initial=0.0) > _SYM_TOL:
            raise ValueError("covariance must be symmetric within 1e-12")
        lam, q = np.linalg.eigh(cov)
        if np.min(lam) < _EIG_FLOOR:
            raise ValueError("covariance has an eigenvalue below -1e-12")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "eigvecs", q)
        object.__setattr__(self, "eigvals", np.clip(lam, 0.0, None))

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class SequenceDistribution:
    """Finite Gaussian mixture over flattened sequences."""

    spec: SequenceSpec
    components: tuple[GaussianComponent, ...]
    # stacked per-component arrays, cached for vectorized kernels
    _log_w: np.ndarray = field(init=False, repr=False, compare=False)
    _means: np.ndarray = field(init=False, repr=False, compare=False)
    _eigvecs: np.ndarray = field(init=False, repr=False, compare=False)
    _eigvals: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        dim = self.spec.total_dim
        for c in comps:
            if c.dim != dim:
                raise ValueError("component dimension does not match the spec")
        w = np.array([c.weight for c in comps], dtype=float)
        if abs(float(w.sum()) - 1.0) > _SYM_TOL:
            raise ValueError("mixture weights must sum to 1 within 1e-12")
        object.__setattr__(self, "components", comps)
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_w", np.log(w))
        object.__setattr__(self, "_means", np.stack([c.mean for c in comps]))
        object.__setattr__(self, "_eigvecs", np.stack([c.eigvecs for c in comps]))
        object.__setattr__(self, "_eigvals", np.stack([c.eigvals for c in comps]))

    @property
    def dim(self) -> int:
        return self.spec.total_dim

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self._log_w)


@dataclass(frozen=True)
class NoisyState:
    """A point of the noised process: values plus its noise time in [0, 1]."""

    values: np.ndarray
    time: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("noisy state contains non-finite values")
        if not (0.0 <= self.time <= 1.0):
            raise ValueError("time must lie in [0, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "time", float(self.time))


# ---------------------------------------------------------------------------
# vectorized mixture kernels (shared by exact ops and batched conditionals)
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray, dim: int):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.size != dim:
            raise ValueError(f"expected a vector of length {dim}, got {x.size}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"expected rows of length {dim}, got {x.shape[1]}")
        return x, False
    raise ValueError("expected a 1-d or 2-d array")


def _check_nonsingular(noisy_lam: np.ndarray, t):
    if np.min(noisy_lam) <= 0.0:
        raise SingularCovarianceError(
            f"noisy covariance is singular at t={t}; a degenerate component "
            "cannot be inverted at this time"
        )


def _mixture_stats(log_w, means, eigvecs, eigvals, x, t):
    """Shared core: responsibilities and per-component eigenbasis residuals.

    log_w: (K,) or (B, K); means: (K, D) or (B, K, D); x: (B, D).
    t may be a scalar or one time per row.  Noising a component rescales its
    eigenvalues to a^2 lam + s^2 without rotating eigenvectors, so all the
    Gaussian algebra happens on (B, K, D)-shaped eigencoordinates.
    """
    t_arr = np.asarray(t, dtype=float)
    per_row = t_arr.ndim == 1
    if per_row:
        a = (1.0 - t_arr)[:, None, None]  # (B, 1, 1)
        noisy_lam = a * a * eigvals[None, :, :] + (t_arr * t_arr)[:, None, None]
    else:
        a = 1.0 - float(t_arr)
        noisy_lam = a * a * eigvals[None, :, :] + float(t_arr) ** 2
    _check_nonsingular(noisy_lam, t)
    if means.ndim == 2:
        means = means[None, :, :]
    diff = x[:, None, :] - a * means  # (B, K, D)
    y = np.einsum("bkd,kde->bke", diff, eigvecs)  # coordinates in eigenbasis
    quad = np.einsum("bke,bke->bk", y * y, 1.0 / noisy_lam)
    log_det = np.sum(np.log(noisy_lam), axis=2)  # (B or 1, K)
    log_norm = -0.5 * (quad + log_det + eigvals.shape[1] * _LOG_2PI)
    log_post = (log_w if log_w.ndim == 2 else log_w[None, :]) + log_norm
    # log-space responsibilities with max subtraction for stability
    shift = np.max(log_post, axis=1, keepdims=True)
    log_z = shift + np.log(np.sum(np.exp(log_post - shift), axis=1, keepdims=True))
    log_resp = log_post - log_z
    return log_resp, y, noisy_lam, a, means, log_z


def _mixture_log_density(log_w, means, eigvecs, eigvals, x, t):
    _, _, _, _, _, log_z = _mixture_stats(log_w, means, eigvecs, eigvals, x, t)
    return log_z[:, 0]


def _mixture_posterior_mean(log_w, means, eigvecs, eigvals, x, t):
    """E[x0 | x_t = x] for the mixture, batched over rows of x."""
    log_resp, y, noisy_lam, a, means, _ = _mixture_stats(
        log_w, means, eigvecs, eigvals, x, t
    )
    gain = a * eigvals[None, :, :] / noisy_lam  # posterior gain per eigenmode
    pulled = np.einsum("kde,bke->bkd", eigvecs, gain * y)
    per_comp = means + pulled  # (B, K, D)
    resp = np.exp(log_resp)
    return np.einsum("bk,bkd->bd", resp, per_comp)


def _mixture_score(log_w, means, eigvecs, eigvals, x, t):
    """Gradient of log p_t at x, batched over rows of x."""
    log_resp, y, noisy_lam, _, _, _ = _mixture_stats(
        log_w, means, eigvecs, eigvals, x, t
    )
    whitened = y / noisy_lam
    per_comp = -np.einsum("kde,bke->bkd", eigvecs, whitened)
    resp = np.exp(log_resp)
    return np.einsum("bk,bkd->bd", resp, per_comp)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def sample_clean(dist: SequenceDistribution, count: int, seed) -> np.ndarray:
    """Draw `count` exact samples of the clean law; returns (count, D)."""
    rng = np.random.default_rng(seed)
    return sample_clean_with_rng(dist, count, rng)


def sample_clean_with_rng(
    dist: SequenceDistribution, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Sampling core reused by callers that manage their own generator."""
    ks = rng.choice(len(dist.components), size=count, p=dist.weights)
    eps = rng.standard_normal((count, dist.dim))
    out = np.empty((count, dist.dim))
    for k, comp in enumerate(dist.components):
        mask = ks == k
        if not np.any(mask):
            continue
        root = comp.eigvecs * np.sqrt(comp.eigvals)[None, :]
        out[mask] = comp.mean[None, :] + eps[mask] @ root.T
    return out


def forward_noise(x0: np.ndarray, t: float, eps: np.ndarray) -> NoisyState:
    """Interpolate clean data toward noise: x_t = (1 - t) x0 + t eps."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must have identical shapes")
    values = (1.0 - t) * x0 + t * eps
    return NoisyState(values=values, time=t)


def joint_posterior_mean(dist: SequenceDistribution, state: NoisyState) -> np.ndarray:
    """Exact posterior mean E[x0 | x_t] of the mixture at the state's time."""
    x, single = _as_batch(state.values, dist.dim)
    m = _mixture_posterior_mean(
        dist._log_w, dist._means, dist._eigvecs, dist._eigvals, x, state.time
    )
    return m[0] if single else m


def exact_score(dist: SequenceDistribution, state: NoisyState) -> np.ndarray:
    """Gradient of log p_t at the state, where p_t is the noised mixture."""
    x, single = _as_batch(state.values, dist.dim)
    s = _mixture_score(
        dist._log_w, dist._means, dist._eigvecs, dist._eigvals, x, state.time
    )
    return s[0] if single else s


def noisy_log_density(dist: SequenceDistribution, state: NoisyState) -> np.ndarray:
    """log p_t of the noised mixture at the state."""
    x, single = _as_batch(state.values, dist.dim)
    v = _mixture_log_density(
        dist._log_w, dist._means, dist._eigvecs, dist._eigvals, x, state.time
    )
    return float(v[0]) if single else v


def noisy_marginal(dist: SequenceDistribution, t: float) -> SequenceDistribution:
    """The law of x_t as an explicit mixture: components N(a mu, a^2 S + s^2 I)."""
    a = 1.0 - t
    comps = []
    eye = np.eye(dist.dim)
    for c in dist.components:
        comps.append(
            GaussianComponent(
                weight=c.weight,
                mean=a * c.mean,
                covariance=a * a * c.covariance + t * t * eye,
            )
        )
    return SequenceDistribution(spec=dist.spec, components=tuple(comps))


def _condition_gaussian(mean, cov, obs_idx, rest_idx, values):
    """Condition one Gaussian on coordinates obs_idx = values.

    Returns (cond_mean, cond_cov, log_marginal_density_of_observation).
    Raises SingularCovarianceError when the observed block is not invertible.
    """
    mean_o = mean[obs_idx]
    mean_r = mean[rest_idx]
    s_oo = cov[np.ix_(obs_idx, obs_idx)]
    s_ro = cov[np.ix_(rest_idx, obs_idx)]
    s_rr = cov[np.ix_(rest_idx, rest_idx)]
    try:
        chol = np.linalg.cholesky(s_oo)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            "observed covariance block is singular; cannot condition"
        ) from exc
    resid = values - mean_o
    # solve S_oo^{-1} resid and S_oo^{-1} S_or through the Cholesky factor
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, resid))
    beta = np.linalg.solve(chol.T, np.linalg.solve(chol, s_ro.T))
    cond_mean = mean_r + s_ro @ alpha
    cond_cov = s_rr - s_ro @ beta
    cond_cov = 0.5 * (cond_cov + cond_cov.T)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    quad = float(resid @ alpha)
    log_marg = -0.5 * (quad + log_det + len(obs_idx) * _LOG_2PI)
    return cond_mean, cond_cov, log_marg


def _normalized_weights(log_w_unnorm: np.ndarray) -> np.ndarray:
    shift = np.max(log_w_unnorm)
    w = np.exp(log_w_unnorm - shift)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise SingularCovarianceError("conditioning produced no usable component")
    return w / total


def condition_on_coordinates(
    dist: SequenceDistribution,
    observed_idx,
    values,
    spec: SequenceSpec | None = None,
) -> SequenceDistribution:
    """Exact mixture conditional on an arbitrary coordinate subset.

    Weights are reweighted by each component's marginal density of the
    observation, accumulated in log space.
    """
    observed_idx = np.asarray(observed_idx, dtype=int)
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != observed_idx.size:
        raise ValueError("observed values and indices must have equal length")
    rest_idx = np.setdiff1d(np.arange(dist.dim), observed_idx)
    if rest_idx.size == 0:
        raise ValueError("cannot condition on every coordinate")
    if spec is None:
        d = dist.spec.frame_dim
        if rest_idx.size % d == 0:
            spec = SequenceSpec(n_frames=rest_idx.size // d, frame_dim=d, chunk_size=1)
        else:
            spec = SequenceSpec(n_frames=rest_idx.size, frame_dim=1, chunk_size=1)
    log_ws = np.empty(len(dist.components))
    cond = []
    for k, comp in enumerate(dist.components):
        m, c, log_marg = _condition_gaussian(
            comp.mean, comp.covariance, observed_idx, rest_idx, values
        )
        cond.append((m, c))
        log_ws[k] = dist._log_w[k] + log_marg
    new_w = _normalized_weights(log_ws)
    comps = tuple(
        GaussianComponent(weight=float(w), mean=m, covariance=c)
        for w, (m, c) in zip(new_w, cond)
    )
    return SequenceDistribution(spec=spec, components=comps)


def _chunk_spec(spec: SequenceSpec) -> SequenceSpec:
    return SequenceSpec(
        n_frames=spec.chunk_size, frame_dim=spec.frame_dim, chunk_size=spec.chunk_size
    )


def conditional_clean_dist(
    dist: SequenceDistribution, i: int, prefix: np.ndarray
) -> SequenceDistribution:
    """Law of clean chunk i given the clean chunks before it.

    The result is a mixture over the chunk's coordinates only; chunks after
    i are marginalized out, never conditioned on.
    """
    spec = dist.spec
    sl_prefix = spec.prefix_slice(i)
    sl_chunk = spec.chunk_slice(i)
    prefix = np.asarray(prefix, dtype=float).reshape(-1)
    if prefix.size != spec.prefix_dim(i):
        raise ValueError(
            f"prefix for chunk {i} must have {spec.prefix_dim(i)} coordinates"
        )
    chunk_idx = np.arange(sl_chunk.start, sl_chunk.stop)
    if prefix.size == 0:
        # no conditioning: plain marginal of the chunk coordinates
        comps = tuple(
            GaussianComponent(
                weight=c.weight,
                mean=c.mean[sl_chunk],
                covariance=c.covariance[np.ix_(chunk_idx, chunk_idx)],
            )
            for c in dist.components
        )
        return SequenceDistribution(spec=_chunk_spec(spec), components=comps)
    prefix_idx = np.arange(sl_prefix.start, sl_prefix.stop)
    log_ws = np.empty(len(dist.components))
    cond = []
    for k, comp in enumerate(dist.components):
        joint_idx = np.concatenate([chunk_idx, prefix_idx])
        mean = comp.mean[joint_idx]
        cov = comp.covariance[np.ix_(joint_idx, joint_idx)]
        obs = np.arange(chunk_idx.size, joint_idx.size)
        rest = np.arange(chunk_idx.size)
        m, c, log_marg = _condition_gaussian(mean, cov, obs, rest, prefix)
        cond.append((m, c))
        log_ws[k] = dist._log_w[k] + log_marg
    new_w = _normalized_weights(log_ws)
    comps = tuple(
        GaussianComponent(weight=float(w), mean=m, covariance=c)
        for w, (m, c) in zip(new_w, cond)
    )
    return SequenceDistribution(spec=_chunk_spec(spec), components=comps)


def df_conditional_dist(
    dist: SequenceDistribution, i: int, noisy_prefix: NoisyState
) -> SequenceDistribution:
    """Law of clean chunk i given a noisy prefix x_t^{<i} = z at time t.

    Per component, (x0^i, x_t^{<i}) is jointly Gaussian with
    Cov(x_t^{<i}) = a^2 S_PP + s^2 I and Cov(x0^i, x_t^{<i}) = a S_CP,
    so the conditional follows from standard Gaussian conditioning; weights
    are reweighted by the noisy-prefix marginal density.
    """
    spec = dist.spec
    t = noisy_prefix.time
    a = 1.0 - t
    sl_prefix = spec.prefix_slice(i)
    sl_chunk = spec.chunk_slice(i)
    z = np.asarray(noisy_prefix.values, dtype=float).reshape(-1)
    if z.size != spec.prefix_dim(i):
        raise ValueError(
            f"noisy prefix for chunk {i} must have {spec.prefix_dim(i)} coordinates"
        )
    if z.size == 0:
        raise ValueError("chunk 1 has no prefix to condition on")
    chunk_idx = np.arange(sl_chunk.start, sl_chunk.stop)
    prefix_idx = np.arange(sl_prefix.start, sl_prefix.stop)
    nC, nP = chunk_idx.size, prefix_idx.size
    log_ws = np.empty(len(dist.components))
    cond = []
    for k, comp in enumerate(dist.components):
        s_cc = comp.covariance[np.ix_(chunk_idx, chunk_idx)]
        s_cp = comp.covariance[np.ix_(chunk_idx, prefix_idx)]
        s_pp = comp.covariance[np.ix_(prefix_idx, prefix_idx)]
        mean = np.concatenate([comp.mean[chunk_idx], a * comp.mean[prefix_idx]])
        cov = np.empty((nC + nP, nC + nP))
        cov[:nC, :nC] = s_cc
        cov[:nC, nC:] = a * s_cp
        cov[nC:, :nC] = a * s_cp.T
        cov[nC:, nC:] = a * a * s_pp + t * t * np.eye(nP)
        obs = np.arange(nC, nC + nP)
        rest = np.arange(nC)
        m, c, log_marg = _condition_gaussian(mean, cov, obs, rest, z)
        cond.append((m, c))
        log_ws[k] = dist._log_w[k] + log_marg
    new_w = _normalized_weights(log_ws)
    comps = tuple(
        GaussianComponent(weight=float(w), mean=m, covariance=c)
        for w, (m, c) in zip(new_w, cond)
    )
    return SequenceDistribution(spec=_chunk_spec(spec), components=comps)


# ---------------------------------------------------------------------------
# batched prefix conditionals (shared covariances, per-row means and weights)
# ---------------------------------------------------------------------------


@dataclass
class BatchedConditional:
    """Per-row conditional mixtures of chunk i given per-row prefixes.

    Gaussian conditional covariances do not depend on the observed value, so
    all rows share the component covariances (stored once as eigensystems)
    while means and weights vary per row.  This is what makes trajectory-level
    batching of the conditional velocity field cheap.
    """

    log_w: np.ndarray  # (B, K)
    means: np.ndarray  # (B, K, D)
    eigvecs: np.ndarray  # (K, D, D)
    eigvals: np.ndarray  # (K, D)

    @property
    def batch(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def posterior_mean(self, x: np.ndarray, t: float) -> np.ndarray:
        return _mixture_posterior_mean(
            self.log_w, self.means, self.eigvecs, self.eigvals, x, t
        )

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        return _mixture_score(
            self.log_w, self.means, self.eigvecs, self.eigvals, x, t
        )

    def row(self, b: int, spec: SequenceSpec) -> SequenceDistribution:
        """Materialize row b as an ordinary SequenceDistribution."""
        w = _normalized_weights(self.log_w[b])
        comps = []
        for k in range(self.means.shape[1]):
            cov = (self.eigvecs[k] * self.eigvals[k][None, :]) @ self.eigvecs[k].T
            cov = 0.5 * (cov + cov.T)
            comps.append(
                GaussianComponent(weight=float(w[k]), mean=self.means[b, k], covariance=cov)
            )
        return SequenceDistribution(spec=spec, components=tuple(comps))


def condition_clean_prefix_batch(
    dist: SequenceDistribution, i: int, prefixes: np.ndarray
) -> BatchedConditional:
    """Batched conditional_clean_dist over rows of prefixes (B, prefix_dim)."""
    spec = dist.spec
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=float))
    if prefixes.shape[1] != spec.prefix_dim(i):
        raise ValueError(
            f"prefix rows for chunk {i} must have {spec.prefix_dim(i)} coordinates"
        )
    nB = prefixes.shape[0]
    sl_chunk = spec.chunk_slice(i)
    chunk_idx = np.arange(sl_chunk.start, sl_chunk.stop)
    kK = len(dist.components)
    dC = chunk_idx.size
    if prefixes.shape[1] == 0:
        means = np.broadcast_to(dist._means[:, chunk_idx], (nB, kK, dC)).copy()
        log_w = np.broadcast_to(dist._log_w, (nB, kK)).copy()
        eigvecs = np.empty((kK, dC, dC))
        eigvals = np.empty((kK, dC))
        for k, comp in enumerate(dist.components):
            lam, q = np.linalg.eigh(comp.covariance[np.ix_(chunk_idx, chunk_idx)])
            eigvals[k] = np.clip(lam, 0.0, None)
            eigvecs[k] = q
        return BatchedConditional(log_w, means, eigvecs, eigvals)
    prefix_idx = np.arange(0, prefixes.shape[1])
    means = np.empty((nB, kK, dC))
    log_w = np.empty((nB, kK))
    eigvecs = np.empty((kK, dC, dC))
    eigvals = np.empty((kK, dC))
    for k, comp in enumerate(dist.components):
        s_oo = comp.covariance[np.ix_(prefix_idx, prefix_idx)]
        s_ro = comp.covariance[np.ix_(chunk_idx, prefix_idx)]
        s_rr = comp.covariance[np.ix_(chunk_idx, chunk_idx)]
        try:
            chol = np.linalg.cholesky(s_oo)
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError(
                "prefix covariance block is singular; cannot condition"
            ) from exc
        resid = prefixes - comp.mean[prefix_idx][None, :]  # (B, P)
        alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, resid.T))  # (P, B)
        beta = np.linalg.solve(chol.T, np.linalg.solve(chol, s_ro.T))  # (P, C)
        means[:, k, :] = comp.mean[chunk_idx][None, :] + (s_ro @ alpha).T
        cond_cov = s_rr - s_ro @ beta
        cond_cov = 0.5 * (cond_cov + cond_cov.T)
        lam, q = np.linalg.eigh(cond_cov)
        eigvals[k] = np.clip(lam, 0.0, None)
        eigvecs[k] = q
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        quad = np.einsum("bp,pb->b", resid, alpha)
        log_w[:, k] = dist._log_w[k] - 0.5 * (
            quad + log_det + prefix_idx.size * _LOG_2PI
        )
    shift = np.max(log_w, axis=1, keepdims=True)
    log_w = log_w - (shift + np.log(np.sum(np.exp(log_w - shift), axis=1, keepdims=True)))
    return BatchedConditional(log_w, means, eigvecs, eigvals)


def sample_batched_conditional(
    cond: BatchedConditional, rng: np.random.Generator
) -> np.ndarray:
    """One draw per row of the batched conditional; returns (B, D)."""
    nB, kK, dC = cond.means.shape
    w = np.exp(cond.log_w)
    w = w / w.sum(axis=1, keepdims=True)
    u = rng.random((nB, 1))
    ks = np.sum(np.cumsum(w, axis=1) < u, axis=1).clip(0, kK - 1)
    eps = rng.standard_normal((nB, dC))
    roots = cond.eigvecs * np.sqrt(cond.eigvals)[:, None, :]  # (K, D, D)
    moved = np.einsum("bde,be->bd", roots[ks], eps)
    return cond.means[np.arange(nB), ks] + moved


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def mixture_moments(dist: SequenceDistribution):
    """Mean vector and covariance matrix of the mixture."""
    w = dist.weights
    mean = np.einsum("k,kd->d", w, dist._means)
    cov = np.zeros((dist.dim, dist.dim))
    for k, comp in enumerate(dist.components):
        diff = comp.mean - mean
        cov += w[k] * (comp.covariance + np.outer(diff, diff))
    return mean, 0.5 * (cov + cov.T)


def chunk_second_moment(dist: SequenceDistribution, i: int) -> float:
    """E ||x0^i||^2 for chunk i, in closed form."""
    mean, cov = mixture_moments(dist)
    sl = dist.spec.chunk_slice(i)
    idx = np.arange(sl.start, sl.stop)
    return float(np.trace(cov[np.ix_(idx, idx)]) + mean[idx] @ mean[idx])
