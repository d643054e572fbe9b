"""Experiment configuration: lab distributions, stage toggles, digests.

An ExperimentConfig is a single JSON-serializable description of a run: the
data distribution as explicit mixture tables, the sequence layout, the
few-step sampling grid, per-stage training settings, which pipeline stages
run, the master seed, and where outputs go.  Named constructors build the
stock lab distributions; everything else flows through the numeric tables so
a config file alone reproduces a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .distributions import GaussianComponent, SequenceDistribution, SequenceSpec
from .errors import ConfigError
from .models import TrainConfig
from .ode import DATASET_STEPS, DEFAULT_GRID, TimestepGrid

DIFFUSION_MODES = ("tf", "df")
ODE_MODES = ("asymmetric-ode", "causal-ode", "none")
DMD_MODES = ("dmd", "none")
CD_MODES = ("causal-cd", "asymmetric-cd", "none")

#: stages that carry their own TrainConfig
TRAIN_STAGES = ("diffusion", "distill", "dmd", "cd")


# ---------------------------------------------------------------------------
# named lab distributions
# ---------------------------------------------------------------------------


def bivariate_pair(rho: float = 0.8) -> SequenceDistribution:
    """Two scalar frames, one per chunk, with correlation rho."""
    if not -1.0 < rho < 1.0:
        raise ConfigError(f"rho must lie strictly inside (-1, 1), got {rho}")
    spec = SequenceSpec(n_frames=2, frame_dim=1, chunk_size=1)
    cov = np.array([[1.0, rho], [rho, 1.0]])
    return SequenceDistribution(spec, (GaussianComponent(1.0, np.zeros(2), cov),))


def ar1_sequence(
    n_frames: int = 6, corr: float = 0.8, chunk_size: int = 1
) -> SequenceDistribution:
    """AR(1)-structured Gaussian: unit-variance frames, corr^|i-j| covariance.

    chunk_size groups successive frames into the chunks the models operate
    on, so the same distribution serves frame-wise (1) and chunk-wise (3)
    pipelines.
    """
    if not -1.0 < corr < 1.0:
        raise ConfigError(f"corr must lie strictly inside (-1, 1), got {corr}")
    idx = np.arange(n_frames)
    cov = float(corr) ** np.abs(idx[:, None] - idx[None, :])
    spec = SequenceSpec(n_frames=n_frames, frame_dim=1, chunk_size=chunk_size)
    return SequenceDistribution(
        spec, (GaussianComponent(1.0, np.zeros(n_frames), cov),)
    )


def two_mode(separation: float = 3.0) -> SequenceDistribution:
    """One scalar frame: equal-weight unit-variance modes at +-separation."""
    spec = SequenceSpec(n_frames=1, frame_dim=1, chunk_size=1)
    comps = (
        GaussianComponent(0.5, np.array([-separation]), np.eye(1)),
        GaussianComponent(0.5, np.array([+separation]), np.eye(1)),
    )
    return SequenceDistribution(spec, comps)


_NAMED_DISTRIBUTIONS = {
    "bivariate": bivariate_pair,
    "ar1": ar1_sequence,
    "two-mode": two_mode,
}


def named_distribution(name: str, **params) -> SequenceDistribution:
    if name not in _NAMED_DISTRIBUTIONS:
        known = ", ".join(sorted(_NAMED_DISTRIBUTIONS))
        raise ConfigError(f"unknown distribution {name!r} (known: {known})")
    try:
        return _NAMED_DISTRIBUTIONS[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for distribution {name!r}: {exc}")


def component_tables(dist: SequenceDistribution) -> tuple:
    """Mixture components as plain nested lists (JSON-ready)."""
    return tuple(
        {
            "weight": float(c.weight),
            "mean": c.mean.tolist(),
            "covariance": c.covariance.tolist(),
        }
        for c in dist.components
    )


# ---------------------------------------------------------------------------
# the experiment config
# ---------------------------------------------------------------------------


def _default_tables() -> tuple:
    return component_tables(bivariate_pair(0.8))


def _default_train() -> dict:
    return {name: TrainConfig() for name in TRAIN_STAGES}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a pipeline run needs, in JSON-friendly form.

    The distribution is stored as explicit mixture tables plus the sequence
    layout fields; stage toggles select one diffusion flavor and at most one
    entry from each later family.  DMD needs a generator to start from, so
    it requires an ODE stage, an init toggle, or the explicit fresh-init
    flag.
    """

    components: tuple = field(default_factory=_default_tables)
    n_frames: int = 2
    frame_dim: int = 1
    chunk_size: int = 1
    grid: tuple = DEFAULT_GRID
    solver_steps: int = DATASET_STEPS
    diffusion: str = "tf"
    ode: str = "none"
    dmd: str = "none"
    cd: str = "none"
    d2_init: bool = False
    d3_init: bool = False
    dmd_fresh_init: bool = False
    train: dict = field(default_factory=_default_train)
    feature_count: int = 512
    frequency_scale: float = 1.0
    dataset_size: int = 4096
    master_seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if self.diffusion not in DIFFUSION_MODES:
            raise ConfigError(f"diffusion must be one of {DIFFUSION_MODES}")
        if self.ode not in ODE_MODES:
            raise ConfigError(f"ode must be one of {ODE_MODES}")
        if self.dmd not in DMD_MODES:
            raise ConfigError(f"dmd must be one of {DMD_MODES}")
        if self.cd not in CD_MODES:
            raise ConfigError(f"cd must be one of {CD_MODES}")
        if self.dmd == "dmd" and not (
            self.ode != "none" or self.d2_init or self.d3_init or self.dmd_fresh_init
        ):
            raise ConfigError(
                "dmd needs an initialized generator: enable an ode stage, an "
                "init toggle, or dmd_fresh_init"
            )
        if self.solver_steps < 1:
            raise ConfigError("solver_steps must be positive")
        if self.feature_count < 1:
            raise ConfigError("feature_count must be positive")
        if self.dataset_size < 1:
            raise ConfigError("dataset_size must be positive")
        object.__setattr__(self, "grid", tuple(float(t) for t in self.grid))
        TimestepGrid(self.grid)  # validates ordering/range
        object.__setattr__(self, "components", tuple(self.components))
        missing = [name for name in TRAIN_STAGES if name not in self.train]
        if missing:
            raise ConfigError(f"train settings missing for stages: {missing}")
        extra = [name for name in self.train if name not in TRAIN_STAGES]
        if extra:
            raise ConfigError(f"train settings for unknown stages: {extra}")
        # fail early on malformed tables rather than at pipeline time
        self.distribution()

    def sequence_spec(self) -> SequenceSpec:
        return SequenceSpec(
            n_frames=self.n_frames,
            frame_dim=self.frame_dim,
            chunk_size=self.chunk_size,
        )

    def distribution(self) -> SequenceDistribution:
        spec = self.sequence_spec()
        comps = []
        for row in self.components:
            extra = set(row) - {"weight", "mean", "covariance"}
            if extra:
                raise ConfigError(f"unknown component fields: {sorted(extra)}")
            try:
                comps.append(
                    GaussianComponent(
                        float(row["weight"]),
                        np.asarray(row["mean"], dtype=float),
                        np.asarray(row["covariance"], dtype=float),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad mixture component: {exc}")
        try:
            return SequenceDistribution(spec, tuple(comps))
        except ValueError as exc:
            raise ConfigError(f"bad mixture tables: {exc}")

    def timestep_grid(self) -> TimestepGrid:
        return TimestepGrid(self.grid)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["components"] = [dict(row) for row in self.components]
        out["grid"] = list(self.grid)
        out["train"] = {
            name: _train_config_to_dict(cfg) for name, cfg in self.train.items()
        }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config document must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        data = dict(raw)
        if "train" in data:
            if not isinstance(data["train"], dict):
                raise ConfigError("train must map stage names to settings")
            train = _default_train()
            for name, sub in data["train"].items():
                if name not in TRAIN_STAGES:
                    raise ConfigError(f"train settings for unknown stage {name!r}")
                train[name] = _train_config_from_dict(sub)
            data["train"] = train
        if "components" in data:
            data["components"] = tuple(data["components"])
        if "grid" in data:
            data["grid"] = tuple(data["grid"])
        return cls(**data)

    def digest(self) -> str:
        """12-hex-digit fingerprint of the canonical JSON form."""
        encoded = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(encoded.encode()).hexdigest()[:12]

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


def _train_config_to_dict(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    # loss_weight is a code-level callable; config documents cannot carry it
    del out["loss_weight"]
    return out


def _train_config_from_dict(raw: dict) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("stage train settings must be a JSON object")
    known = {f.name for f in dataclasses.fields(TrainConfig)} - {"loss_weight"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown train keys: {sorted(extra)}")
    try:
        return TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train settings: {exc}")


def load_config(path) -> ExperimentConfig:
    """Read a JSON config file.  Parse or schema problems are ConfigError."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
