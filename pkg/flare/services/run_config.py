"""
Experiment configuration: pydantic models, YAML loading with includes.

A config document may list other documents under `include:`. Included files
are resolved relative to the including file, loaded first and deep-merged;
keys of the including document win.
"""

import copy
import logging
import math
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from flare.services.flare_core import STATE_HISTORY, RepresentationMode
from flare.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvConfig(_Section):
    id: Literal["pendulum", "dot_catch"] = "pendulum"
    frame_size: int | None = Field(default=None, ge=16)
    # pendulum
    gravity: float = 9.81
    length: float = Field(default=1.0, gt=0)
    mass: float = Field(default=1.0, gt=0)
    max_torque: float = Field(default=5.0, gt=0)
    dt: float = Field(default=0.02, gt=0)
    horizon: int = Field(default=200, ge=1)
    max_speed: float = Field(default=8.0, gt=0)
    init_angle_noise: float = Field(default=0.1, ge=0)
    init_velocity_noise: float = Field(default=0.0, ge=0)
    reward_threshold: float = Field(default=0.95, gt=-1, lt=1)
    # dot catch
    grid_width: int = Field(default=10, ge=3)
    grid_height: int = Field(default=10, ge=3)

    @property
    def discrete(self) -> bool:
        return self.id == "dot_catch"

    @property
    def resolved_frame_size(self) -> int:
        if self.frame_size is not None:
            return self.frame_size
        return 20 if self.id == "dot_catch" else 64


class EncoderConfig(_Section):
    num_layers: int = Field(default=4, ge=1)
    filters: int = Field(default=32, ge=1)
    kernel_size: int = Field(default=3, ge=1)
    first_stride: int = Field(default=2, ge=1)
    latent_dim: int = Field(default=64, ge=1)
    nonlinearity: Literal["relu", "identity"] = "relu"
    head_width: int = Field(default=1024, ge=1)
    ln_eps: float = Field(default=1e-5, gt=0)


class AugmentConfig(_Section):
    enabled: bool = True
    pad: int = Field(default=8, ge=0)
    pad_value: float = 0.0


class OptimConfig(_Section):
    encoder_lr: float = Field(default=1e-3, ge=0)
    actor_lr: float = Field(default=2e-4, ge=0)
    critic_lr: float = Field(default=2e-4, ge=0)
    alpha_lr: float = Field(default=1e-4, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    alpha_betas: tuple[float, float] = (0.5, 0.999)
    eps: float = Field(default=1e-8, gt=0)

    @field_validator("betas", "alpha_betas")
    @classmethod
    def _check_betas(cls, value):
        if not all(0.0 <= b < 1.0 for b in value):
            raise ValueError(f"Adam betas must lie in [0, 1), got {value}")
        return value


class SacHyper(_Section):
    gamma: float = Field(default=0.99, gt=0, lt=1)
    critic_tau: float = Field(default=0.01, gt=0, le=1)
    encoder_tau: float = Field(default=0.05, gt=0, le=1)
    target_update_freq: int = Field(default=2, ge=1)
    init_temperature: float = Field(default=0.1, gt=0)
    target_entropy: float | None = None
    batch_size: int = Field(default=128, ge=1)
    hidden_dim: int = Field(default=1024, ge=1)
    num_layers: int = Field(default=2, ge=1)
    log_std_min: float = -10.0
    log_std_max: float = 2.0

    @model_validator(mode="after")
    def _check_log_std(self):
        if self.log_std_min >= self.log_std_max:
            raise ValueError(f"log_std_min {self.log_std_min} must be below log_std_max {self.log_std_max}")
        return self


class DqnHyper(_Section):
    gamma: float = Field(default=0.99, gt=0, lt=1)
    lr: float = Field(default=1e-4, ge=0)
    batch_size: int = Field(default=32, ge=1)
    hidden_dim: int = Field(default=256, ge=1)
    num_layers: int = Field(default=2, ge=1)
    target_update_interval: int = Field(default=1000, ge=1)
    epsilon_start: float = Field(default=1.0, ge=0, le=1)
    epsilon_end: float = Field(default=0.05, ge=0, le=1)
    epsilon_fraction: float = Field(default=0.2, gt=0, le=1)


class RunConfig(_Section):
    name: str = "run"
    env: EnvConfig = Field(default_factory=EnvConfig)
    mode: RepresentationMode = RepresentationMode.STATE_FULL
    n_frames: int = Field(default=1, ge=1)
    learner: Literal["sac", "dqn"] = "sac"
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    sac: SacHyper = Field(default_factory=SacHyper)
    dqn: DqnHyper = Field(default_factory=DqnHyper)
    total_steps: int = Field(default=100_000, ge=1)
    initial_steps: int = Field(default=5_000, ge=0)
    eval_interval: int = Field(default=5_000, ge=1)
    eval_episodes: int = Field(default=10, ge=1)
    action_repeat: int = Field(default=2, ge=1)
    replay_capacity: int = Field(default=100_000, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_consistency(self):
        mode = self.mode
        if self.learner == "sac" and self.env.discrete:
            raise ValueError(f"learner 'sac' needs a continuous-action environment, got {self.env.id!r}")
        if self.learner == "dqn" and not self.env.discrete:
            raise ValueError(f"learner 'dqn' needs a discrete-action environment, got {self.env.id!r}")
        if mode in (RepresentationMode.STATE_FULL, RepresentationMode.STATE_POSITION_ONLY) and self.n_frames != 1:
            raise ValueError(f"{mode.value} uses a single observation, got n_frames={self.n_frames}")
        if mode.needs_history and self.n_frames != STATE_HISTORY:
            raise ValueError(f"{mode.value} uses {STATE_HISTORY} positions, got n_frames={self.n_frames}")
        if mode.uses_flow and self.n_frames < 2:
            raise ValueError(f"{mode.value} needs n_frames >= 2, got {self.n_frames}")
        if self.initial_steps > self.total_steps:
            raise ValueError(f"initial_steps {self.initial_steps} exceeds total_steps {self.total_steps}")
        # the first update samples a full batch right after warm-up
        if self.warm_up_transitions < self.batch_size:
            raise ValueError(
                f"initial_steps {self.initial_steps} with action_repeat {self.action_repeat} stores "
                f"{self.warm_up_transitions} transitions, fewer than {self.learner} batch_size {self.batch_size}; "
                f"raise initial_steps to at least {self.batch_size * self.action_repeat}"
            )
        if self.replay_capacity < self.batch_size:
            raise ValueError(f"replay_capacity {self.replay_capacity} is below batch_size {self.batch_size}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        return self

    @property
    def batch_size(self) -> int:
        return self.sac.batch_size if self.learner == "sac" else self.dqn.batch_size

    @property
    def warm_up_transitions(self) -> int:
        """Lower bound on transitions stored when warm-up ends (early episode ends only add more)"""
        return math.ceil(self.initial_steps / self.action_repeat)

    @property
    def uses_augmentation(self) -> bool:
        return self.mode.is_pixel and self.augment.enabled and self.augment.pad > 0

    @property
    def encoder_frame_size(self) -> int:
        """Spatial size the encoder sees (augmented canvas when translation is on)"""
        size = self.env.resolved_frame_size
        return size + self.augment.pad if self.uses_augmentation else size


# ---------------------------------------------------------------------------
# YAML with includes

def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; override wins, lists are replaced"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _load_document(path: Path, chain: tuple[Path, ...]) -> dict:
    path = path.resolve()
    if path in chain:
        cycle = " -> ".join(str(p.name) for p in (*chain, path))
        raise ConfigurationError(f"Config include cycle: {cycle}")
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        document = yaml.safe_load(f) or {}
    if not isinstance(document, dict):
        raise ConfigurationError(f"Config file {path} must hold a mapping, got {type(document).__name__}")

    includes = document.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for include in includes:
        merged = deep_merge(merged, _load_document(path.parent / include, (*chain, path)))
    return deep_merge(merged, document)


def load_config_document(path: str | Path) -> dict:
    """Raw merged mapping of a config file and its includes"""
    return _load_document(Path(path), ())


def parse_run_config(document: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run config: {e}") from e


def load_run_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    document = load_config_document(path)
    if overrides:
        document = deep_merge(document, overrides)
    config = parse_run_config(document)
    logger.debug(f"Loaded run config {config.name!r} from {path}")
    return config


def dump_run_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)
    return path
