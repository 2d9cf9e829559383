"""Configuration settings for the sampler toolkit."""

import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .core.exceptions import ConfigError
from .core.types import EnergySpec

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Global process settings."""

    # Environment configuration
    environment: str = Field(
        default="development",
        description="Runtime environment (development/test/production)",
    )
    debug: bool = Field(default=False, description="Debug mode flag")
    log_level: str = Field(default="INFO", description="Root logging level")

    # Run configuration
    runs_dir: str = Field(default="runs", description="Default output root for runs")
    reference_mode: bool = Field(
        default=True,
        description="Single-threaded deterministic numerics for bitwise reproducibility",
    )
    num_threads: int = Field(
        default=1, ge=1, description="Torch intra-op threads outside reference mode"
    )
    estimator_chunk_size: int = Field(
        default=65536,
        ge=1,
        description="Maximum states per energy-network call inside estimators",
    )

    # Test configuration
    is_test: bool = Field(default=False, description="Whether running in test mode")

    model_config = SettingsConfigDict(
        env_prefix="EGM_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    @classmethod
    def load(cls, load_test_env: bool = False) -> "Settings":
        """Load settings with optional test environment.

        Args:
            load_test_env: Whether to load and prefer .env.test over .env

        Returns:
            Settings: Configuration instance
        """
        env_files = [".env"]
        if load_test_env:
            env_files.append(".env.test")

        settings = cls(_env_file=env_files, is_test=load_test_env)

        if load_test_env:
            settings.environment = "test"
            settings.runs_dir = str(Path(settings.runs_dir) / "test")

        return settings


class PathConfig(BaseModel):
    """Conditional probability path choice per modality."""

    model_config = ConfigDict(extra="forbid")

    discrete: Literal["masked"] = "masked"
    continuous: Literal["cond_ot", "ve"] = "cond_ot"
    sigma_min: float = Field(default=0.01, gt=0.0, description="VE σ at t=1")
    sigma_max: float = Field(default=2.0, gt=0.0, description="VE σ at t=0")

    @model_validator(mode="after")
    def check_sigmas(self) -> "PathConfig":
        if self.continuous == "ve" and self.sigma_min >= self.sigma_max:
            raise ValueError("VE schedule requires sigma_min < sigma_max")
        return self


class NetConfig(BaseModel):
    """Architecture shared by the sampler and the intermediate-energy network."""

    model_config = ConfigDict(extra="forbid")

    hidden_dim: int = Field(default=256, ge=1)
    num_layers: int = Field(default=3, ge=1)
    residual: bool = False
    token_embed_dim: int = Field(default=4, ge=1)
    cont_embed_dim: int = Field(default=64, ge=1)
    time_embed_dim: int = Field(default=32, ge=2)

    @field_validator("time_embed_dim")
    @classmethod
    def check_even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("time_embed_dim must be even")
        return v


class TrainConfig(BaseModel):
    """Hyper-parameters of one bi-level training run.

    ``epsilon`` set enables bootstrapping; omitted means plain EGM.
    """

    model_config = ConfigDict(extra="forbid")

    task: EnergySpec
    path: PathConfig = Field(default_factory=PathConfig)
    net: NetConfig = Field(default_factory=NetConfig)

    # Estimation
    num_mc_samples: int = Field(default=2000, ge=1, description="K")
    epsilon: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    t_min: float = Field(default=1e-3, gt=0.0, lt=0.5)

    # Loop sizes
    batch_size: int = Field(default=300, ge=1)
    outer_iterations: int = Field(default=100, ge=1)
    inner_iterations: Optional[int] = Field(
        default=None, ge=1, description="100 plain / 1000 bootstrap when omitted"
    )
    samples_per_outer: int = Field(default=2000, ge=1)
    buffer_capacity: int = Field(default=10_000, ge=1)
    simulation_steps: int = Field(default=100, ge=1)

    # Loss weights
    lambda_disc: float = Field(default=5.0, ge=0.0)
    lambda_cont: float = Field(default=1.0, ge=0.0)

    # Optimization
    lr: float = Field(default=1e-3, gt=0.0)
    lr_min: float = Field(default=1e-5, ge=0.0)
    energy_lr: float = Field(default=1e-3, gt=0.0, description="Flow LR")
    weight_decay: float = Field(default=0.0, ge=0.0)
    ema_decay: float = Field(default=0.999, ge=0.0, le=1.0)
    use_ema: bool = True
    forward_looking: bool = True

    # Clipping; task defaults when omitted
    generator_clip: Optional[float] = Field(default=None, gt=0.0)
    energy_clip: Optional[float] = Field(default=None, gt=0.0)

    # Bookkeeping
    seed: int = 0
    log_interval: int = Field(default=10, ge=1)
    output_dir: Optional[str] = None

    @property
    def bootstrap(self) -> bool:
        return self.epsilon is not None

    @property
    def inner_steps(self) -> int:
        if self.inner_iterations is not None:
            return self.inner_iterations
        return 1000 if self.bootstrap else 100

    @property
    def total_inner_steps(self) -> int:
        return self.outer_iterations * self.inner_steps

    @property
    def clip_norms(self) -> tuple[float, float]:
        """(generator clip, energy clip) with the per-task defaults."""
        if self.task.task == "gbrbm":
            default = (20.0, 100.0)
        else:
            default = (100.0, 1000.0)
        return (
            self.generator_clip if self.generator_clip is not None else default[0],
            self.energy_clip if self.energy_clip is not None else default[1],
        )


def load_config(path: str | Path, **overrides) -> TrainConfig:
    """Load a TOML training configuration.

    Args:
        path: Config file path
        **overrides: Top-level fields replacing file values (CLI flags)

    Returns:
        TrainConfig: Validated configuration

    Raises:
        ConfigError: If the file is unreadable, malformed or fails validation
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from e
    except tomllib.TOMLDecodeError as e:
        # message carries "(at line N, column M)"
        raise ConfigError(f"{path}: {e}") from e

    for key, value in overrides.items():
        if value is not None:
            raw[key] = value

    try:
        return TrainConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"{path}: {problems}") from e


# Global settings instance - use base config by default
settings = Settings.load()
