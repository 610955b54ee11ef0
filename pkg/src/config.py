"""
Configuration management for the diffusion toolkit.

Environment-driven defaults live on ``Config``; experiment settings are the
pydantic models ``TrainConfig``, ``ModelConfig`` and ``RunConfig``, the last
one parsed from a flat key=value run file.
"""

import logging
import math
import os
import sys
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

# Load environment variables
load_dotenv()


class Config:
    """Application configuration."""

    # Logging
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    # Reproducibility
    DEFAULT_SEED = int(os.getenv("DPM_SEED", "1234"))

    # Numeric safety
    RATE_EPS = float(os.getenv("DPM_RATE_EPS", "1e-7"))
    VARIANCE_FLOOR = float(os.getenv("DPM_VARIANCE_FLOOR", "1e-12"))
    VARIANCE_TOLERANCE = float(os.getenv("DPM_VARIANCE_TOLERANCE", "0.1"))

    # Training and evaluation plumbing
    CHECKPOINT_EVERY = int(os.getenv("DPM_CHECKPOINT_EVERY", "500"))
    EVAL_CHUNK = int(os.getenv("DPM_EVAL_CHUNK", "64"))

    @classmethod
    def configure_logging(cls, level: Optional[str] = None) -> None:
        """Route library logging to the error stream at the configured level."""
        logging.basicConfig(
            level=(level or cls.LOG_LEVEL).upper(),
            stream=sys.stderr,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )

    @classmethod
    def bits(cls, nats: float) -> float:
        """Convert nats to bits (reporting boundary only)."""
        return nats / math.log(2.0)


class TrainConfig(BaseModel):
    """Optimizer and sampling settings for one training run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(200, gt=0)
    steps: int = Field(2000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    final_learning_rate: Optional[float] = Field(None, gt=0)
    rms_decay: float = Field(0.95, gt=0, lt=1)
    rms_epsilon: float = Field(1e-8, gt=0)
    seed: int = Config.DEFAULT_SEED
    t_subsample: int = Field(0, ge=0)
    learn_schedule: bool = False
    log_every: int = Field(50, gt=0)
    checkpoint_every: int = Field(Config.CHECKPOINT_EVERY, gt=0)

    def learning_rate_at(self, step: int) -> float:
        """Geometric interpolation from learning_rate to final_learning_rate."""
        if self.final_learning_rate is None or self.steps <= 1:
            return self.learning_rate
        frac = min(step, self.steps - 1) / (self.steps - 1)
        return self.learning_rate * (self.final_learning_rate / self.learning_rate) ** frac


class ModelConfig(BaseModel):
    """Reverse-kernel architecture."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    architecture: Literal["rbf", "mlp"] = "rbf"
    rbf_hidden: int = Field(16, gt=0)
    mlp_hidden: Tuple[int, ...] = (50, 50, 50)
    readout: Literal["per_step", "bump"] = "per_step"
    bump_count: int = Field(10, gt=0)
    readout_transform: bool = True

    @field_validator("mlp_hidden")
    @classmethod
    def _positive_layers(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or any(size <= 0 for size in value):
            raise ValueError("mlp_hidden needs at least one positive layer size")
        return value


class RunConfig(BaseModel):
    """Everything one experiment directory needs."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "experiment"
    dataset: str = "swiss_roll"
    data_file: Optional[Path] = None
    n: int = Field(10000, gt=0)
    holdout: int = Field(1000, ge=0)
    kind: Literal["gaussian", "binomial"] = "gaussian"
    T: int = Field(40, gt=0)
    beta1: float = Field(1e-4, gt=0, lt=1)
    schedule: Literal["fixed", "learnable"] = "learnable"
    equilibrium_rate: float = Field(0.5, gt=0, lt=1)
    sample_count: int = Field(2000, gt=0)
    eval_rows: int = Field(100, gt=0)
    eval_trajectories: int = Field(10, ge=2)
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    output_dir: Path = Path("runs/experiment")

    @model_validator(mode="after")
    def _kind_consistency(self) -> "RunConfig":
        if self.kind == "binomial" and self.schedule == "learnable":
            raise ValueError("learned schedules exist for gaussian diffusion only")
        if self.kind == "binomial" and self.train.learn_schedule:
            raise ValueError("learn_schedule requires gaussian diffusion")
        if self.model.architecture == "mlp" and self.kind != "binomial":
            raise ValueError("the mlp reverse model produces bernoulli rates; use kind=binomial")
        if self.model.architecture == "rbf" and self.kind != "gaussian":
            raise ValueError("the rbf reverse model produces gaussian moments; use kind=gaussian")
        return self


_MODEL_KEYS = set(ModelConfig.model_fields)
_TRAIN_KEYS = set(TrainConfig.model_fields)
_RUN_KEYS = set(RunConfig.model_fields) - {"model", "train"}
_PATH_KEYS = ("data_file", "output_dir")


def parse_key_values(text: str) -> Dict[str, str]:
    """
    Parse a flat key=value document.

    Args:
        text: file contents; '#' starts a comment, blank lines are ignored

    Returns:
        Mapping of keys to raw string values
    """
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_run_config(path: Path) -> RunConfig:
    """
    Load a RunConfig from a key=value file.

    Unknown keys are rejected; data_file and output_dir are resolved relative
    to the directory holding the config file.

    Args:
        path: config file location

    Returns:
        Validated RunConfig
    """
    path = Path(path)
    values = parse_key_values(path.read_text())

    unknown = sorted(set(values) - _MODEL_KEYS - _TRAIN_KEYS - _RUN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")

    model_fields = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    if "mlp_hidden" in model_fields:
        try:
            model_fields["mlp_hidden"] = tuple(int(s) for s in model_fields["mlp_hidden"].split(","))
        except ValueError as exc:
            raise ConfigError(f"{path}: mlp_hidden must be comma-separated integers") from exc
    train_fields = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    run_fields: Dict[str, object] = {k: v for k, v in values.items() if k in _RUN_KEYS}

    for key in _PATH_KEYS:
        if key in run_fields:
            run_fields[key] = (path.parent / str(run_fields[key])).resolve()
    if "output_dir" not in run_fields:
        run_fields["output_dir"] = (path.parent / "runs" / str(run_fields.get("name", "experiment"))).resolve()

    try:
        return RunConfig(
            model=ModelConfig(**model_fields),
            train=TrainConfig(**train_fields),
            **run_fields,
        )
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "config"
        raise ConfigError(f"{path}: {where}: {first.get('msg')}") from exc
