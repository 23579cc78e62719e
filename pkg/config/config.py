"""
Configuration Management
Centralized config for the simulator runtime and for experiment definitions
"""

import configparser
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from data.datasets import DATASET_NAMES
from errors import ConfigError

# Load environment variables
load_dotenv()

LEARNING_RATE_GRID = (3e-3, 1e-3, 3e-4, 1e-4)
METHODS = ("feddiff", "fedavg", "ensemble", "central", "external-baseline-import")


def _default_device() -> str:
    try:
        import torch
        return "cuda" if torch.cuda.is_available() else "cpu"
    except ImportError:
        return "cpu"


class Config:
    """Base configuration"""

    # Paths
    DATA_ROOT = os.getenv("FEDGEN_DATA_ROOT", "./datasets")
    OUTPUT_DIR = os.getenv("FEDGEN_OUTPUT_DIR", "./runs")

    # Runtime
    DEVICE = os.getenv("FEDGEN_DEVICE") or _default_device()
    LOG_LEVEL = os.getenv("FEDGEN_LOG_LEVEL", "INFO")
    WORKERS = int(os.getenv("FEDGEN_WORKERS", 1))
    PROGRESS = True

    # Environment
    ENVIRONMENT = os.getenv("ENVIRONMENT", "development")  # development, production, test

    @classmethod
    def validate(cls):
        """Validate runtime configuration"""
        problems = []
        if cls.WORKERS < 1:
            problems.append(f"FEDGEN_WORKERS must be >= 1, got {cls.WORKERS}")
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL.upper()), int):
            problems.append(f"Unknown FEDGEN_LOG_LEVEL: {cls.LOG_LEVEL}")
        if not str(cls.DEVICE).startswith(("cpu", "cuda", "mps")):
            problems.append(f"Unsupported FEDGEN_DEVICE: {cls.DEVICE}")

        if problems:
            raise ValueError(f"Invalid configuration: {'; '.join(problems)}")

        return True


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True


class ProductionConfig(Config):
    """Long-running experiment configuration"""
    DEBUG = False


class TestConfig(Config):
    """Test configuration: CPU only, quiet progress bars"""
    DEBUG = True
    DEVICE = "cpu"
    PROGRESS = False


# Select config based on environment
config_map = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "test": TestConfig,
}

config = config_map.get(os.getenv("ENVIRONMENT", "development"), DevelopmentConfig)()


def setup_logging(level: str = None, log_file: str = None):
    """
    Install the console (and optional file) log handlers

    Args:
        level: Log level name (default: Config.LOG_LEVEL)
        log_file: Optional path of a run log
    """
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    logging.basicConfig(
        level=(level or config.LOG_LEVEL).upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


# ========== EXPERIMENT CONFIGURATION ==========

class PrivacySettings(BaseModel):
    """Target budget for every client model; the FMF release takes fmf_share of it"""
    epsilon: float = Field(gt=0)
    delta: float = Field(default=1e-5, gt=0, lt=1)
    clip_norm: float = Field(default=1.0, gt=0)
    noise_multiplier: Optional[float] = Field(default=None, gt=0)
    fmf_share: float = Field(default=0.05, ge=0, lt=1)
    microbatch_size: int = Field(default=32, ge=1)


class FmfSettings(BaseModel):
    gamma: float = Field(default=0.05, ge=0, lt=1)
    scope: Literal["client", "global"] = "client"


class ExperimentConfig(BaseModel):
    """
    One experiment cell: a dataset, a partition, a method and its settings,
    repeated over several seeds
    """
    dataset: str = "fashionmnist"
    data_root: str = Field(default_factory=lambda: config.DATA_ROOT)
    train_subset: Optional[int] = Field(default=None, ge=1)

    client_count: int = Field(default=10, ge=1)
    alpha: float = Field(default=0.01, gt=0)
    method: Literal["feddiff", "fedavg", "ensemble", "central", "external-baseline-import"] = "feddiff"

    local_epochs: int = Field(default=200, ge=0)
    global_epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=128, ge=1)
    denoiser_lr: float = 1e-3
    classifier_lr: float = 3e-4
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    timesteps: int = Field(default=1000, ge=1)
    sampling_steps: int = Field(default=1000, ge=1)
    sample_batch_size: int = Field(default=500, ge=1)
    model_size: Literal["default", "small"] = "default"
    synthetic_count: Optional[int] = Field(default=None, ge=1)

    privacy: Optional[PrivacySettings] = None
    filter: Literal["none", "fmf", "oracle"] = "none"
    fmf: FmfSettings = Field(default_factory=FmfSettings)

    audit: bool = False
    audit_against: Literal["shard", "full"] = "shard"
    audit_oversample: int = Field(default=5, ge=1)
    audit_threshold: float = Field(default=1.0, gt=0)

    external_results: Optional[str] = None
    workers: int = Field(default_factory=lambda: config.WORKERS, ge=1)
    output_dir: str = Field(default_factory=lambda: config.OUTPUT_DIR)

    @field_validator("dataset")
    @classmethod
    def _known_dataset(cls, value: str) -> str:
        value = value.lower()
        if value not in DATASET_NAMES:
            raise ValueError(f"dataset must be one of {DATASET_NAMES}, got {value!r}")
        return value

    @field_validator("denoiser_lr", "classifier_lr")
    @classmethod
    def _on_grid(cls, value: float) -> float:
        if not any(abs(value - lr) <= 1e-12 for lr in LEARNING_RATE_GRID):
            raise ValueError(f"learning rate {value} is not on the grid {LEARNING_RATE_GRID}")
        return value

    @field_validator("seeds")
    @classmethod
    def _seeds_nonempty(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("seeds must be nonempty")
        return value

    @model_validator(mode="after")
    def _consistent(self):
        if self.sampling_steps > self.timesteps:
            raise ValueError(
                f"sampling_steps ({self.sampling_steps}) cannot exceed timesteps ({self.timesteps})"
            )
        if self.method == "external-baseline-import" and not self.external_results:
            raise ValueError("external-baseline-import requires external_results")
        if self.filter == "oracle" and self.method != "feddiff":
            raise ValueError("the oracle filter applies to feddiff only")
        return self

    @property
    def epsilon(self) -> Optional[float]:
        return self.privacy.epsilon if self.privacy else None


PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "dataset": "fashionmnist",
        "train_subset": 10000,
        "client_count": 5,
        "alpha": 0.01,
        "local_epochs": 50,
        "global_epochs": 50,
        "model_size": "small",
        "sampling_steps": 250,
    },
    "full": {
        "client_count": 10,
        "alpha": 0.01,
        "local_epochs": 200,
        "global_epochs": 50,
        "model_size": "default",
        "sampling_steps": 1000,
    },
}

# INI sections are organisational only; keys map straight onto ExperimentConfig
_PRIVACY_KEYS = {"epsilon", "delta", "clip_norm", "noise_multiplier", "fmf_share", "microbatch_size"}
_FMF_KEYS = {"gamma", "scope"}
_LIST_KEYS = {"seeds"}


def _parse_value(raw: str) -> Any:
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "yes", "on"):
        return True
    if text.lower() in ("false", "no", "off"):
        return False
    return text


def load_config_file(path: str) -> Dict[str, Any]:
    """
    Read an INI experiment file into a flat override dictionary

    Args:
        path: Path of the file (sections [experiment], [training], [privacy], [fmf], [audit])

    Returns:
        Dictionary suitable for build_experiment_config(overrides=...)
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"Failed to read config file {path}: {e}") from e

    values: Dict[str, Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            value = _parse_value(raw)
            if key in _LIST_KEYS and isinstance(value, str):
                value = [int(v) for v in value.replace(",", " ").split()]
            if section == "privacy" and key in _PRIVACY_KEYS:
                values.setdefault("privacy", {})[key] = value
            elif section == "fmf" and key in _FMF_KEYS:
                values.setdefault("fmf", {})[key] = value
            else:
                values[key] = value
    return values


def build_experiment_config(preset: str = None,
                            file_values: Dict[str, Any] = None,
                            overrides: Dict[str, Any] = None) -> ExperimentConfig:
    """
    Merge preset, config-file values and flag overrides (later wins)

    Args:
        preset: "desk", "full" or None
        file_values: Output of load_config_file
        overrides: Values from command-line flags (None entries are ignored)

    Returns:
        Validated ExperimentConfig
    """
    merged: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}; available: {sorted(PRESETS)}")
        merged.update(PRESETS[preset])

    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key in ("privacy", "fmf") and isinstance(value, dict):
                nested = dict(merged.get(key) or {})
                nested.update({k: v for k, v in value.items() if v is not None})
                merged[key] = nested
            else:
                merged[key] = value

    privacy = merged.get("privacy")
    if isinstance(privacy, dict) and privacy.get("epsilon") is None:
        merged.pop("privacy")

    try:
        return ExperimentConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment configuration: {e}") from e
