"""Configuration, CLI, and experiment orchestration."""

from .config import ConfigError, ExperimentConfig, resolve_config
from .runner import training_run

__all__ = ["ConfigError", "ExperimentConfig", "resolve_config", "training_run"]
