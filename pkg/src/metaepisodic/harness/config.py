"""Experiment configuration: flat key=value files, flag overrides, echoing.

The config format is plain text, one ``key = value`` per line, ``#`` starting
a comment. Unknown keys are rejected. Every run echoes its fully resolved
configuration both as a standalone ``config.resolved`` file (directly
re-runnable via ``--config``) and as ``# ``-prefixed header lines at the top
of every output file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "CONFIG_KEYS",
    "PAPER_PRESET",
    "parse_config_text",
    "load_config_file",
    "resolve_config",
    "echo_lines",
    "with_overrides",
]


class ConfigError(ValueError):
    """The configuration is malformed or inconsistent."""


@dataclass(frozen=True)
class ExperimentConfig:
    data_bank: str
    data_labels: str
    data_prototypes: str
    algo: str = "maml"
    sampler: str = "dynamic"
    n_way: int = 3
    k_shot: int = 5
    q_query: int = 5
    tasks_per_episode: int = 20
    episodes_per_epoch: int = 10
    epochs: int = 30
    meta_batch: int = 1
    outer_lr: float = 1e-4
    init_inner_lr: float = 0.01
    reptile_rate: float = 0.5
    adapter_hidden: int = 16
    blend_ratio: float = 0.5
    logit_scale: float = 10.0
    inner_steps_train: int = 1
    inner_steps_test: int = 1
    seed: int = 0
    eval_tasks: int = 200
    eval_seed: int = 1234
    out_dir: str = "runs"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
CONFIG_KEYS = tuple(_FIELDS)
_REQUIRED = ("data_bank", "data_labels", "data_prototypes")

# Protocol-scale settings: 20 tasks per episode, 50 episodes per epoch,
# 100 epochs, outer rate 1e-4, single-step updates, 3-way 5-shot 5-query.
PAPER_PRESET: dict[str, str] = {
    "tasks_per_episode": "20",
    "episodes_per_epoch": "50",
    "epochs": "100",
    "outer_lr": "0.0001",
    "inner_steps_train": "1",
    "inner_steps_test": "1",
    "n_way": "3",
    "k_shot": "5",
    "q_query": "5",
}

_ALGOS = ("maml", "fomaml", "reptile", "metasgd")
_SAMPLERS = ("dynamic", "random")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into raw strings; rejects unknown keys."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source} line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def _convert(key: str, value: str):
    target = _FIELDS[key].type
    try:
        if target in ("int", int):
            return int(value)
        if target in ("float", float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {target}") from exc


def resolve_config(
    file_values: dict[str, str] | None = None,
    overrides: dict[str, str] | None = None,
    preset: str | None = None,
) -> ExperimentConfig:
    """Merge defaults, optional preset, config file, and flag overrides."""
    raw: dict[str, str] = {}
    if preset is not None:
        if preset != "paper":
            raise ConfigError(f"unknown preset {preset!r}")
        raw.update(PAPER_PRESET)
    raw.update(file_values or {})
    raw.update(overrides or {})

    unknown = set(raw) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {missing}")

    cfg = ExperimentConfig(**{k: _convert(k, v) for k, v in raw.items()})
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.algo not in _ALGOS:
        raise ConfigError(f"algo must be one of {_ALGOS}, got {cfg.algo!r}")
    if cfg.sampler not in _SAMPLERS:
        raise ConfigError(f"sampler must be one of {_SAMPLERS}, got {cfg.sampler!r}")
    for key in ("n_way", "k_shot", "q_query", "tasks_per_episode",
                "episodes_per_epoch", "meta_batch", "adapter_hidden",
                "inner_steps_train", "inner_steps_test", "eval_tasks"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1, got {getattr(cfg, key)}")
    if cfg.epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {cfg.epochs}")
    if cfg.outer_lr <= 0:
        raise ConfigError(f"outer_lr must be positive, got {cfg.outer_lr}")
    if cfg.init_inner_lr < 0 or cfg.reptile_rate < 0:
        raise ConfigError("init_inner_lr and reptile_rate must be >= 0")
    if not 0.0 <= cfg.blend_ratio <= 1.0:
        raise ConfigError(f"blend_ratio must lie in [0, 1], got {cfg.blend_ratio}")
    if cfg.logit_scale <= 0:
        raise ConfigError(f"logit_scale must be positive, got {cfg.logit_scale}")


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_lines(cfg: ExperimentConfig) -> list[str]:
    """The resolved configuration as re-parseable ``key = value`` lines."""
    return [f"{name} = {_format_value(getattr(cfg, name))}" for name in CONFIG_KEYS]


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """Typed copy-with-changes that re-runs validation."""
    out = replace(cfg, **kwargs)
    _validate(out)
    return out
