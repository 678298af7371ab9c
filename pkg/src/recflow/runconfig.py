"""Run configuration: JSON config file with dot-path flag overrides.

Defaults follow the reference setup wherever one is stated: k = 64 grid,
2-hour bins, 0.5/0.25/0.25 temporal split, learning rate 0.003 with
plateau factor 0.1 and patience 100, 30 evaluation samples, 110-cell
heatmap grid, 35 flow triplets, 50/30 mixture components, 128-unit layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .models.config import ModelConfig


class ConfigError(ValueError):
    """Bad configuration file or override."""


@dataclass
class DataConfig:
    input_path: str = ""
    time_column: str = "time"
    longitude_column: str = "longitude"
    latitude_column: str = "latitude"
    duration_column: str = ""
    user_column: str = ""
    delimiter: str = ","
    bbox: tuple[float, float, float, float] = ()   # lon_min, lon_max, lat_min, lat_max
    min_duration: float = 30.0
    max_duration: float = 10800.0
    dedup_window: float = 0.0                      # 0: no deduplication
    bin_width_seconds: float = 7200.0
    k: int = 64
    train_fraction: float = 0.5
    val_fraction: float = 0.25
    test_fraction: float = 0.25


@dataclass
class SynthConfig:
    process: str = "two_regime_crescent"
    bins: int = 96
    points_mean: float = 60.0
    k: int = 64
    train_fraction: float = 0.5
    val_fraction: float = 0.25
    test_fraction: float = 0.25


@dataclass
class TrainConfig:
    lr: float = 0.003
    max_epochs: int = 500
    kl_anneal_epochs: int = 100
    plateau_patience: int = 100
    plateau_factor: float = 0.1
    early_stop_patience: int = 200
    window: int = 0
    grad_clip: float = 0.0


@dataclass
class EvalConfig:
    samples: int = 30
    grid: int = 110
    quant_grid: int = 64
    horizons: tuple = (2, 5, 10, "full")
    repetitions: int = 5
    points_per_step: int = 0
    rollout_horizon: int = 10
    at_bin: int = -1               # -1: first test bin


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(value_text: str, current):
    """Parse an override string against the current field value's type."""
    if isinstance(current, bool):
        if value_text.lower() in ("true", "1", "yes"):
            return True
        if value_text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value_text!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value_text)
        except ValueError:
            raise ConfigError(f"expected an integer, got {value_text!r}") from None
    if isinstance(current, float):
        try:
            return float(value_text)
        except ValueError:
            raise ConfigError(f"expected a number, got {value_text!r}") from None
    if isinstance(current, (tuple, list)):
        try:
            parsed = json.loads(value_text)
        except json.JSONDecodeError:
            raise ConfigError(f"expected a JSON list, got {value_text!r}") from None
        if not isinstance(parsed, list):
            raise ConfigError(f"expected a JSON list, got {value_text!r}")
        return tuple(parsed)
    return value_text


def valid_keys() -> list[str]:
    keys = ["seed"]
    cfg = RunConfig()
    for f in fields(cfg):
        block = getattr(cfg, f.name)
        if is_dataclass(block):
            keys.extend(f"{f.name}.{g.name}" for g in fields(block))
    return sorted(keys)


def apply_override(config: RunConfig, key: str, value_text: str):
    parts = key.split(".")
    if len(parts) == 1 and parts[0] == "seed":
        config.seed = int(value_text)
        return
    if len(parts) != 2:
        raise ConfigError(
            f"unknown field {key!r}; valid fields: {', '.join(valid_keys())}")
    block_name, field_name = parts
    block = getattr(config, block_name, None)
    if block is None or not is_dataclass(block) or not hasattr(block, field_name):
        raise ConfigError(
            f"unknown field {key!r}; valid fields: {', '.join(valid_keys())}")
    setattr(block, field_name, _coerce(value_text, getattr(block, field_name)))


def load_config(path: str | None, overrides: list[tuple[str, str]] | None = None
                ) -> RunConfig:
    config = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no config file at {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        _apply_dict(config, data)
    for key, value in overrides or []:
        apply_override(config, key, value)
    _validate(config)
    return config


def _apply_dict(config: RunConfig, data: dict):
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    for block_name, block_value in data.items():
        if block_name == "seed":
            config.seed = int(block_value)
            continue
        block = getattr(config, block_name, None)
        if block is None or not is_dataclass(block):
            raise ConfigError(
                f"unknown config block {block_name!r}; valid fields: "
                f"{', '.join(valid_keys())}")
        if not isinstance(block_value, dict):
            raise ConfigError(f"config block {block_name!r} must be an object")
        known = {f.name for f in fields(block)}
        for key, value in block_value.items():
            if key not in known:
                raise ConfigError(
                    f"unknown field {block_name}.{key}; valid fields: "
                    f"{', '.join(valid_keys())}")
            current = getattr(block, key)
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(block, key, value)


def _validate(config: RunConfig):
    try:
        ModelConfig(**{f.name: getattr(config.model, f.name)
                       for f in fields(ModelConfig)})
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if config.train.lr <= 0:
        raise ConfigError("train.lr must be positive")
    if config.eval.samples < 1:
        raise ConfigError("eval.samples must be at least 1")


def config_to_dict(config: RunConfig) -> dict:
    out: dict = {"seed": config.seed}
    for f in fields(config):
        block = getattr(config, f.name)
        if is_dataclass(block) and not isinstance(block, type):
            if isinstance(block, ModelConfig):
                out[f.name] = block.to_dict()
            else:
                out[f.name] = {g.name: _jsonable(getattr(block, g.name))
                               for g in fields(block)}
    return out


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v
