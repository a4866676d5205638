"""Run configuration: YAML in, validated dataclasses out.

Unknown keys are rejected at every nesting level so a typo fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .planner import ConfigError, ModelConfig
from .training import OptimizerParams


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)


def _known_fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section, mapping, cls):
    if not isinstance(mapping, dict):
        raise ConfigError(f"config section {section!r} must be a mapping, got {type(mapping).__name__}")
    unknown = set(mapping) - _known_fields(cls)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in config section {section!r}: {', '.join(sorted(unknown))}"
        )
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    for key, val in mapping.items():
        hint = hints[key]
        bad_float = hint == "float" and (isinstance(val, bool) or not isinstance(val, (int, float)))
        bad_int = hint == "int" and (isinstance(val, bool) or not isinstance(val, int))
        if bad_float or bad_int:
            raise ConfigError(f"{section}.{key} must be a number, got {val!r}")


def config_from_dict(data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    unknown = set(data) - {"model", "optimizer"}
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {', '.join(sorted(unknown))}")
    model_raw = data.get("model", {}) or {}
    opt_raw = data.get("optimizer", {}) or {}
    _check_keys("model", model_raw, ModelConfig)
    _check_keys("optimizer", opt_raw, OptimizerParams)
    model_raw = dict(model_raw)
    for key in ("image_shape", "bev_shape"):
        if key in model_raw:
            model_raw[key] = tuple(int(v) for v in model_raw[key])
    try:
        return RunConfig(model=ModelConfig(**model_raw), optimizer=OptimizerParams(**opt_raw))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return config_from_dict(data)


def config_to_dict(cfg):
    return {
        "model": cfg.model.to_dict(),
        "optimizer": dataclasses.asdict(cfg.optimizer),
    }


def format_config(cfg):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True).rstrip()
