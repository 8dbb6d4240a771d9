"""Experiment configuration: nested dataclasses loaded from JSON or TOML with strict validation."""

from __future__ import annotations

import dataclasses
import json
import sys
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .losses import LossConfig
from .matcheval import MatchConfig
from .model import ModelConfig
from .synthgen import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExportConfig:
    keypoint_scale: float = 1.0
    pairing: str = "exhaustive"  # or "sequential"

    def __post_init__(self):
        if self.pairing not in ("exhaustive", "sequential"):
            raise ValueError(f"pairing must be 'exhaustive' or 'sequential', got {self.pairing!r}")


@dataclass
class ExperimentConfig:
    synthgen: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    matcheval: MatchConfig = field(default_factory=MatchConfig)
    geoexport: ExportConfig = field(default_factory=ExportConfig)
    out_dir: str = "runs/default"
    seed: int = 0
    count: int = 100
    corpus: str | None = None
    val_corpus: str | None = None
    eval_corpus: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, where)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(errors[0] if errors else f"{where}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table/object, got {type(value).__name__}")
        return from_dict(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported config type {tp}")


def from_dict(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        loc = f"{where}.{unknown[0]}" if where else unknown[0]
        raise ConfigError(f"{loc}: unknown key")
    kwargs = {}
    for name, value in data.items():
        loc = f"{where}.{name}" if where else name
        kwargs[name] = _coerce(value, hints[name], loc)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where or '<root>'}: {e}") from e


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        text = p.read_text()
        try:
            if p.suffix == ".toml":
                if sys.version_info >= (3, 11):
                    import tomllib
                else:
                    import tomli as tomllib
                data = tomllib.loads(text)
            else:
                data = json.loads(text)
        except Exception as e:
            raise ConfigError(f"{p}: cannot parse config: {e}") from e
    for key, value in (overrides or {}).items():
        data[key] = value
    return from_dict(ExperimentConfig, data)
