"""Run configuration: one JSON object with flat dotted keys, e.g.
``{"train.epochs": 30, "tracker.tau_high": 0.4}``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from coal.tracker import TrackerConfig
from coal.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    sequences: int = 1
    frames: int = 20
    objects: int = 4
    expressions: int = 10
    counterfactuals: int = 4
    caption_error_rate: float = 0.0
    box_jitter: float = 0.0
    spurious_rate: float = 0.0
    miss_rate: float = 0.0
    seed: int = 42


@dataclass
class EvalConfig:
    predictions: str | None = None
    report: str | None = None


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("train", "tracker", "data", "eval")

    def to_flat(self) -> dict:
        out = {}
        for section in self.SECTIONS:
            for key, value in asdict(getattr(self, section)).items():
                out[f"{section}.{key}"] = value
        return out

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        if section not in self.SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(self, section)
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(key, getattr(type(target)(), name), value))

    def update(self, values: dict) -> "RunConfig":
        for key, value in values.items():
            self.set(key, value)
        return self

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        return cls().update(values)

    def validate(self) -> None:
        try:
            self.train.validate()
            self.tracker.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), indent=1, sort_keys=True) + "\n"


def _coerce(key: str, default, value):
    """Match ``value`` to the type of the field's default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object with dotted keys")
    return RunConfig.from_flat(raw)
