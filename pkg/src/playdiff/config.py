"""Nested run configuration with defaults for every field; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import NoiseDist
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    steps: int = 10
    sigma_min: float = 0.001
    sigma_max: float = 80.0

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("sampler needs at least 2 noise levels")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")


@dataclass
class PlaygenConfig:
    n_episodes: int = 300
    n_tasks: int = 6
    n_blocks: int = 3
    p_label: float = 0.02
    noise: float = 0.1
    pause: int = 6

    def __post_init__(self):
        if self.n_episodes < 1 or self.n_tasks < 1:
            raise ValueError("n_episodes and n_tasks must be >= 1")
        if not 1 <= self.n_blocks <= 6:
            raise ValueError("n_blocks must lie in [1, 6]")
        if not 0.0 <= self.p_label <= 1.0:
            raise ValueError("p_label must lie in [0, 1]")
        if self.pause < 0:
            raise ValueError("pause must be >= 0")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class EvalConfig:
    n_chains: int = 100
    chain_len: int = 5
    max_steps: int = 120
    execute: int = 0  # executed steps per chunk; 0 means the whole chunk
    seed: int = 1234
    batch: int = 64

    def __post_init__(self):
        if self.n_chains < 1 or self.chain_len < 1 or self.max_steps < 1 or self.batch < 1:
            raise ValueError("evaluator counts must be >= 1")
        if self.execute < 0:
            raise ValueError("execute must be >= 0")


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "noise": NoiseDist,
    "schedule": ScheduleConfig,
    "playgen": PlaygenConfig,
    "evaluator": EvalConfig,
}


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseDist = field(default_factory=NoiseDist)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    playgen: PlaygenConfig = field(default_factory=PlaygenConfig)
    evaluator: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.evaluator.execute > self.model.chunk_len:
            raise ConfigError("evaluator.execute cannot exceed model.chunk_len")

    def to_dict(self) -> dict:
        return {name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in _SECTIONS}

    def replace(self, section: str, **changes) -> "Config":
        """Copy with fields of one section changed (validated like a fresh load)."""
        data = self.to_dict()
        data[section].update(changes)
        return config_from_dict(data)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = data.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"section {name} must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(values) - known)
        if bad:
            raise ConfigError(f"unknown key(s) in {name}: {', '.join(bad)}")
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc
    try:
        return Config(**sections)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)
