"""Run configuration: a JSON file plus command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .trainer import TrainConfig

COMMANDS = ("train", "refine", "predict", "evaluate", "crossval", "synth")
LAYOUTS = ("drive", "stare", "generic")


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_train: int = 32
    n_test: int = 8
    size: int = 64


@dataclass
class RunConfig:
    command: str = "train"
    train_root: str | None = None
    test_root: str | None = None
    layout: str = "generic"
    out: str = "runs/default"
    seed: int = 0
    use_fov: bool = True
    folds: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.synth, dict):
            self.synth = SynthConfig(**self.synth)
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.layout not in LAYOUTS:
            raise ConfigError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        # the run seed is the single source of truth
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path
