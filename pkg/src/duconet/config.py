"""JSON run configuration: model, train and data sections."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .network import DucoNetConfig
from .synth import PerturbSpec
from .training import TrainConfig


@dataclass
class DataConfig:
    size: int = 64
    n_train: int = 256
    n_test: int = 64
    perturb: PerturbSpec = field(default_factory=PerturbSpec)

    def __post_init__(self):
        if isinstance(self.perturb, Mapping):
            self.perturb = PerturbSpec.from_dict(self.perturb)
        if self.size < 1 or self.n_train < 0 or self.n_test < 0:
            raise ValueError("data sizes must be non-negative and size positive")

    @classmethod
    def from_dict(cls, data: Mapping) -> "DataConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {"size": self.size, "n_train": self.n_train, "n_test": self.n_test, "perturb": self.perturb.to_dict()}


@dataclass
class RunConfig:
    model: DucoNetConfig = field(default_factory=DucoNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        unknown = set(raw) - {"model", "train", "data"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=DucoNetConfig.from_dict(raw.get("model", {})),
            train=TrainConfig.from_dict(raw.get("train", {})),
            data=DataConfig.from_dict(raw.get("data", {})),
        )

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": self.data.to_dict()}


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(json.loads(Path(path).read_text()))
