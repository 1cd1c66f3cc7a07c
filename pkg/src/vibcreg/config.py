"""Run configuration: one YAML document per run, keys mirror RunConfig fields."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


PHASE_PRETRAIN_EPOCHS = {"part1": 100, "part2": 200}


@dataclass
class RunConfig:
    """Everything needed to reproduce a pretraining + evaluation run.

    ``epochs=None`` resolves to 100 for part-1 and 200 for part-2 pretraining.
    ``crop_length=None`` takes the tabulated crop size, or the two-crop
    schedule when the dataset has none. ``preprocessing=None`` picks
    z-normalization + arcsinh for part-1, plain z-normalization for part-2,
    and nothing for PTB-XL. ``amplitude_center`` is the mean of the part-2
    Gaussian amplitude multiplier (see AugmentConfig).
    """

    framework: str = "vibcreg"
    dataset: str = "GunPoint"
    phase: str = "part1"
    dataset_root: str | None = None
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 256
    epochs: int | None = None
    linear_epochs: int = 50
    finetune_epochs: int = 100
    schedule: str = "cosine"
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    preprocessing: str | None = None
    crop_length: int | None = None
    subset_fraction: float = 1.0
    protocol: str = "linear"
    knn_every: int = 5
    knn_k: int = 5
    nu_multiplier: float = 1.0
    amplitude_center: float = 0.0
    projector_dim: int | None = None
    hidden_dim: int | None = None
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    blocks_per_stage: int = 1
    checkpoint_every: int = 1

    def __post_init__(self) -> None:
        if self.phase not in PHASE_PRETRAIN_EPOCHS:
            raise ConfigError(f"phase must be one of {sorted(PHASE_PRETRAIN_EPOCHS)}, got {self.phase!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        self.seeds = [int(s) for s in self.seeds]
        self.stage_channels = [int(c) for c in self.stage_channels]

    @property
    def pretrain_epochs(self) -> int:
        return PHASE_PRETRAIN_EPOCHS[self.phase] if self.epochs is None else int(self.epochs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**data)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    def hash(self) -> str:
        """Digest of the fields that affect training, for checkpoint matching."""
        d = self.to_dict()
        for key in ("out_dir", "dataset_root", "seeds", "protocol", "linear_epochs", "finetune_epochs"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
