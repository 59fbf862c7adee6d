"""Training configuration and key-value config files."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import yaml

from .errors import UsageError


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for RVAE pre-training and ND training.

    Serialized into every checkpoint so a saved model is reconstructible
    without external context. The optimizer is Adam (beta1=0.9, beta2=0.99,
    eps=1e-9) with a cosine-annealed learning rate from lr_start to lr_end.
    """

    epochs: int = 500
    lr_start: float = 5e-4
    lr_end: float = 1e-8
    warmup_epochs: int = 20
    hidden_dim: int = 64
    latent_dim: int = 16
    seq_len: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if min(self.hidden_dim, self.latent_dim, self.seq_len, self.batch_size) < 1:
            raise ValueError("dims, seq_len and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(
                f"unknown config keys: {sorted(unknown)}; known keys: {sorted(known)}"
            )
        return cls(**d)


def kl_warmup_weight(epoch: int, warmup_epochs: int) -> float:
    """Linear KL ramp: 0 at epoch 0, 1 from warmup_epochs on."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def load_config_file(path: str | os.PathLike) -> dict:
    """Load a flat key-value YAML config file."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config file must be a flat key-value mapping")
    return data


def write_config_snapshot(path: str | os.PathLike, effective: dict) -> None:
    """Record the effective configuration of a run next to its outputs."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(effective, fh, sort_keys=True, default_flow_style=False)
