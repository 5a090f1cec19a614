"""Reduce-on-plateau learning rate and early stopping on a monitored value (lower is better)."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence


@dataclass
class TrainConfig:
    lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    early_stop_patience: int = 10
    min_delta: float = 1e-4
    monitor: str = "val_loss"
    batch_size: int = 8
    max_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.monitor not in ("val_loss", "train_loss"):
            raise ValueError(f"monitor must be val_loss or train_loss, got {self.monitor!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlateauTracker:
    """Incremental bookkeeping for both rules.

    An epoch counts as an improvement when its value is below ``best - min_delta``.
    The learning-rate counter resets after each reduction; the early-stop
    counter only resets on improvement.
    """

    lr: float
    factor: float = 0.1
    patience: int = 3
    stop_patience: int = 10
    min_delta: float = 1e-4
    best: float = float("inf")
    wait_lr: int = 0
    wait_stop: int = 0
    reductions: int = 0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "PlateauTracker":
        return cls(config.lr, config.plateau_factor, config.plateau_patience, config.early_stop_patience, config.min_delta)

    def update(self, value: float) -> bool:
        """Feed one epoch's monitored value; returns True when it improved on the best."""
        if value < self.best - self.min_delta:
            self.best = value
            self.wait_lr = 0
            self.wait_stop = 0
            return True
        self.wait_lr += 1
        self.wait_stop += 1
        if self.wait_lr >= self.patience:
            self.lr *= self.factor
            self.reductions += 1
            self.wait_lr = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait_stop >= self.stop_patience

    def state_dict(self) -> dict:
        return asdict(self)


def plateau_update(history: Sequence[float], config: TrainConfig) -> float:
    """Learning rate in effect after replaying ``history``."""
    if not history:
        raise ValueError("history must be nonempty")
    tr = PlateauTracker.from_config(config)
    for v in history:
        tr.update(v)
    return tr.lr


def early_stop_check(history: Sequence[float], config: TrainConfig) -> str:
    if not history:
        raise ValueError("history must be nonempty")
    tr = PlateauTracker.from_config(config)
    for v in history:
        tr.update(v)
    return "stop" if tr.should_stop else "continue"
