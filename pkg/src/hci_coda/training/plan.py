"""Training plans and learning-rate schedules for the three phases.

* pretrain / adapt: linear warmup to ``lr`` then cosine decay to
  ``min_lr`` at ``horizon`` (defaults to ``epochs``).
* head: linear warmup to ``lr`` then ×``factor`` steps whenever
  validation loss and accuracy both stop improving for ``patience``
  epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

from ..objectives import DistillConfig

Objective = Literal["dino", "dino_cb", "mae"]
ScopeLevel = Literal["source", "batch", "plate"]
Schedule = Literal["cosine", "plateau"]

OBJECTIVES: tuple[Objective, ...] = ("dino", "dino_cb", "mae")
SCOPE_LEVELS: tuple[ScopeLevel, ...] = ("source", "batch", "plate")

__all__ = [
    "OBJECTIVES",
    "SCOPE_LEVELS",
    "AdaptScope",
    "PhaseSchedule",
    "PlateauTracker",
    "TTTConfig",
    "TrainPlan",
    "lr_at",
]


@dataclass(frozen=True)
class PhaseSchedule:
    """Epoch budget, batch size and learning-rate curve of one phase."""

    epochs: int = 300
    lr: float = 1e-4
    warmup_epochs: float = 10
    schedule: Schedule = "cosine"
    horizon: float | None = None
    min_lr: float = 0.0
    batch_size: int = 32
    weight_decay: float = 0.04
    patience: int = 5
    factor: float = 0.1
    steps_per_epoch: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr: must be > 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs: must be >= 0")
        if self.schedule not in ("cosine", "plateau"):
            raise ValueError(
                f"Invalid schedule '{self.schedule}'. Must be one of: cosine, plateau"
            )
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.patience < 1:
            raise ValueError("patience: must be >= 1")
        if not 0 < self.factor < 1:
            raise ValueError("factor: must be in (0, 1)")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch: must be >= 1")

    @property
    def end(self) -> float:
        return float(self.horizon if self.horizon is not None else self.epochs)


def _default_head() -> PhaseSchedule:
    return PhaseSchedule(epochs=100, warmup_epochs=3, schedule="plateau", weight_decay=0.05)


def _default_adapt() -> PhaseSchedule:
    return PhaseSchedule(epochs=50)


@dataclass(frozen=True)
class TTTConfig:
    """Per-image test-time training: *steps* MAE steps at *lr*, then reset."""

    steps: int = 10
    lr: float = 1e-4

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps: must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr: must be > 0")


@dataclass(frozen=True)
class TrainPlan:
    pretrain: PhaseSchedule = field(default_factory=PhaseSchedule)
    head: PhaseSchedule = field(default_factory=_default_head)
    adapt: PhaseSchedule = field(default_factory=_default_adapt)
    objective: Objective = "dino_cb"
    scope: ScopeLevel = "source"
    distill: DistillConfig = field(default_factory=DistillConfig)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(
                f"Invalid objective '{self.objective}'. Must be one of: {', '.join(OBJECTIVES)}"
            )
        if self.scope not in SCOPE_LEVELS:
            raise ValueError(
                f"Invalid scope '{self.scope}'. Must be one of: {', '.join(SCOPE_LEVELS)}"
            )


@dataclass(frozen=True)
class AdaptScope:
    """Granularity of adaptation and the target ids it covers (empty = all)."""

    level: ScopeLevel = "source"
    ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.level not in SCOPE_LEVELS:
            raise ValueError(
                f"Invalid scope '{self.level}'. Must be one of: {', '.join(SCOPE_LEVELS)}"
            )


def lr_at(schedule: PhaseSchedule, epoch: float, plateau_steps: int = 0) -> float:
    """Learning rate at fractional *epoch*.

    Args:
        schedule: Phase schedule.
        epoch: Epoch position (``>= 0``), fractional within an epoch.
        plateau_steps: Reductions triggered so far (plateau schedule only).
    """
    if epoch < 0:
        raise ValueError("epoch: must be >= 0")
    warmup = schedule.warmup_epochs
    if warmup > 0 and epoch < warmup:
        return schedule.lr * epoch / warmup
    if schedule.schedule == "plateau":
        return schedule.lr * schedule.factor**plateau_steps
    span = schedule.end - warmup
    progress = 1.0 if span <= 0 else min(max((epoch - warmup) / span, 0.0), 1.0)
    return schedule.min_lr + 0.5 * (schedule.lr - schedule.min_lr) * (
        1 + math.cos(math.pi * progress)
    )


class PlateauTracker:
    """Counts plateau-triggered reductions from validation loss and accuracy."""

    def __init__(self, patience: int = 5, min_delta: float = 0.0) -> None:
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_accuracy = -math.inf
        self.bad_epochs = 0
        self.steps = 0

    def update(self, val_loss: float, val_accuracy: float) -> bool:
        """Record one epoch; returns True when a reduction was triggered."""
        improved = False
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            improved = True
        if val_accuracy > self.best_accuracy + self.min_delta:
            self.best_accuracy = val_accuracy
            improved = True
        if improved:
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.steps += 1
            self.bad_epochs = 0
            return True
        return False
