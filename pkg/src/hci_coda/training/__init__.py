"""Training phases, schedules and run records.

The experiment grid lives in :mod:`hci_coda.training.matrix`.
"""

from .phases import (
    AdaptResult,
    FrozenPartitionViolation,
    HeadResult,
    NoLabels,
    PairIneligible,
    PretrainResult,
    TTTResult,
    predict,
    run_adapt,
    run_head,
    run_pretrain,
    run_supervised,
    run_ttt,
)
from .plan import AdaptScope, PhaseSchedule, TrainPlan, TTTConfig, lr_at
from .records import RunRecord

__all__ = [
    "AdaptResult",
    "AdaptScope",
    "FrozenPartitionViolation",
    "HeadResult",
    "NoLabels",
    "PairIneligible",
    "PhaseSchedule",
    "PretrainResult",
    "RunRecord",
    "TTTConfig",
    "TTTResult",
    "TrainPlan",
    "lr_at",
    "predict",
    "run_adapt",
    "run_head",
    "run_pretrain",
    "run_supervised",
    "run_ttt",
]
