"""Classification metrics: accuracy, macro-F1, per-class scores, confusion matrix."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
import structlog
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from ..dataset import ImageRecord
from ..exceptions import CodaError

logger = structlog.get_logger()

Aggregation = Literal["image", "well"]


class MetricsError(CodaError, ValueError):
    """Base class for scoring errors."""


class LengthMismatch(MetricsError):
    """Raised when predictions and labels differ in length."""


class IndexOutOfRange(MetricsError):
    """Raised when a class index is negative or not below K."""


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    confusion: np.ndarray = field(repr=False, compare=False)
    n_samples: int
    aggregation: Aggregation = "image"
    unsupported: tuple[int, ...] = ()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (
            self.accuracy == other.accuracy
            and self.macro_f1 == other.macro_f1
            and self.f1 == other.f1
            and self.n_samples == other.n_samples
            and self.aggregation == other.aggregation
            and np.array_equal(self.confusion, other.confusion)
        )

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "f1": self.macro_f1}

    def per_class(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "class": range(len(self.f1)),
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
                "support": self.confusion.sum(axis=1),
            }
        )


def score(
    predictions: Sequence[int] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    k: int,
    *,
    aggregation: Aggregation = "image",
) -> MetricsReport:
    """Score predicted class indices against labels.

    Macro-F1 is the unweighted mean over all *k* classes; a class with no
    support contributes F1 = 0 and is listed in ``unsupported``.

    Raises:
        LengthMismatch: Different numbers of predictions and labels.
        IndexOutOfRange: A value is outside ``[0, k)``.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise LengthMismatch(f"{len(pred)} predictions but {len(true)} labels")
    for name, values in (("prediction", pred), ("label", true)):
        bad = values[(values < 0) | (values >= k)]
        if bad.size:
            raise IndexOutOfRange(f"{name} {int(bad[0])} outside [0, {k})")

    classes = list(range(k))
    confusion = confusion_matrix(true, pred, labels=classes)
    precision, recall, f1, support = precision_recall_fscore_support(
        true, pred, labels=classes, average=None, zero_division=0
    )
    unsupported = tuple(int(c) for c in np.flatnonzero(support == 0))
    if unsupported:
        logger.warning("classes without support score F1 = 0", classes=list(unsupported))
    n = int(len(true))
    return MetricsReport(
        accuracy=float(np.trace(confusion) / n) if n else 0.0,
        macro_f1=float(np.mean(f1)) if k else 0.0,
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        confusion=confusion,
        n_samples=n,
        aggregation=aggregation,
        unsupported=unsupported,
    )


def aggregate_by_well(
    logits: np.ndarray, records: Sequence[ImageRecord]
) -> tuple[np.ndarray, list[ImageRecord]]:
    """Mean logit per well; returns one row and one representative record per well."""
    groups: dict[tuple[str, str, str, str], list[int]] = {}
    for i, record in enumerate(records):
        groups.setdefault(record.well_key, []).append(i)
    keys = sorted(groups)
    pooled = np.stack([logits[groups[key]].mean(axis=0) for key in keys])
    return pooled, [records[groups[key][0]] for key in keys]


def score_logits(
    logits: np.ndarray,
    records: Sequence[ImageRecord],
    k: int,
    *,
    aggregation: Aggregation = "image",
) -> MetricsReport:
    """Score logits of labelled *records*, optionally pooled per well first."""
    if aggregation == "well":
        logits, records = aggregate_by_well(logits, records)
    keep = [i for i, r in enumerate(records) if r.moa_label is not None]
    labels = [records[i].moa_label for i in keep]
    predictions = np.asarray(logits)[keep].argmax(axis=1) if keep else np.array([], dtype=int)
    return score(predictions, labels, k, aggregation=aggregation)  # ty: ignore[invalid-argument-type]
