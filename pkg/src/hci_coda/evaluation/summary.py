"""Transfer tables and relative improvements from a matrix ``metrics.csv``."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from ..exceptions import IOFailure

BASELINE = "supervised"


@dataclass(frozen=True)
class MatrixSummary:
    accuracy: pd.DataFrame
    f1: pd.DataFrame
    improvements: pd.DataFrame

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        paths = [out / "table_accuracy.csv", out / "table_f1.csv", out / "improvements.csv"]
        try:
            out.mkdir(parents=True, exist_ok=True)
            self.accuracy.to_csv(paths[0], lineterminator="\n")
            self.f1.to_csv(paths[1], lineterminator="\n")
            self.improvements.to_csv(paths[2], lineterminator="\n", index=False)
        except OSError as exc:
            raise IOFailure(f"Cannot write summary tables to {out}: {exc}") from exc
        return paths


def _table(metrics: pd.DataFrame, metric: str) -> pd.DataFrame:
    data = metrics[metrics["metric"] == metric]
    if data.empty:
        return pd.DataFrame()
    stats = data.groupby(["method", "source", "target"])["value"].agg(["mean", "std"]).reset_index()
    stats["std"] = stats["std"].fillna(0.0)
    stats["cell"] = [
        f"{100 * m:.1f} ± {100 * s:.1f}" for m, s in zip(stats["mean"], stats["std"], strict=True)
    ]
    stats["transfer"] = stats["source"].astype(str) + "→" + stats["target"].astype(str)
    return stats.pivot(index="method", columns="transfer", values="cell").fillna("")


def relative_improvements(metrics: pd.DataFrame, baseline: str = BASELINE) -> pd.DataFrame:
    """Mean ± std of ``(acc_method - acc_baseline) / acc_baseline`` over off-diagonal cells."""
    acc = metrics[(metrics["metric"] == "accuracy") & (metrics["source"] != metrics["target"])]
    cells = acc.groupby(["method", "source", "target"])["value"].mean().unstack("method")
    if baseline not in cells:
        return pd.DataFrame(columns=["method", "mean", "std", "cells"])
    base = cells[baseline].replace(0.0, np.nan)
    rows = []
    for method in cells.columns:
        if method == baseline:
            continue
        gains = ((cells[method] - base) / base).dropna()
        rows.append(
            {
                "method": method,
                "mean": float(gains.mean()) if len(gains) else np.nan,
                "std": float(gains.std(ddof=0)) if len(gains) else np.nan,
                "cells": int(len(gains)),
            }
        )
    return pd.DataFrame(rows, columns=["method", "mean", "std", "cells"])


def summarize_matrix(metrics: pd.DataFrame | str | Path) -> MatrixSummary:
    """Accuracy and F1 tables (rows = method, columns = source→target) plus relative gains."""
    if not isinstance(metrics, pd.DataFrame):
        path = Path(metrics)
        if not path.is_file():
            raise IOFailure(f"Metrics file not found: {path}")
        metrics = pd.read_csv(path)
    return MatrixSummary(
        accuracy=_table(metrics, "accuracy"),
        f1=_table(metrics, "f1"),
        improvements=relative_improvements(metrics),
    )
