"""Figures from persisted tables.

Plotting reads only CSV files written by the other commands, so figures
can be regenerated without any model. matplotlib and seaborn are the
optional ``plot`` extra and are imported on first use.
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import pandas as pd
import structlog

from ..exceptions import IOFailure
from .cka import CKAMatrix
from .embeddings import META_COLUMNS, project_embeddings, read_embeddings

logger = structlog.get_logger()

MATRIX_COLUMNS = {"source", "target", "method", "metric", "value"}
GRANULARITY_COLUMNS = {"level", "mode", "metric", "value"}


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        import seaborn as sns
    except ImportError as exc:
        raise ImportError(
            "Plotting requires matplotlib and seaborn. Install with: pip install hci-coda[plot]"
        ) from exc
    return plt, sns


def _save(fig, path: Path) -> Path:
    plt, _ = _pyplot()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    except OSError as exc:
        raise IOFailure(f"Cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def plot_transfer_bars(metrics: pd.DataFrame, path: str | Path, metric: str = "accuracy") -> Path:
    """Grouped bars: one group per source→target cell, one bar per method (mean ± sd over seeds)."""
    plt, sns = _pyplot()
    data = metrics[metrics["metric"] == metric].copy()
    data["transfer"] = data["source"].astype(str) + "→" + data["target"].astype(str)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * data["transfer"].nunique() + 3), 4))
    sns.barplot(data=data, x="transfer", y="value", hue="method", errorbar="sd", ax=ax)
    ax.set_xlabel("source → target")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.tick_params(axis="x", rotation=45)
    return _save(fig, Path(path))


def plot_cka_heatmap(matrix: CKAMatrix, path: str | Path) -> Path:
    plt, sns = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    sns.heatmap(matrix.to_frame(), vmin=0, vmax=1, cmap="magma", square=True, ax=ax)
    ax.invert_yaxis()
    ax.set_title(f"CKA ({matrix.token_mode} tokens)")
    return _save(fig, Path(path))


def plot_granularity(table: pd.DataFrame, path: str | Path, metric: str = "accuracy") -> Path:
    """Bars per adaptation level, split by evaluation mode."""
    plt, sns = _pyplot()
    data = table[table["metric"] == metric]
    fig, ax = plt.subplots(figsize=(5, 4))
    sns.barplot(data=data, x="level", y="value", hue="mode", errorbar="sd", ax=ax)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    return _save(fig, Path(path))


def plot_projection(projection: pd.DataFrame, path: str | Path, color_by: str = "moa") -> Path:
    plt, sns = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    sns.scatterplot(data=projection, x="x", y="y", hue=color_by, s=8, linewidth=0, ax=ax)
    ax.legend(fontsize="small", markerscale=2, bbox_to_anchor=(1.02, 1), loc="upper left")
    return _save(fig, Path(path))


def _kind(path: Path) -> str:
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# token_mode="):
        return "cka"
    columns = set(first.strip().split(","))
    if MATRIX_COLUMNS <= columns:
        return "matrix"
    if GRANULARITY_COLUMNS <= columns:
        return "granularity"
    if set(META_COLUMNS) <= columns and "e0" in columns:
        return "embeddings"
    return "unknown"


def emit_plots(
    inputs: Sequence[str | Path], out_dir: str | Path, color_by: Sequence[str] = ("moa", "batch", "source")
) -> list[Path]:
    """Render one figure per recognised input table into *out_dir*.

    Recognised inputs: matrix metrics, granularity rows, CKA matrices and
    embedding tables. Directories are searched for ``*.csv``.

    Raises:
        IOFailure: An input path does not exist or a figure cannot be written.
    """
    out = Path(out_dir)
    files: list[Path] = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            files.extend(sorted(path.rglob("*.csv")))
        elif path.is_file():
            files.append(path)
        else:
            raise IOFailure(f"Metrics file not found: {path}")

    written: list[Path] = []
    for path in files:
        kind = _kind(path)
        stem = path.stem if path.parent == Path(".") else f"{path.parent.name}_{path.stem}"
        if kind == "matrix":
            table = pd.read_csv(path)
            for metric in sorted(table["metric"].unique()):
                written.append(plot_transfer_bars(table, out / f"{stem}_{metric}.png", metric))
        elif kind == "granularity":
            written.append(plot_granularity(pd.read_csv(path), out / f"{stem}.png"))
        elif kind == "cka":
            written.append(plot_cka_heatmap(CKAMatrix.load(path), out / f"{stem}.png"))
        elif kind == "embeddings":
            projection = project_embeddings(read_embeddings(path))
            for column in color_by:
                written.append(plot_projection(projection, out / f"{stem}_{column}.png", column))
        else:
            logger.debug("skipping unrecognised table", path=str(path))
    logger.info("plots written", count=len(written), out_dir=str(out))
    return written
