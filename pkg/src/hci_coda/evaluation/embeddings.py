"""Embedding export and 2-D projection.

``embeddings.csv`` columns: ``id, source, batch, plate, well, site,
treatment, moa`` followed by ``e0 .. e{d-1}``. Rows are sorted by id.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Protocol, runtime_checkable

import numpy as np
import pandas as pd
import structlog
import torch
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score
from torch import nn

from ..dataset import DatasetIndex
from ..exceptions import IOFailure
from ..models import FeatureExtractor
from ..training.data import ImageStore

logger = structlog.get_logger()

Pooling = Literal["cls", "mean-token"]
META_COLUMNS = ("id", "source", "batch", "plate", "well", "site", "treatment", "moa")


@runtime_checkable
class Projector(Protocol):
    """Anything with scikit-learn's ``fit_transform`` returning ``(n, 2)``."""

    def fit_transform(self, x: np.ndarray) -> np.ndarray: ...


class PCAProjector:
    """Default projector: PCA to two components."""

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed

    def fit_transform(self, x: np.ndarray) -> np.ndarray:
        return PCA(n_components=2, random_state=self.seed).fit_transform(x)


@torch.no_grad()
def compute_embeddings(
    model: nn.Module,
    index: DatasetIndex,
    which: Pooling = "cls",
    *,
    store: ImageStore | None = None,
    batch_size: int = 64,
) -> pd.DataFrame:
    """Embedding table of *index* (sorted by record id)."""
    fe = model if isinstance(model, FeatureExtractor) else model.feature_extractor
    if which not in ("cls", "mean-token"):
        raise ValueError(f"Invalid pooling '{which}'. Must be one of: cls, mean-token")
    records = sorted(index.records, key=lambda r: r.id)
    store = store or ImageStore((fe.image_size, fe.image_size))
    was_training = fe.training
    fe.eval()
    chunks = []
    for i in range(0, len(records), batch_size):
        tokens = fe(store.stack(records[i : i + batch_size]))
        pooled = tokens[:, 0] if which == "cls" else tokens[:, 1:].mean(dim=1)
        chunks.append(pooled.double().numpy())
    fe.train(was_training)
    values = np.concatenate(chunks) if chunks else np.zeros((0, fe.embed_dim))
    meta = pd.DataFrame(
        [
            (r.id, r.source, r.batch, r.plate, r.well, r.site, r.treatment, r.moa or "")
            for r in records
        ],
        columns=list(META_COLUMNS),
    )
    coords = pd.DataFrame(values, columns=[f"e{j}" for j in range(values.shape[1])])
    return pd.concat([meta, coords], axis=1)


def export_embeddings(
    model: nn.Module,
    index: DatasetIndex,
    path: str | Path,
    which: Pooling = "cls",
    *,
    store: ImageStore | None = None,
) -> Path:
    """Write :func:`compute_embeddings` to *path* as CSV.

    Raises:
        IOFailure: *path* cannot be written.
    """
    table = compute_embeddings(model, index, which, store=store)
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(target, index=False, lineterminator="\n", float_format="%.8g")
    except OSError as exc:
        raise IOFailure(f"Cannot write embeddings {target}: {exc}") from exc
    logger.info("embeddings exported", path=str(target), rows=len(table), pooling=which)
    return target


def read_embeddings(path: str | Path) -> pd.DataFrame:
    source = Path(path)
    if not source.is_file():
        raise IOFailure(f"Embeddings file not found: {source}")
    return pd.read_csv(source, dtype={c: str for c in META_COLUMNS if c != "site"}, keep_default_na=False)


def embedding_matrix(table: pd.DataFrame) -> np.ndarray:
    return table[[c for c in table.columns if c not in META_COLUMNS]].to_numpy(dtype=np.float64)


def project_embeddings(
    embeddings: str | Path | pd.DataFrame, projector: Projector | None = None
) -> pd.DataFrame:
    """Metadata columns plus ``x``/``y`` from *projector* (PCA by default)."""
    table = embeddings if isinstance(embeddings, pd.DataFrame) else read_embeddings(embeddings)
    coords = (projector or PCAProjector()).fit_transform(embedding_matrix(table))
    out = table[list(META_COLUMNS)].copy()
    out["x"] = coords[:, 0]
    out["y"] = coords[:, 1]
    return out


def silhouette_by(table: pd.DataFrame, column: str, seed: int = 0) -> float:
    """Silhouette score of the embeddings grouped by a metadata column."""
    labels = table[column].to_numpy()
    return float(silhouette_score(embedding_matrix(table), labels, random_state=seed))
