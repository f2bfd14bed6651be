"""Linear centered kernel alignment between feature matrices and across layers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import torch
from torch import nn

from ..exceptions import CodaError, IOFailure
from ..models import FeatureExtractor

TokenMode = Literal["all", "cls"]


class CKAError(CodaError, ValueError):
    """Base class for CKA errors."""


class DegenerateInput(CKAError):
    """Raised when a feature matrix is all zero after centering."""


class LayerCountMismatch(CKAError):
    """Raised when the two compared models have different depths."""


@dataclass(frozen=True)
class CKAMatrix:
    """Grid of CKA values; row i is layer i of ``model_a``, column j layer j of ``model_b``."""

    values: np.ndarray
    token_mode: TokenMode
    model_a: str = "a"
    model_b: str = "b"

    @property
    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.values)))

    def to_frame(self) -> pd.DataFrame:
        depth_a, depth_b = self.values.shape
        return pd.DataFrame(
            self.values,
            index=pd.Index(range(1, depth_a + 1), name=f"{self.model_a} layer"),
            columns=pd.Index(range(1, depth_b + 1), name=f"{self.model_b} layer"),
        )

    def save(self, path: str | Path) -> Path:
        """CSV with a ``#``-prefixed header line naming models and token mode."""
        target = Path(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with target.open("w", encoding="utf-8", newline="\n") as fh:
                fh.write(f"# token_mode={self.token_mode} model_a={self.model_a} model_b={self.model_b}\n")
                self.to_frame().to_csv(fh, lineterminator="\n")
        except OSError as exc:
            raise IOFailure(f"Cannot write CKA matrix {target}: {exc}") from exc
        return target

    @classmethod
    def load(cls, path: str | Path) -> CKAMatrix:
        source = Path(path)
        if not source.is_file():
            raise IOFailure(f"CKA matrix not found: {source}")
        with source.open(encoding="utf-8") as fh:
            meta = dict(item.split("=", 1) for item in fh.readline().lstrip("# ").split())
            frame = pd.read_csv(fh, index_col=0)
        return cls(frame.to_numpy(dtype=np.float64), meta["token_mode"], meta["model_a"], meta["model_b"])  # ty: ignore[invalid-argument-type]


def linear_cka(x: np.ndarray | torch.Tensor, y: np.ndarray | torch.Tensor) -> float:
    """``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` with column-centred X, Y.

    Raises:
        DegenerateInput: Row counts differ, fewer than two rows, or a
            matrix is zero after centering.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DegenerateInput(f"need two (n, d) matrices with equal n, got {a.shape} and {b.shape}")
    if a.shape[0] < 2:
        raise DegenerateInput("need at least two samples")
    a = a - a.mean(axis=0, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    if not np.any(a) or not np.any(b):
        raise DegenerateInput("feature matrix is all zero after centering")
    cross = np.linalg.norm(b.T @ a, ord="fro") ** 2
    norm_a = np.linalg.norm(a.T @ a, ord="fro")
    norm_b = np.linalg.norm(b.T @ b, ord="fro")
    return float(cross / (norm_a * norm_b))


def _extractor(model: nn.Module) -> FeatureExtractor:
    if isinstance(model, FeatureExtractor):
        return model
    fe = getattr(model, "feature_extractor", None)
    if not isinstance(fe, FeatureExtractor):
        raise TypeError(f"{type(model).__name__} has no feature extractor")
    return fe


@torch.no_grad()
def layer_features(
    model: nn.Module, images: torch.Tensor, token_mode: TokenMode = "all", batch_size: int = 64
) -> list[np.ndarray]:
    """Per-layer feature matrices of *images*.

    ``all`` flattens tokens into rows (each token of each image is one row);
    ``cls`` keeps one CLS row per image.
    """
    fe = _extractor(model)
    was_training = fe.training
    fe.eval()
    per_layer: list[list[torch.Tensor]] = [[] for _ in range(fe.depth)]
    for i in range(0, len(images), batch_size):
        for layer, out in enumerate(fe.forward_layers(images[i : i + batch_size])):
            rows = out[:, 0] if token_mode == "cls" else out.reshape(-1, out.shape[-1])
            per_layer[layer].append(rows)
    fe.train(was_training)
    return [torch.cat(chunks).double().numpy() for chunks in per_layer]


def layerwise_cka(
    model_a: nn.Module,
    model_b: nn.Module,
    images: torch.Tensor,
    token_mode: TokenMode = "all",
    *,
    names: tuple[str, str] = ("a", "b"),
) -> CKAMatrix:
    """CKA between every layer of *model_a* and every layer of *model_b* on the same probes.

    Raises:
        LayerCountMismatch: The feature extractors differ in depth.
        DegenerateInput: The probe set is empty.
    """
    depth_a = _extractor(model_a).depth
    depth_b = _extractor(model_b).depth
    if depth_a != depth_b:
        raise LayerCountMismatch(f"model depths differ: {depth_a} vs {depth_b}")
    if len(images) == 0:
        raise DegenerateInput("probe set is empty")
    feats_a = layer_features(model_a, images, token_mode)
    feats_b = feats_a if model_b is model_a else layer_features(model_b, images, token_mode)
    values = np.array([[linear_cka(fa, fb) for fb in feats_b] for fa in feats_a])
    return CKAMatrix(values, token_mode, *names)
