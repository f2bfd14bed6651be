"""Metrics, representation similarity, embeddings and figures."""

from .cka import CKAMatrix, DegenerateInput, LayerCountMismatch, layerwise_cka, linear_cka
from .embeddings import PCAProjector, Projector, export_embeddings, project_embeddings
from .metrics import (
    IndexOutOfRange,
    LengthMismatch,
    MetricsReport,
    aggregate_by_well,
    score,
    score_logits,
)
from .plots import emit_plots
from .summary import MatrixSummary, summarize_matrix

__all__ = [
    "CKAMatrix",
    "DegenerateInput",
    "IndexOutOfRange",
    "LayerCountMismatch",
    "LengthMismatch",
    "MatrixSummary",
    "MetricsReport",
    "PCAProjector",
    "Projector",
    "aggregate_by_well",
    "emit_plots",
    "export_embeddings",
    "layerwise_cka",
    "linear_cka",
    "project_embeddings",
    "score",
    "score_logits",
    "summarize_matrix",
]
