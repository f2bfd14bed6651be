"""Tests for figure emission from persisted tables."""

import numpy as np
import pandas as pd
import pytest

from hci_coda.evaluation.cka import CKAMatrix
from hci_coda.evaluation.plots import emit_plots
from hci_coda.exceptions import IOFailure

pytest.importorskip("matplotlib")
pytest.importorskip("seaborn")


@pytest.fixture
def tables(tmp_path):
    root = tmp_path / "tables"
    root.mkdir()
    pd.DataFrame(
        [
            ("S1", "S2", "coda", 0, "accuracy", 0.7),
            ("S1", "S2", "coda", 0, "f1", 0.6),
            ("S1", "S2", "supervised", 0, "accuracy", 0.5),
            ("S1", "S2", "supervised", 0, "f1", 0.4),
        ],
        columns=["source", "target", "method", "seed", "metric", "value"],
    ).to_csv(root / "metrics.csv", index=False)
    pd.DataFrame(
        [("none", "full", "all", "accuracy", 0.5), ("batch", "subset", "all", "accuracy", 0.7)],
        columns=["level", "mode", "scope_id", "metric", "value"],
    ).to_csv(root / "granularity.csv", index=False)
    CKAMatrix(np.eye(2), "cls").save(root / "cka.csv")
    pd.DataFrame({"a": [1, 2]}).to_csv(root / "other.csv", index=False)
    return root


def test_one_figure_per_table(tmp_path, tables):
    written = emit_plots([tables], tmp_path / "figures")
    assert sorted(p.name for p in written) == [
        "tables_cka.png",
        "tables_granularity.png",
        "tables_metrics_accuracy.png",
        "tables_metrics_f1.png",
    ]
    assert all(p.stat().st_size > 0 for p in written)


def test_embedding_projection_per_color(tmp_path):
    rng = np.random.default_rng(0)
    table = pd.DataFrame(
        {
            "id": [f"r{i}" for i in range(12)],
            "source": ["S1"] * 6 + ["S2"] * 6,
            "batch": ["B1", "B2"] * 6,
            "plate": "P1",
            "well": "W000",
            "site": 0,
            "treatment": "T000",
            "moa": ["m0", "m1", "m2"] * 4,
        }
    )
    for j in range(4):
        table[f"e{j}"] = rng.normal(size=12)
    path = tmp_path / "embeddings.csv"
    table.to_csv(path, index=False)
    written = emit_plots([path], tmp_path / "figures", color_by=("moa", "batch"))
    assert [p.name for p in written] == [f"{tmp_path.name}_embeddings_moa.png", f"{tmp_path.name}_embeddings_batch.png"]


def test_missing_input(tmp_path):
    with pytest.raises(IOFailure, match="Metrics file not found"):
        emit_plots([tmp_path / "none.csv"], tmp_path / "figures")
