"""Transfer grid (every method, every source→target cell) and the granularity ablation.

Grid output directory::

    <out>/metrics.csv     # source, target, method, seed, metric, value
    <out>/failures.csv    # cells that raised, with the error text
    <out>/record.json     # status
    <out>/runs/seed<k>/<source>/   # one RunRecord per (seed, source)
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
import structlog

from ..dataset import DatasetIndex, ImageRecord, holdout_split, split_by_scope
from ..evaluation.metrics import Aggregation, MetricsReport, score_logits
from ..exceptions import CodaError
from ..models import ModelConfig
from ..utils.logging import log_to_file
from ..views import ViewConfig
from .data import ImageStore
from .phases import (
    HeadResult,
    PretrainResult,
    predict,
    predict_adapted,
    run_adapt,
    run_head,
    run_pretrain,
    run_supervised,
    run_ttt,
)
from .plan import AdaptScope, Objective, ScopeLevel, TrainPlan
from .records import RunRecord, read_status, write_status

logger = structlog.get_logger()

Method = Literal["supervised", "dual_dino", "dual_cb", "dual_mae", "oda", "coda", "ttt"]
METHODS: tuple[Method, ...] = ("supervised", "dual_dino", "dual_cb", "dual_mae", "oda", "coda", "ttt")
METHOD_OBJECTIVE: dict[str, Objective | None] = {
    "supervised": None,
    "dual_dino": "dino",
    "dual_cb": "dino_cb",
    "dual_mae": "mae",
    "oda": "dino",
    "coda": "dino_cb",
    "ttt": "mae",
}
# Methods that touch the target; they have no in-domain cell.
ADAPTIVE = frozenset({"oda", "coda", "ttt"})
GRID_COLUMNS = ("source", "target", "method", "seed", "metric", "value")
GRANULARITY_COLUMNS = ("level", "mode", "scope_id", "metric", "value")

EvalMode = Literal["subset", "full"]


@dataclass(frozen=True)
class MatrixCell:
    source: str
    target: str
    method: str
    seed: int
    report: MetricsReport | None = None
    error: str | None = None

    @property
    def diagonal(self) -> bool:
        return self.source == self.target


@dataclass
class MatrixResult:
    cells: list[MatrixCell]
    metrics: pd.DataFrame

    @property
    def failures(self) -> list[MatrixCell]:
        return [c for c in self.cells if c.error is not None]


def _source(index: DatasetIndex, source: str) -> DatasetIndex:
    return split_by_scope(index, "source", [source])[0]


class _SourceRun:
    """Lazily trained models of one (seed, source); a failed build is cached as its error."""

    def __init__(
        self,
        train: DatasetIndex,
        val: DatasetIndex,
        plan: TrainPlan,
        model_config: ModelConfig,
        view_config: ViewConfig,
        store: ImageStore,
        record: RunRecord | None,
    ) -> None:
        self.train = train
        self.val = val
        self.plan = plan
        self.model_config = model_config
        self.view_config = view_config
        self.store = store
        self.record = record
        self._pretrained: dict[str, PretrainResult | Exception] = {}
        self._heads: dict[str, HeadResult | Exception] = {}
        self._supervised: HeadResult | Exception | None = None

    def pretrained(self, objective: Objective) -> PretrainResult:
        if objective not in self._pretrained:
            try:
                self._pretrained[objective] = run_pretrain(
                    self.train,
                    self.plan,
                    self.model_config,
                    self.view_config,
                    objective=objective,
                    store=self.store,
                    tag=f"pretrain-{objective}",
                )
            except CodaError as exc:
                self._pretrained[objective] = exc
        value = self._pretrained[objective]
        if isinstance(value, Exception):
            raise value
        return value

    def dual(self, objective: Objective) -> HeadResult:
        if objective not in self._heads:
            try:
                pre = self.pretrained(objective)
                self._heads[objective] = run_head(
                    pre.feature_extractor,
                    self.train,
                    self.val,
                    self.plan,
                    self.model_config,
                    store=self.store,
                    record=self.record,
                    tag=f"head-{objective}",
                )
            except CodaError as exc:
                self._heads[objective] = exc
        value = self._heads[objective]
        if isinstance(value, Exception):
            raise value
        return value

    def supervised(self) -> HeadResult:
        if self._supervised is None:
            try:
                self._supervised = run_supervised(
                    self.train, self.val, self.plan, self.model_config, store=self.store, record=self.record
                )
            except CodaError as exc:
                self._supervised = exc
        if isinstance(self._supervised, Exception):
            raise self._supervised
        return self._supervised


def _method_logits(
    method: str,
    run: _SourceRun,
    target: DatasetIndex,
) -> tuple[np.ndarray, Sequence[ImageRecord]]:
    objective = METHOD_OBJECTIVE[method]
    if method == "supervised":
        return predict(run.supervised().model, target, store=run.store)
    assert objective is not None
    head = run.dual(objective)
    if method in ("dual_dino", "dual_cb", "dual_mae"):
        return predict(head.model, target, store=run.store)
    pre = run.pretrained(objective)
    if method == "ttt":
        assert pre.mae_head is not None
        result = run_ttt(head.model, pre.mae_head, target, run.plan, store=run.store)  # ty: ignore[invalid-argument-type]
        return result.logits, result.records
    adapted = run_adapt(
        head.model,  # ty: ignore[invalid-argument-type]
        target,
        run.plan,
        run.model_config,
        run.view_config,
        scope=AdaptScope(run.plan.scope),
        objective=objective,
        projection_head=pre.projection_head,
        store=run.store,
        tag=f"adapt-{method}",
    )
    return predict_adapted(adapted, target, store=run.store)


def _run_unit(
    index: DatasetIndex,
    source: str,
    sources: Sequence[str],
    methods: Sequence[str],
    plan: TrainPlan,
    model_config: ModelConfig,
    view_config: ViewConfig,
    aggregation: Aggregation,
    run_dir: Path | None,
) -> list[MatrixCell]:
    """All cells trained on one source for one seed."""
    seed = plan.seed
    src = _source(index, source)
    train, val, test = holdout_split(src, plan.val_fraction, plan.test_fraction, seed)
    store = ImageStore((model_config.image_size, model_config.image_size))
    record = RunRecord.create(run_dir, {"source": source, "seed": seed}) if run_dir else None
    run = _SourceRun(train, val, plan, model_config, view_config, store, record)
    k = index.class_count

    cells: list[MatrixCell] = []
    for method in methods:
        targets = [t for t in sources if t != source]
        if method not in ADAPTIVE:
            targets = [source, *targets]
        for target in targets:
            eval_index = test if target == source else _source(index, target)
            try:
                logits, records = _method_logits(method, run, eval_index)
                report = score_logits(logits, records, k, aggregation=aggregation)
                cells.append(MatrixCell(source, target, method, seed, report))
                logger.info(
                    "cell scored",
                    source=source,
                    target=target,
                    method=method,
                    seed=seed,
                    accuracy=round(report.accuracy, 4),
                    f1=round(report.macro_f1, 4),
                )
            except (CodaError, RuntimeError, ValueError) as exc:
                logger.error(
                    "cell failed", source=source, target=target, method=method, seed=seed, error=str(exc)
                )
                cells.append(MatrixCell(source, target, method, seed, error=f"{type(exc).__name__}: {exc}"))
    if record is not None:
        record.complete(cells=len(cells))
    return cells


def _run_unit_remote(payload: dict) -> list[MatrixCell]:
    """Process-pool entry point: rebuilds the index from plain records."""
    index = DatasetIndex.from_records(
        payload.pop("records"),
        payload.pop("class_names"),
        payload.pop("treatment_to_label"),
        payload.pop("channel_count"),
    )
    run_dir = payload["run_dir"]
    if run_dir is None:
        return _run_unit(index, **payload)
    with log_to_file(Path(run_dir) / "log.txt"):
        return _run_unit(index, **payload)


def cells_to_frame(cells: Sequence[MatrixCell]) -> pd.DataFrame:
    rows = [
        {
            "source": c.source,
            "target": c.target,
            "method": c.method,
            "seed": c.seed,
            "metric": metric,
            "value": value,
        }
        for c in cells
        if c.report is not None
        for metric, value in c.report.as_dict().items()
    ]
    frame = pd.DataFrame(rows, columns=list(GRID_COLUMNS))
    return frame.sort_values(["source", "target", "method", "seed", "metric"], ignore_index=True)


def run_matrix(
    index: DatasetIndex,
    plan: TrainPlan,
    model_config: ModelConfig,
    view_config: ViewConfig,
    *,
    sources: Sequence[str] | None = None,
    methods: Sequence[str] = METHODS,
    seeds: Sequence[int] | None = None,
    aggregation: Aggregation = "image",
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> MatrixResult:
    """Train on every source and score every method on every other source.

    In-domain cells are scored on the source's held-out test split and only
    for methods that do not adapt. A failing cell is recorded and the grid
    continues.

    Args:
        workers: Run (seed, source) units in this many worker processes,
            each with its own run directory.
    """
    sources = list(sources or index.ids_at("source"))
    seeds = list(seeds if seeds is not None else [plan.seed])
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise ValueError(f"Invalid method '{unknown[0]}'. Must be one of: {', '.join(METHODS)}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and read_status(out).get("status") == "complete":
        logger.info("matrix already complete, skipping", out_dir=str(out))
        metrics = pd.read_csv(out / "metrics.csv")
        return MatrixResult([], metrics)

    units = []
    for seed in seeds:
        for source in sources:
            run_dir = out / "runs" / f"seed{seed}" / source if out is not None else None
            units.append(
                {
                    "source": source,
                    "sources": sources,
                    "methods": list(methods),
                    "plan": dataclasses.replace(plan, seed=seed),
                    "model_config": model_config,
                    "view_config": view_config,
                    "aggregation": aggregation,
                    "run_dir": run_dir,
                }
            )

    cells: list[MatrixCell] = []
    if workers > 1:
        shared = {
            "records": index.records,
            "class_names": index.class_names,
            "treatment_to_label": dict(index.treatment_to_label),
            "channel_count": index.channel_count,
        }
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for unit_cells in pool.map(_run_unit_remote, [{**shared, **u} for u in units]):
                cells.extend(unit_cells)
    else:
        for unit in units:
            cells.extend(_run_unit(index, **unit))

    metrics = cells_to_frame(cells)
    result = MatrixResult(cells, metrics)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(out / "metrics.csv", index=False, lineterminator="\n")
        failures = pd.DataFrame(
            [
                {"source": c.source, "target": c.target, "method": c.method, "seed": c.seed, "error": c.error}
                for c in result.failures
            ],
            columns=["source", "target", "method", "seed", "error"],
        )
        failures.to_csv(out / "failures.csv", index=False, lineterminator="\n")
        write_status(out, "complete", cells=len(cells), failures=len(result.failures), seeds=seeds)
    logger.info("matrix done", cells=len(cells), failures=len(result.failures))
    return result


# ---------------------------------------------------------------------------
# Granularity ablation
# ---------------------------------------------------------------------------


def run_granularity(
    dual,
    target: DatasetIndex,
    plan: TrainPlan,
    model_config: ModelConfig,
    view_config: ViewConfig,
    *,
    levels: Sequence[ScopeLevel] = ("source", "batch", "plate"),
    modes: Sequence[EvalMode] = ("subset", "full"),
    objective: Objective = "dino",
    projection_head=None,
    store: ImageStore | None = None,
) -> pd.DataFrame:
    """Adapt at each scope level and score the adapted models.

    ``subset``: every record is scored by the model adapted on its own
    scope id (one row, ``scope_id="all"``). ``full``: every scope model is
    scored on the whole target (one row per scope id). A ``none`` level row
    holds the unadapted model.
    """
    store = store or ImageStore((model_config.image_size, model_config.image_size))
    k = len(target.class_names)
    rows: list[dict] = []

    def add(level: str, mode: str, scope_id: str, report: MetricsReport) -> None:
        for metric, value in report.as_dict().items():
            rows.append({"level": level, "mode": mode, "scope_id": scope_id, "metric": metric, "value": value})

    logits, records = predict(dual, target, store=store)
    add("none", "full", "all", score_logits(logits, records, k))

    for level in levels:
        adapted = run_adapt(
            dual,
            target,
            plan,
            model_config,
            view_config,
            scope=AdaptScope(level),
            objective=objective,
            projection_head=projection_head,
            store=store,
            tag=f"granularity-{level}",
        )
        if "subset" in modes:
            logits, records = predict_adapted(adapted, target, store=store)
            add(level, "subset", "all", score_logits(logits, records, k))
        if "full" in modes:
            for sid, model in adapted.models.items():
                logits, records = predict(model, target, store=store)
                add(level, "full", sid, score_logits(logits, records, k))
        logger.info("granularity level done", level=level, models=len(adapted.models))
    return pd.DataFrame(rows, columns=list(GRANULARITY_COLUMNS))
