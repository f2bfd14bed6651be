"""Command-line interface for hci-coda.

Usage:
    hci-coda generate    [--config PATH] [--set KEY=VALUE ...] [--seed N] [--out DIR]
    hci-coda train       [OPTIONS]
    hci-coda adapt       [OPTIONS]
    hci-coda eval        [OPTIONS]
    hci-coda matrix      [OPTIONS] [--workers N]
    hci-coda granularity [OPTIONS]
    hci-coda summarize   [OPTIONS] [METRICS_CSV]
    hci-coda plot        [OPTIONS] [INPUT ...]

Run directories under ``output_dir``::

    train/<method>/seed<k>/<source>/
    adapt/<method>/seed<k>/<source>-<target>/
    eval/<method>/seed<k>/<source>-<target>/
    matrix/
    granularity/

A command whose run directory is already complete does nothing.
Exit codes: 0 ok, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pandas as pd
import structlog

from . import __version__
from .config import (
    ConfigValidationError,
    ExperimentConfig,
    check_pair_eligibility,
    config_to_dict,
    load_config,
)
from .dataset import DatasetIndex, ImageRecord, ManifestSchema, holdout_split, load_manifest, split_by_scope
from .evaluation.cka import layerwise_cka
from .evaluation.embeddings import compute_embeddings
from .evaluation.metrics import score_logits
from .evaluation.plots import emit_plots
from .evaluation.summary import summarize_matrix
from .exceptions import CodaError, IOFailure
from .models import MissingCheckpoint
from .synthetic import generate_dataset
from .training.data import ImageStore
from .training.matrix import ADAPTIVE, METHOD_OBJECTIVE, run_granularity, run_matrix
from .training.phases import (
    AdaptResult,
    PairIneligible,
    predict,
    predict_adapted,
    restore_dual,
    restore_pretrain,
    restore_supervised,
    run_adapt,
    run_head,
    run_pretrain,
    run_supervised,
    run_ttt,
)
from .training.plan import AdaptScope
from .training.records import RunRecord, read_status, write_status
from .utils.logging import log_to_file, setup_logging

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _store(config: ExperimentConfig) -> ImageStore:
    return ImageStore((config.model.image_size, config.model.image_size))


def _load_index(config: ExperimentConfig) -> DatasetIndex:
    """Load the manifest, generating the synthetic dataset first when it is missing."""
    manifest = config.dataset.manifest_path(config.output_dir)
    if not manifest.is_file() and config.dataset.manifest is None and config.dataset.generator is not None:
        logger.info("manifest missing, generating synthetic dataset", path=str(manifest))
        generate_dataset(config.dataset.generator, manifest.parent)
    return load_manifest(manifest, ManifestSchema(channel_count=config.model.channels))


def _resolve_transfer(config: ExperimentConfig, index: DatasetIndex) -> ExperimentConfig:
    """Fill in ``dataset.source`` / ``dataset.target`` and check they exist."""
    sources = index.ids_at("source")
    source = config.dataset.source or sources[0]
    target = config.dataset.target or next((s for s in sources if s != source), source)
    for name, value in (("source", source), ("target", target)):
        if value not in sources:
            raise ConfigValidationError(
                f"dataset.{name}", f"Invalid source '{value}'. Must be one of: {', '.join(sources)}"
            )
    dataset = dataclasses.replace(config.dataset, source=source, target=target)
    return dataclasses.replace(config, dataset=dataset)


def _prepare(config: ExperimentConfig) -> tuple[ExperimentConfig, DatasetIndex]:
    index = _load_index(config)
    config = _resolve_transfer(config, index)
    needed = [str(config.dataset.source)]
    if config.method == "coda":
        needed.append(str(config.dataset.target))
    check_pair_eligibility(index, config.method, needed)
    return config, index


def _source_index(index: DatasetIndex, source: str) -> DatasetIndex:
    return split_by_scope(index, "source", [source])[0]


def _run_dir(config: ExperimentConfig, stage: str) -> Path:
    base = Path(config.output_dir) / stage / config.method / f"seed{config.seed}"
    if stage == "train":
        return base / str(config.dataset.source)
    return base / f"{config.dataset.source}-{config.dataset.target}"


def _completed(root: Path, command: str) -> RunRecord:
    if not RunRecord.is_complete(root):
        raise MissingCheckpoint(f"No completed run at {root}; run 'hci-coda {command}' first")
    return RunRecord.load(root)


def _checkpoint(record: RunRecord, name: str) -> Path:
    relative = record.checkpoints.get(name)
    if relative is None:
        raise MissingCheckpoint(f"Run {record.root} has no '{name}' checkpoint")
    path = record.root / relative
    if not path.is_file():
        raise MissingCheckpoint(f"Checkpoint not found: {path}")
    return path


def _skip(root: Path, command: str) -> bool:
    if RunRecord.is_complete(root):
        logger.info("run already complete, nothing to do", command=command, run=str(root))
        return True
    return False


def _run(record: RunRecord, body: Callable[[], dict]) -> None:
    """Run *body* with logs teed into the run, completing or failing the record."""
    with log_to_file(record.log_path):
        try:
            extra = body()
        except BaseException as exc:
            record.fail(exc)
            raise
        record.complete(**extra)


def _write_logits(path: Path, logits: np.ndarray, records: tuple[ImageRecord, ...]) -> Path:
    frame = pd.DataFrame(logits, columns=[f"l{j}" for j in range(logits.shape[1])])
    frame.insert(0, "id", [r.id for r in records])
    try:
        frame.to_csv(path, index=False, lineterminator="\n", float_format="%.8g")
    except OSError as exc:
        raise IOFailure(f"Cannot write logits {path}: {exc}") from exc
    return path


def _read_logits(path: Path, index: DatasetIndex) -> tuple[np.ndarray, tuple[ImageRecord, ...]]:
    if not path.is_file():
        raise MissingCheckpoint(f"Logits not found: {path}")
    frame = pd.read_csv(path, dtype={"id": str}).set_index("id")
    records = tuple(r for r in index.records if r.id in frame.index)
    return frame.loc[[r.id for r in records]].to_numpy(dtype=np.float32), records


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig, args: argparse.Namespace) -> None:
    if config.dataset.generator is None:
        raise ConfigValidationError("dataset.generator", "required for 'generate'")
    out = config.dataset.data_dir(config.output_dir)
    result = generate_dataset(config.dataset.generator, out)
    print(result.manifest)


def _train(config: ExperimentConfig, index: DatasetIndex) -> RunRecord:
    root = _run_dir(config, "train")
    if _skip(root, "train"):
        return RunRecord.load(root)
    source = str(config.dataset.source)
    train, val, test = holdout_split(
        _source_index(index, source), config.plan.val_fraction, config.plan.test_fraction, config.seed
    )
    store = _store(config)
    record = RunRecord.create(root, config_to_dict(config))

    def body() -> dict:
        if config.method == "supervised":
            model = run_supervised(train, val, config.plan, config.model, store=store, record=record).model
        else:
            pre = run_pretrain(train, config.plan, config.model, config.views, store=store, record=record)
            model = run_head(
                pre.feature_extractor, train, val, config.plan, config.model, store=store, record=record
            ).model
        if len(test):
            logits, records = predict(model, test, store=store)
            report = score_logits(logits, records, index.class_count, aggregation=config.eval.aggregation)
            record.log("eval", 0, "test", **report.as_dict())
            return {"test": report.as_dict()}
        return {}

    _run(record, body)
    return record


def cmd_train(config: ExperimentConfig, args: argparse.Namespace) -> None:
    config, index = _prepare(config)
    _train(config, index)


def cmd_adapt(config: ExperimentConfig, args: argparse.Namespace) -> None:
    config, index = _prepare(config)
    if config.method not in ADAPTIVE:
        logger.warning("method does not adapt, nothing to do", method=config.method)
        return
    if config.dataset.target == config.dataset.source:
        raise ConfigValidationError("dataset.target", "must differ from dataset.source for adaptation")
    trained = _completed(_run_dir(config, "train"), "train")
    root = _run_dir(config, "adapt")
    if _skip(root, "adapt"):
        return
    pre, _ = restore_pretrain(_checkpoint(trained, "pretrain"), config.plan)
    dual, _, _ = restore_dual(_checkpoint(trained, "head"))
    target = _source_index(index, str(config.dataset.target))
    store = _store(config)
    record = RunRecord.create(root, config_to_dict(config))

    def body() -> dict:
        if config.method == "ttt":
            if pre.mae_head is None:
                raise MissingCheckpoint(f"Pretrain checkpoint of {trained.root} has no MAE decoder")
            result = run_ttt(dual, pre.mae_head, target, config.plan, store=store)
            _write_logits(record.root / "logits.csv", result.logits, result.records)
            return {"ttt_steps": result.steps, "images": len(result.records)}
        adapted = run_adapt(
            dual,
            target,
            config.plan,
            config.model,
            config.views,
            scope=AdaptScope(config.plan.scope),
            projection_head=pre.projection_head,
            store=store,
            record=record,
        )
        return {
            "scope": adapted.scope.level,
            "scope_ids": list(adapted.scope.ids),
            "objectives": adapted.objectives,
            "iterations": adapted.iterations,
        }

    _run(record, body)


def _restore_adapted(record: RunRecord) -> AdaptResult:
    models = {}
    level = str(record.extra.get("scope", "source"))
    for name in record.checkpoints:
        tag, _, rest = name.partition(":")
        if tag != "adapt":
            continue
        ckpt_level, _, sid = rest.partition(":")
        level = ckpt_level
        models[sid] = restore_dual(_checkpoint(record, name))[0]
    if not models:
        raise MissingCheckpoint(f"Run {record.root} has no adapted checkpoints")
    return AdaptResult(models, AdaptScope(level, tuple(sorted(models))))  # ty: ignore[invalid-argument-type]


def _scoped_embeddings(adapted: AdaptResult, index: DatasetIndex, config: ExperimentConfig, store: ImageStore) -> pd.DataFrame:
    parts = []
    for sid, model in adapted.models.items():
        part, _ = split_by_scope(index, adapted.scope.level, [sid])
        parts.append(compute_embeddings(model, part, config.eval.pooling, store=store))
    return pd.concat(parts).sort_values("id", ignore_index=True)


def _write_table(frame: pd.DataFrame, path: Path, **kwargs) -> None:
    try:
        frame.to_csv(path, lineterminator="\n", float_format="%.8g", **kwargs)
    except OSError as exc:
        raise IOFailure(f"Cannot write {path}: {exc}") from exc


def _write_json(data: dict, path: Path) -> None:
    try:
        path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"Cannot write {path}: {exc}") from exc


def cmd_eval(config: ExperimentConfig, args: argparse.Namespace) -> None:
    config, index = _prepare(config)
    source, target = str(config.dataset.source), str(config.dataset.target)
    adaptive = config.method in ADAPTIVE
    if adaptive and source == target:
        raise ConfigValidationError("dataset.target", f"method '{config.method}' is only scored off-source")
    trained = _completed(_run_dir(config, "train"), "train")
    root = _run_dir(config, "eval")
    if _skip(root, "eval"):
        return
    store = _store(config)
    if config.method == "supervised":
        base = restore_supervised(_checkpoint(trained, "supervised"))[0]
    else:
        base = restore_dual(_checkpoint(trained, "head"))[0]
    if source == target:
        eval_index = holdout_split(
            _source_index(index, source), config.plan.val_fraction, config.plan.test_fraction, config.seed
        )[2]
    else:
        eval_index = _source_index(index, target)
    record = RunRecord.create(root, config_to_dict(config))

    def body() -> dict:
        adapted = None
        if config.method == "ttt":
            logits, records = _read_logits(_completed(_run_dir(config, "adapt"), "adapt").root / "logits.csv", eval_index)
        elif adaptive:
            adapted = _restore_adapted(_completed(_run_dir(config, "adapt"), "adapt"))
            logits, records = predict_adapted(adapted, eval_index, store=store)
        else:
            logits, records = predict(base, eval_index, store=store)
        report = score_logits(logits, records, index.class_count, aggregation=config.eval.aggregation)
        summary = {
            "method": config.method,
            "source": source,
            "target": target,
            "seed": config.seed,
            "accuracy": report.accuracy,
            "macro_f1": report.macro_f1,
            "n_samples": report.n_samples,
            "aggregation": report.aggregation,
            "unsupported": list(report.unsupported),
        }
        _write_json(summary, root / "report.json")
        _write_table(report.per_class(), root / "per_class.csv", index=False)
        _write_table(pd.DataFrame(report.confusion), root / "confusion.csv")

        embeddings = (
            _scoped_embeddings(adapted, eval_index, config, store)
            if adapted is not None
            else compute_embeddings(base, eval_index, config.eval.pooling, store=store)
        )
        _write_table(embeddings, root / "embeddings.csv", index=False)

        if adapted is not None:
            probes = sorted(eval_index.records, key=lambda r: r.id)[: config.eval.probe_images]
            images = store.stack(probes)
            after = adapted.models[sorted(adapted.models)[0]]
            mode = config.eval.cka_token_mode
            layerwise_cka(base, after, images, mode, names=("before", "after")).save(root / "cka.csv")
            reference_root = Path(config.output_dir) / "train" / "dual_cb" / f"seed{config.seed}" / target
            if RunRecord.is_complete(reference_root):
                reference = restore_dual(_checkpoint(RunRecord.load(reference_root), "head"))[0]
                for name, model in (("before", base), ("after", after)):
                    layerwise_cka(model, reference, images, mode, names=(name, "reference")).save(
                        root / f"cka_{name}_vs_reference.csv"
                    )
        record.log("eval", 0, "target", **report.as_dict())
        return report.as_dict()

    _run(record, body)
    print(root / "report.json")


def cmd_matrix(config: ExperimentConfig, args: argparse.Namespace) -> None:
    index = _load_index(config)
    sources = list(config.eval.sources or index.ids_at("source"))
    for method in config.eval.methods:
        check_pair_eligibility(index, method, sources)
    out = Path(config.output_dir) / "matrix"
    result = run_matrix(
        index,
        config.plan,
        config.model,
        config.views,
        sources=sources,
        methods=config.eval.methods,
        seeds=config.eval.seeds,
        aggregation=config.eval.aggregation,
        out_dir=out,
        workers=args.workers or config.workers,
    )
    summarize_matrix(result.metrics).write(out)
    print(out / "metrics.csv")


def cmd_granularity(config: ExperimentConfig, args: argparse.Namespace) -> None:
    config, index = _prepare(config)
    objective = METHOD_OBJECTIVE[config.method]
    if objective not in ("dino", "dino_cb"):
        raise ConfigValidationError(
            "method", f"granularity adapts with distillation; method '{config.method}' does not"
        )
    out = Path(config.output_dir) / "granularity"
    if read_status(out).get("status") == "complete":
        logger.info("run already complete, nothing to do", command="granularity", run=str(out))
        return
    target = _source_index(index, str(config.dataset.target))
    tables = []
    for seed in config.eval.seeds:
        seeded = dataclasses.replace(config, seed=seed, plan=dataclasses.replace(config.plan, seed=seed))
        trained = _train(seeded, index)
        pre, _ = restore_pretrain(_checkpoint(trained, "pretrain"), seeded.plan)
        dual, _, _ = restore_dual(_checkpoint(trained, "head"))
        with log_to_file(out / "log.txt"):
            table = run_granularity(
                dual,
                target,
                seeded.plan,
                seeded.model,
                seeded.views,
                levels=config.eval.levels,
                modes=config.eval.modes,
                objective=objective,  # ty: ignore[invalid-argument-type]
                projection_head=pre.projection_head,
                store=_store(seeded),
            )
        table.insert(0, "seed", seed)
        tables.append(table)
    combined = pd.concat(tables, ignore_index=True)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(combined, out / "granularity.csv", index=False)
    write_status(out, "complete", seeds=list(config.eval.seeds), config=config_to_dict(config))
    print(out / "granularity.csv")


def cmd_summarize(config: ExperimentConfig, args: argparse.Namespace) -> None:
    metrics = Path(args.metrics) if args.metrics else Path(config.output_dir) / "matrix" / "metrics.csv"
    summary = summarize_matrix(metrics)
    for path in summary.write(metrics.parent):
        print(path)


def cmd_plot(config: ExperimentConfig, args: argparse.Namespace) -> None:
    inputs = args.inputs or [config.output_dir]
    out = Path(args.plot_dir) if args.plot_dir else Path(config.output_dir) / "plots"
    for path in emit_plots(inputs, out, color_by=config.eval.color_by):
        print(path)


COMMANDS: dict[str, tuple[Callable[[ExperimentConfig, argparse.Namespace], None], str]] = {
    "generate": (cmd_generate, "Write the synthetic benchmark dataset"),
    "train": (cmd_train, "Pretrain and train the classifier on the source"),
    "adapt": (cmd_adapt, "Adapt a trained model to the target source"),
    "eval": (cmd_eval, "Score, export embeddings and CKA for one transfer"),
    "matrix": (cmd_matrix, "Run every method on every source to target cell"),
    "granularity": (cmd_granularity, "Adapt at source, batch and plate scope"),
    "summarize": (cmd_summarize, "Accuracy and F1 tables from a matrix metrics.csv"),
    "plot": (cmd_plot, "Render figures from persisted metrics"),
}


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", default=None, help="YAML config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value by dotted path (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="Shorthand for --set seed=N")
    parser.add_argument("--out", metavar="DIR", default=None, help="Shorthand for --set output_dir=DIR")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Console log level (default: INFO)",
    )
    parser.add_argument(
        "--log-format",
        default="console",
        choices=["console", "json", "kv"],
        help="Console log renderer (default: console)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hci-coda",
        description="Online self-supervised domain adaptation for high-content imaging",
    )
    parser.add_argument("--version", action="version", version=f"hci-coda {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        _add_common_arguments(sub)
        if name == "matrix":
            sub.add_argument("--workers", type=int, default=None, help="Worker processes for (seed, source) units")
        elif name == "summarize":
            sub.add_argument("metrics", nargs="?", default=None, help="metrics.csv (default: <output_dir>/matrix)")
        elif name == "plot":
            sub.add_argument("inputs", nargs="*", help="CSV files or directories (default: output_dir)")
            sub.add_argument("--plot-dir", default=None, help="Figure directory (default: <output_dir>/plots)")
    return parser


def main(args: list[str] | None = None) -> int:
    """Main entry point; returns the process exit code."""
    parsed = build_parser().parse_args(args)
    setup_logging(level=parsed.log_level, renderer=parsed.log_format)
    handler, _ = COMMANDS[parsed.command]
    try:
        config = load_config(parsed.config, parsed.overrides, seed=parsed.seed, output_dir=parsed.out)
        handler(config, parsed)
    except (ConfigValidationError, PairIneligible) as exc:
        logger.error("configuration error", command=parsed.command, error=str(exc))
        return EXIT_CONFIG
    except (CodaError, ImportError) as exc:
        logger.error("command failed", command=parsed.command, error=f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
