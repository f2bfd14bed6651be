"""The three training phases, TTT and the supervised baseline.

1. :func:`run_pretrain` trains a feature extractor with self-supervision
   (``dino``, ``dino_cb`` or ``mae``) on the labelled source.
2. :func:`run_head` stacks a token classifier on the frozen extractor and
   trains it with cross-entropy.
3. :func:`run_adapt` adapts the extractor on unlabelled target data with
   ``dino`` (ODA) or ``dino_cb`` (CODA) while the classifier stays frozen.

:func:`run_ttt` is the per-image MAE baseline and :func:`run_supervised`
the end-to-end transformer baseline.
"""

from __future__ import annotations

import contextlib
import copy
import itertools
import math
from collections.abc import Callable, Iterator, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from torch import nn

from ..dataset import DatasetIndex, ImageRecord, split_by_scope
from ..exceptions import CodaError
from ..models import (
    DualModel,
    FeatureExtractor,
    MAEHead,
    ModelConfig,
    StandaloneClassifier,
    build_dual_model,
    build_feature_extractor,
    load_checkpoint,
    mae_forward,
    model_header,
    save_checkpoint,
    set_phase,
)
from ..objectives import (
    DistillConfig,
    DistillState,
    ProjectionHead,
    center_update,
    distill_loss,
    ema_update,
)
from ..utils.hashing import parameter_hash
from ..utils.seeding import derive_seed, rng_state, torch_generator
from ..views import PairIndex, ViewConfig
from .data import ImageStore, MaskedImages, ViewDataset, make_loader
from .plan import AdaptScope, Objective, PhaseSchedule, PlateauTracker, TrainPlan, lr_at
from .records import RunRecord

logger = structlog.get_logger()

__all__ = [
    "AdaptResult",
    "FrozenPartitionViolation",
    "HeadResult",
    "NoLabels",
    "PairIneligible",
    "PretrainResult",
    "TTTResult",
    "UncoveredRecords",
    "allocate_steps",
    "predict",
    "restore_dual",
    "restore_pretrain",
    "run_adapt",
    "run_head",
    "run_pretrain",
    "run_supervised",
    "run_ttt",
]


class PipelineError(CodaError):
    """Base class for training-pipeline errors."""


class PairIneligible(PipelineError):
    """Raised when cross-batch training is requested on data without cross-batch treatments."""


class NoLabels(PipelineError):
    """Raised when a supervised phase receives no labelled records."""


class FrozenPartitionViolation(PipelineError):
    """Raised when a partition declared frozen changed during training."""


class UncoveredRecords(PipelineError):
    """Raised when records fall outside every scope id an adaptation covered."""


@contextlib.contextmanager
def seeded(seed: int, *keys: str | int) -> Iterator[None]:
    """Run a block (e.g. model construction) under a derived torch seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, *keys))
        yield


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _steps_per_epoch(n: int, schedule: PhaseSchedule) -> int:
    steps = max(1, math.ceil(n / schedule.batch_size))
    if schedule.steps_per_epoch is not None:
        steps = min(steps, schedule.steps_per_epoch)
    return steps


def allocate_steps(total: int, sizes: Mapping[str, int]) -> dict[str, int]:
    """Split *total* steps across scope ids in proportion to their sizes.

    Largest-remainder rounding, ties broken by id order, so the shares
    always sum to *total*.
    """
    n = sum(sizes.values())
    if n == 0:
        return {sid: 0 for sid in sizes}
    shares = {sid: total * size // n for sid, size in sizes.items()}
    remainders = sorted(sizes, key=lambda sid: -(total * sizes[sid] % n))
    for sid in remainders[: total - sum(shares.values())]:
        shares[sid] += 1
    return shares


def _epoch_batches(dataset: ViewDataset | MaskedImages, batch_size: int, *, seed: int, tag: str, epoch: int) -> Iterator:
    """Batches of one epoch; reshuffled passes follow when a step budget outlasts the data."""
    if len(dataset) == 0:
        return
    for repeat in itertools.count():
        dataset.set_epoch(epoch, repeat)
        yield from make_loader(dataset, batch_size, shuffle=True, seed=seed, tag=tag, epoch=epoch, repeat=repeat)


def _frozen_guard(module: nn.Module, name: str) -> Callable[[], None]:
    expected = parameter_hash(module)

    def check() -> None:
        if parameter_hash(module) != expected:
            raise FrozenPartitionViolation(f"{name} parameters changed while frozen")

    return check


def _require_pairs(index: DatasetIndex, what: str) -> None:
    if not PairIndex.from_index(index).is_eligible:
        raise PairIneligible(
            f"{what}: no treatment spans two or more batches, cross-batch pairs are impossible"
        )


# ---------------------------------------------------------------------------
# Self-supervised loop
# ---------------------------------------------------------------------------


def _train_ssl(
    *,
    objective: Objective,
    fe: FeatureExtractor,
    state: DistillState | None,
    mae_head: MAEHead | None,
    index: DatasetIndex,
    store: ImageStore,
    schedule: PhaseSchedule,
    view_config: ViewConfig,
    seed: int,
    phase: str,
    tag: str,
    record: RunRecord | None,
    guard: Callable[[], None] | None,
    steps: int | None = None,
) -> tuple[list[float], int]:
    """Run *schedule* of SSL epochs; returns per-epoch mean losses and the step count.

    *steps* fixes the optimizer steps per epoch; by default it follows
    the data size and the schedule cap.
    """
    if objective == "mae":
        assert mae_head is not None
        dataset = MaskedImages(index, store, view_config, seed=seed, tag=tag)
        params = [p for p in (*fe.parameters(), *mae_head.parameters()) if p.requires_grad]
    else:
        assert state is not None
        mode = "pair" if objective == "dino_cb" else "single"
        dataset = ViewDataset(index, store, view_config, mode=mode, seed=seed, tag=tag)
        params = [p for p in state.student_parameters() if p.requires_grad]

    optimizer = torch.optim.AdamW(params, lr=schedule.lr, weight_decay=schedule.weight_decay)
    if steps is None:
        steps = _steps_per_epoch(len(dataset), schedule)
    losses: list[float] = []
    total_steps = 0
    lr = 0.0
    for epoch in range(schedule.epochs):
        batches = _epoch_batches(dataset, schedule.batch_size, seed=seed, tag=tag, epoch=epoch)
        running, count = 0.0, 0
        for step, batch in zip(range(steps), batches, strict=False):
            lr = lr_at(schedule, epoch + step / steps)
            _set_lr(optimizer, lr)
            if objective == "mae":
                generator = torch_generator(seed, tag, "mask", epoch, step)
                loss, _ = mae_forward(fe, mae_head, batch, generator)  # ty: ignore[invalid-argument-type]
                teacher_out = None
            else:
                loss, teacher_out = distill_loss(state, batch, return_teacher=True)  # ty: ignore[invalid-argument-type]
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if teacher_out is not None:
                ema_update(state)  # ty: ignore[invalid-argument-type]
                center_update(state, teacher_out)  # ty: ignore[invalid-argument-type]
            running += float(loss.detach())
            count += 1
        total_steps += count
        mean_loss = running / max(count, 1)
        losses.append(mean_loss)
        if guard is not None:
            guard()
        logger.info("epoch", phase=phase, epoch=epoch + 1, loss=round(mean_loss, 5), lr=lr)
        if record is not None:
            record.log(phase, epoch + 1, "train", loss=mean_loss, lr=lr)
    return losses, total_steps


# ---------------------------------------------------------------------------
# Phase 1: pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    feature_extractor: FeatureExtractor
    objective: Objective
    state: DistillState | None = None
    mae_head: MAEHead | None = None
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    steps: int = 0
    rng: dict[str, Any] = field(default_factory=dict)

    @property
    def projection_head(self) -> ProjectionHead | None:
        return self.state.student_head if self.state is not None else None


def _new_projection_head(config: ModelConfig) -> ProjectionHead:
    return ProjectionHead(
        config.embed_dim,
        out_dim=config.projection_dim,
        hidden_dim=config.projection_hidden,
        bottleneck_dim=config.projection_bottleneck,
    )


def _new_mae_head(fe: FeatureExtractor, config: ModelConfig) -> MAEHead:
    return MAEHead(
        fe,
        mask_ratio=config.mask_ratio,
        decoder_dim=config.decoder_dim,
        decoder_depth=config.decoder_depth,
        decoder_heads=config.decoder_heads,
        norm_pix_loss=config.norm_pix_loss,
    )


def run_pretrain(
    index: DatasetIndex,
    plan: TrainPlan,
    model_config: ModelConfig,
    view_config: ViewConfig,
    *,
    objective: Objective | None = None,
    store: ImageStore | None = None,
    record: RunRecord | None = None,
    tag: str = "pretrain",
) -> PretrainResult:
    """Pretrain a feature extractor on *index* with self-supervision.

    Raises:
        PairIneligible: ``dino_cb`` on data where no treatment spans two batches.
    """
    objective = objective or plan.objective
    if objective == "dino_cb":
        _require_pairs(index, "pretraining with dino_cb")
    store = store or ImageStore((model_config.image_size, model_config.image_size))

    with seeded(plan.seed, "init", tag):
        fe = build_feature_extractor(model_config)
        state = None
        mae_head = None
        if objective == "mae":
            mae_head = _new_mae_head(fe, model_config)
        else:
            state = DistillState(fe, _new_projection_head(model_config), plan.distill)

    logger.info("pretraining", objective=objective, records=len(index), epochs=plan.pretrain.epochs)
    losses, steps = _train_ssl(
        objective=objective,
        fe=fe,
        state=state,
        mae_head=mae_head,
        index=index,
        store=store,
        schedule=plan.pretrain,
        view_config=view_config,
        seed=plan.seed,
        phase="pretrain",
        tag=tag,
        record=record,
        guard=None,
    )
    rng = rng_state(plan.seed, tag, next_epoch=len(losses))
    result = PretrainResult(fe, objective, state, mae_head, losses, steps=steps, rng=rng)
    if record is not None:
        result.checkpoint = save_pretrain(result, record.checkpoint_path("pretrain"), model_config, plan)
        record.add_checkpoint("pretrain", result.checkpoint, step=steps, rng=result.rng)
        record.save()
    return result


def save_pretrain(
    result: PretrainResult, path: Path, model_config: ModelConfig, plan: TrainPlan
) -> Path:
    modules: dict[str, nn.Module | torch.Tensor] = {"feature_extractor": result.feature_extractor}
    if result.state is not None:
        modules.update(
            projection_head=result.state.student_head,
            teacher_backbone=result.state.teacher_backbone,
            teacher_head=result.state.teacher_head,
            center=result.state.center,
        )
    if result.mae_head is not None:
        modules["mae_head"] = result.mae_head
    header = model_header(
        model_config,
        phase="pretrain",
        objective=result.objective,
        epochs=len(result.losses),
        seed=plan.seed,
        step=result.steps,
        rng=result.rng,
        distill=asdict(plan.distill),
    )
    return save_checkpoint(path, modules, header)


def restore_pretrain(path: str | Path, plan: TrainPlan | None = None) -> tuple[PretrainResult, ModelConfig]:
    """Rebuild a :class:`PretrainResult` from a pretrain checkpoint."""
    header, tensors = load_checkpoint(path)
    config = _model_config_from_header(header)
    fe = build_feature_extractor(config)
    fe.load_state_dict(tensors["feature_extractor"])
    objective = header["objective"]
    state = None
    mae_head = None
    if "projection_head" in tensors:
        distill = DistillConfig(**header["distill"]) if "distill" in header else (plan.distill if plan else None)
        state = DistillState(fe, _new_projection_head(config), distill)
        state.student_head.load_state_dict(tensors["projection_head"])
        state.teacher_backbone.load_state_dict(tensors["teacher_backbone"])
        state.teacher_head.load_state_dict(tensors["teacher_head"])
        state.center.copy_(tensors["center"][""])
    if "mae_head" in tensors:
        mae_head = _new_mae_head(fe, config)
        mae_head.load_state_dict(tensors["mae_head"])
    restored = PretrainResult(
        fe,
        objective,
        state,
        mae_head,
        checkpoint=Path(path),
        steps=int(header.get("step", 0)),
        rng=dict(header.get("rng", {})),
    )
    return restored, config


def _model_config_from_header(header: dict) -> ModelConfig:
    # Weights come from the checkpoint, not from the external hook.
    return ModelConfig(**{**header["architecture"], "pretrained": None})


# ---------------------------------------------------------------------------
# Phase 2: classifier on the frozen extractor
# ---------------------------------------------------------------------------


@dataclass
class HeadResult:
    model: nn.Module
    best_epoch: int
    history: list[dict[str, float]] = field(default_factory=list)
    checkpoint: Path | None = None
    steps: int = 0
    rng: dict[str, Any] = field(default_factory=dict)


@torch.no_grad()
def encode(fe: FeatureExtractor, images: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    """Feature-extractor tokens of *images* in inference mode."""
    was_training = fe.training
    fe.eval()
    chunks = [fe(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    fe.train(was_training)
    return torch.cat(chunks)


def _labels(records: tuple[ImageRecord, ...]) -> torch.Tensor:
    return torch.tensor([int(r.moa_label) for r in records], dtype=torch.long)  # ty: ignore[invalid-argument-type]


@torch.no_grad()
def _evaluate(model: Callable[[torch.Tensor], torch.Tensor], inputs: torch.Tensor, labels: torch.Tensor, batch_size: int) -> tuple[float, float]:
    logits = torch.cat([model(inputs[i : i + batch_size]) for i in range(0, len(inputs), batch_size)])
    loss = F.cross_entropy(logits, labels).item()
    accuracy = (logits.argmax(dim=1) == labels).float().mean().item()
    return loss, accuracy


def _fit_classifier(
    trainable: nn.Module,
    forward: Callable[[torch.Tensor], torch.Tensor],
    train: tuple[torch.Tensor, torch.Tensor],
    val: tuple[torch.Tensor, torch.Tensor] | None,
    schedule: PhaseSchedule,
    *,
    seed: int,
    phase: str,
    record: RunRecord | None,
    guard: Callable[[], None] | None,
) -> tuple[int, list[dict[str, float]], int]:
    """Cross-entropy training with warmup + plateau steps; keeps the best-validation weights.

    Returns the best epoch, the per-epoch history and the optimizer step count.
    """
    inputs, labels = train
    optimizer = torch.optim.AdamW(
        [p for p in trainable.parameters() if p.requires_grad],
        lr=schedule.lr,
        weight_decay=schedule.weight_decay,
    )
    tracker = PlateauTracker(schedule.patience)
    steps = _steps_per_epoch(len(inputs), schedule)
    best_key = (-math.inf, -math.inf)
    best_state = copy.deepcopy(trainable.state_dict())
    best_epoch = 0
    history: list[dict[str, float]] = []
    total_steps = 0

    for epoch in range(schedule.epochs):
        trainable.train()
        order = torch.randperm(len(inputs), generator=torch_generator(seed, phase, "order", epoch))
        lr = 0.0
        for step in range(steps):
            idx = order[step * schedule.batch_size : (step + 1) * schedule.batch_size]
            if len(idx) == 0:
                break
            lr = lr_at(schedule, epoch + step / steps, tracker.steps)
            _set_lr(optimizer, lr)
            loss = F.cross_entropy(forward(inputs[idx]), labels[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total_steps += 1

        trainable.eval()
        train_loss, train_acc = _evaluate(forward, inputs, labels, schedule.batch_size)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": train_loss, "train_accuracy": train_acc}
        if val is not None and len(val[0]):
            val_loss, val_acc = _evaluate(forward, val[0], val[1], schedule.batch_size)
            row.update(val_loss=val_loss, val_accuracy=val_acc)
        else:
            val_loss, val_acc = train_loss, train_acc
        if epoch + 1 >= schedule.warmup_epochs and tracker.update(val_loss, val_acc):
            logger.info("plateau: reducing lr", phase=phase, epoch=epoch + 1, reductions=tracker.steps)
        if (val_acc, -val_loss) > best_key:
            best_key = (val_acc, -val_loss)
            best_state = copy.deepcopy(trainable.state_dict())
            best_epoch = epoch + 1
        if guard is not None:
            guard()
        history.append(row)
        logger.info("epoch", phase=phase, **{k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})
        if record is not None:
            record.log(phase, epoch + 1, "train", loss=train_loss, accuracy=train_acc, lr=lr)
            if "val_loss" in row:
                record.log(phase, epoch + 1, "val", loss=val_loss, accuracy=val_acc)

    trainable.load_state_dict(best_state)
    trainable.eval()
    return best_epoch, history, total_steps


def run_head(
    feature_extractor: FeatureExtractor,
    train: DatasetIndex,
    val: DatasetIndex | None,
    plan: TrainPlan,
    model_config: ModelConfig,
    *,
    store: ImageStore | None = None,
    record: RunRecord | None = None,
    tag: str = "head",
) -> HeadResult:
    """Train a token classifier on the frozen *feature_extractor*.

    Tokens are computed once per split since the extractor cannot change.

    Raises:
        NoLabels: *train* has no labelled record.
        FrozenPartitionViolation: The extractor changed during training.
    """
    if not train.labeled:
        raise NoLabels("head training needs labelled records; the training split has none")
    store = store or ImageStore((model_config.image_size, model_config.image_size))
    with seeded(plan.seed, "init", tag):
        dual = build_dual_model(model_config, train.class_count, feature_extractor=feature_extractor)
    set_phase(dual, "head")
    guard = _frozen_guard(dual.feature_extractor, "feature extractor")

    train_set = (encode(feature_extractor, store.stack(train.labeled)), _labels(train.labeled))
    val_set = None
    if val is not None and val.labeled:
        val_set = (encode(feature_extractor, store.stack(val.labeled)), _labels(val.labeled))

    best_epoch, history, steps = _fit_classifier(
        dual.classifier,
        dual.classifier,
        train_set,
        val_set,
        plan.head,
        seed=plan.seed,
        phase=tag,
        record=record,
        guard=guard,
    )
    guard()
    rng = rng_state(plan.seed, tag, next_epoch=plan.head.epochs)
    result = HeadResult(dual, best_epoch, history, steps=steps, rng=rng)
    if record is not None:
        result.checkpoint = save_dual(
            dual, record.checkpoint_path(tag), model_config, phase="head", seed=plan.seed, step=steps, rng=rng
        )
        record.add_checkpoint(tag, result.checkpoint, step=steps, rng=rng)
        record.save()
    return result


def save_dual(dual: DualModel, path: Path, model_config: ModelConfig, **header) -> Path:
    return save_checkpoint(
        path,
        {"feature_extractor": dual.feature_extractor, "classifier": dual.classifier},
        model_header(model_config, num_classes=dual.classifier.num_classes, **header),
    )


def restore_dual(path: str | Path) -> tuple[DualModel, ModelConfig, dict]:
    """Rebuild a :class:`DualModel` (and its header) from a checkpoint."""
    header, tensors = load_checkpoint(path)
    config = _model_config_from_header(header)
    dual = build_dual_model(config, header["num_classes"])
    dual.feature_extractor.load_state_dict(tensors["feature_extractor"])
    dual.classifier.load_state_dict(tensors["classifier"])
    set_phase(dual, "head")
    dual.eval()
    return dual, config, header


# ---------------------------------------------------------------------------
# Phase 3: adaptation
# ---------------------------------------------------------------------------


@dataclass
class AdaptResult:
    models: dict[str, DualModel]
    scope: AdaptScope
    objectives: dict[str, Objective] = field(default_factory=dict)
    losses: dict[str, list[float]] = field(default_factory=dict)
    iterations: dict[str, int] = field(default_factory=dict)

    @property
    def total_iterations(self) -> int:
        return sum(self.iterations.values())

    def model_for(self, record: ImageRecord) -> DualModel:
        return self.models[record.scope_id(self.scope.level)]


def run_adapt(
    dual: DualModel,
    target: DatasetIndex,
    plan: TrainPlan,
    model_config: ModelConfig,
    view_config: ViewConfig,
    *,
    scope: AdaptScope | None = None,
    objective: Objective | None = None,
    projection_head: ProjectionHead | None = None,
    store: ImageStore | None = None,
    record: RunRecord | None = None,
    tag: str = "adapt",
) -> AdaptResult:
    """Adapt the feature extractor on unlabelled *target* data, one model per scope id.

    The target is stripped of labels before anything else happens. The
    classifier is frozen and hash-checked after every epoch.

    Args:
        dual: Trained dual model; it is copied, never modified.
        projection_head: Pretraining projection head to reuse; a fresh one
            is initialised when ``None``.

    Raises:
        PairIneligible: ``dino_cb`` at source or batch scope on data without
            cross-batch treatments. At plate scope the run falls back to ``dino``.
        FrozenPartitionViolation: The classifier changed.
    """
    objective = objective or plan.objective
    if objective not in ("dino", "dino_cb"):
        raise ValueError(f"Invalid adaptation objective '{objective}'. Must be one of: dino, dino_cb")
    scope = scope or AdaptScope(plan.scope)
    unlabeled = target.without_labels()
    ids = scope.ids or tuple(unlabeled.ids_at(scope.level))
    store = store or ImageStore((model_config.image_size, model_config.image_size))
    result = AdaptResult({}, AdaptScope(scope.level, tuple(ids)))

    if projection_head is None:
        logger.warning("projection head re-initialised for adaptation", objective=objective)
    else:
        logger.info("reusing pretraining projection head for adaptation", objective=objective)

    subsets = {sid: split_by_scope(unlabeled, scope.level, [sid])[0] for sid in ids}
    # One budget for the whole target, shared out by subset size.
    budget = _steps_per_epoch(sum(len(s) for s in subsets.values()), plan.adapt)
    shares = allocate_steps(budget, {sid: len(s) for sid, s in subsets.items()})
    logger.info("adaptation budget", scope=scope.level, steps_per_epoch=budget, shares=shares)
    starved = [sid for sid, n in shares.items() if n == 0]
    if starved:
        logger.warning("scope ids get no adaptation steps at this budget", scope=scope.level, scope_ids=starved)

    for sid, subset in subsets.items():
        used: Objective = objective
        if objective == "dino_cb" and not PairIndex.from_index(subset).is_eligible:
            if scope.level != "plate":
                _require_pairs(subset, f"CODA on {scope.level} '{sid}'")
            logger.warning(
                "no cross-batch pairs in scope, falling back to single-image distillation",
                scope=scope.level,
                scope_id=sid,
            )
            used = "dino"

        model = copy.deepcopy(dual)
        set_phase(model, "adapt")
        with seeded(plan.seed, "init", tag, "projection", sid):
            head = copy.deepcopy(projection_head) if projection_head is not None else _new_projection_head(model_config)
        head.requires_grad_(True)
        state = DistillState(model.feature_extractor, head, plan.distill)
        losses, steps = _train_ssl(
            objective=used,
            fe=model.feature_extractor,
            state=state,
            mae_head=None,
            index=subset,
            store=store,
            schedule=plan.adapt,
            view_config=view_config,
            seed=plan.seed,
            phase=f"{tag}:{sid}" if scope.level != "source" else tag,
            tag=f"{tag}:{scope.level}:{sid}",
            record=record,
            guard=_frozen_guard(model.classifier, "classifier"),
            steps=shares[sid],
        )
        model.eval()
        result.models[sid] = model
        result.objectives[sid] = used
        result.losses[sid] = losses
        result.iterations[sid] = steps
        rng = rng_state(plan.seed, f"{tag}:{scope.level}:{sid}", next_epoch=plan.adapt.epochs)
        if record is not None:
            safe = sid.replace("/", "_")
            path = save_dual(
                model,
                record.checkpoint_path(f"{tag}-{scope.level}-{safe}"),
                model_config,
                phase="adapt",
                objective=used,
                scope=scope.level,
                scope_id=sid,
                seed=plan.seed,
                step=steps,
                rng=rng,
            )
            record.add_checkpoint(f"{tag}:{scope.level}:{sid}", path, step=steps, rng=rng)
    if record is not None:
        record.save()
    return result


# ---------------------------------------------------------------------------
# Test-time training
# ---------------------------------------------------------------------------


@dataclass
class TTTResult:
    records: tuple[ImageRecord, ...]
    logits: np.ndarray
    steps: int

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def run_ttt(
    dual: DualModel,
    mae_head: MAEHead,
    target: DatasetIndex,
    plan: TrainPlan,
    *,
    store: ImageStore | None = None,
    observer: Callable[[ImageRecord, FeatureExtractor], None] | None = None,
) -> TTTResult:
    """Per-image test-time training with the MAE objective.

    For every image the extractor is reset to its initial weights, takes
    ``plan.ttt.steps`` reconstruction steps on that image alone, predicts,
    and the adapted weights are discarded. *observer* is called with each
    record and the freshly reset extractor.
    """
    fe = dual.feature_extractor
    size = (fe.image_size, fe.image_size)
    store = store or ImageStore(size)
    snapshot = copy.deepcopy(fe.state_dict())
    unlabeled = target.without_labels()
    phase = dual.phase
    mae_head.requires_grad_(False)
    mae_head.eval()
    dual.classifier.eval()

    logits = []
    for record in unlabeled.records:
        fe.load_state_dict(snapshot)
        if observer is not None:
            observer(record, fe)
        image = store.get(record).unsqueeze(0)
        if plan.ttt.steps > 0:
            fe.requires_grad_(True)
            fe.train()
            optimizer = torch.optim.AdamW(fe.parameters(), lr=plan.ttt.lr, weight_decay=0.0)
            for step in range(plan.ttt.steps):
                loss, _ = mae_forward(fe, mae_head, image, torch_generator(plan.seed, "ttt", record.id, step))
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
        fe.eval()
        with torch.no_grad():
            logits.append(dual(image)[0].numpy())

    fe.load_state_dict(snapshot)
    set_phase(dual, phase)
    dual.eval()
    logger.info("test-time training done", images=len(logits), steps=plan.ttt.steps)
    return TTTResult(unlabeled.records, np.stack(logits) if logits else np.zeros((0, 0)), plan.ttt.steps)


# ---------------------------------------------------------------------------
# Supervised baseline and inference
# ---------------------------------------------------------------------------


def run_supervised(
    train: DatasetIndex,
    val: DatasetIndex | None,
    plan: TrainPlan,
    model_config: ModelConfig,
    *,
    store: ImageStore | None = None,
    record: RunRecord | None = None,
    tag: str = "supervised",
) -> HeadResult:
    """End-to-end transformer trained with the head-phase recipe."""
    if not train.labeled:
        raise NoLabels("supervised training needs labelled records; the training split has none")
    store = store or ImageStore((model_config.image_size, model_config.image_size))
    with seeded(plan.seed, "init", tag):
        model = StandaloneClassifier(build_feature_extractor(model_config), train.class_count)
    train_set = (store.stack(train.labeled), _labels(train.labeled))
    val_set = (store.stack(val.labeled), _labels(val.labeled)) if val is not None and val.labeled else None
    best_epoch, history, steps = _fit_classifier(
        model, model, train_set, val_set, plan.head, seed=plan.seed, phase=tag, record=record, guard=None
    )
    rng = rng_state(plan.seed, tag, next_epoch=plan.head.epochs)
    result = HeadResult(model, best_epoch, history, steps=steps, rng=rng)
    if record is not None:
        header = model_header(
            model_config,
            phase="supervised",
            num_classes=train.class_count,
            seed=plan.seed,
            step=steps,
            rng=rng,
        )
        result.checkpoint = save_checkpoint(record.checkpoint_path(tag), {"model": model}, header)
        record.add_checkpoint(tag, result.checkpoint, step=steps, rng=rng)
        record.save()
    return result


def restore_supervised(path: str | Path) -> tuple[StandaloneClassifier, ModelConfig]:
    header, tensors = load_checkpoint(path)
    config = _model_config_from_header(header)
    model = StandaloneClassifier(build_feature_extractor(config), header["num_classes"])
    model.load_state_dict(tensors["model"])
    model.eval()
    return model, config


@torch.no_grad()
def predict(
    model: nn.Module,
    index: DatasetIndex,
    *,
    store: ImageStore | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, tuple[ImageRecord, ...]]:
    """Logits ``(N, K)`` for every record of *index*, in index order."""
    records = index.records
    store = store or ImageStore(_input_size(model))
    was_training = model.training
    model.eval()
    chunks = [
        model(store.stack(records[i : i + batch_size])).numpy()
        for i in range(0, len(records), batch_size)
    ]
    model.train(was_training)
    if not chunks:
        return np.zeros((0, 0), dtype=np.float32), records
    return np.concatenate(chunks), records


def predict_adapted(
    result: AdaptResult, index: DatasetIndex, *, store: ImageStore | None = None, batch_size: int = 64
) -> tuple[np.ndarray, tuple[ImageRecord, ...]]:
    """Logits of every record from the model adapted on that record's scope id.

    Raises:
        UncoveredRecords: A record of *index* has no adapted model.
    """
    level = result.scope.level
    rows: dict[str, np.ndarray] = {}
    for sid, model in result.models.items():
        part, _ = split_by_scope(index, level, [sid])
        logits, records = predict(model, part, store=store, batch_size=batch_size)
        rows.update({r.id: row for r, row in zip(records, logits, strict=True)})
    missing = [r.id for r in index.records if r.id not in rows]
    if missing:
        shown = ", ".join(missing[:5]) + (f" (+{len(missing) - 5} more)" if len(missing) > 5 else "")
        raise UncoveredRecords(f"No adapted model at {level} scope for records: {shown}")
    if not index.records:
        return np.zeros((0, 0), dtype=np.float32), index.records
    return np.stack([rows[r.id] for r in index.records]), index.records


def _input_size(model: nn.Module) -> tuple[int, int]:
    fe = getattr(model, "feature_extractor", None)
    size = fe.image_size if isinstance(fe, FeatureExtractor) else 64
    return size, size
