"""Smoke and invariant tests for pretraining, head training, adaptation, TTT and the baseline."""

import dataclasses
import math
import re

import numpy as np
import pytest
import torch

from hci_coda.dataset import holdout_split, split_by_scope
from hci_coda.training.data import ImageStore, random_labels
from hci_coda.training.phases import (
    NoLabels,
    PairIneligible,
    UncoveredRecords,
    allocate_steps,
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
from hci_coda.training.plan import AdaptScope, TTTConfig
from hci_coda.training.records import RunRecord
from hci_coda.utils.hashing import parameter_hash
from hci_coda.utils.seeding import rng_state


@pytest.fixture
def source_splits(tiny_index):
    source, _ = split_by_scope(tiny_index, "source", ["S1"])
    return holdout_split(source, val_fraction=0.25, test_fraction=0.25, seed=0)


@pytest.fixture
def target(tiny_index):
    target, _ = split_by_scope(tiny_index, "source", ["S2"])
    return target


@pytest.fixture
def store():
    return ImageStore((16, 16))


@pytest.fixture
def trained(source_splits, tiny_plan, tiny_model_config, tiny_views, store):
    """A dual model trained on the S1 split with single-image distillation."""
    train, val, _ = source_splits
    pretrained = run_pretrain(train, tiny_plan, tiny_model_config, tiny_views, objective="dino", store=store)
    head = run_head(pretrained.feature_extractor, train, val, tiny_plan, tiny_model_config, store=store)
    return pretrained, head


class TestPretrain:
    """Test cases for run_pretrain."""

    @pytest.mark.parametrize("objective", ["dino", "dino_cb", "mae"])
    def test_objectives_produce_finite_losses(self, objective, tiny_index, tiny_plan, tiny_model_config, tiny_views, store):
        source, _ = split_by_scope(tiny_index, "source", ["S1"])
        result = run_pretrain(source, tiny_plan, tiny_model_config, tiny_views, objective=objective, store=store)
        assert result.objective == objective
        assert len(result.losses) == tiny_plan.pretrain.epochs
        assert all(np.isfinite(result.losses))
        if objective == "mae":
            assert result.mae_head is not None and result.state is None
            assert result.projection_head is None
        else:
            assert result.state is not None and result.mae_head is None
            assert result.projection_head is result.state.student_head

    def test_same_seed_same_weights(self, source_splits, tiny_plan, tiny_model_config, tiny_views, store):
        train, _, _ = source_splits
        a = run_pretrain(train, tiny_plan, tiny_model_config, tiny_views, objective="dino", store=store)
        b = run_pretrain(train, tiny_plan, tiny_model_config, tiny_views, objective="dino", store=store)
        assert parameter_hash(a.feature_extractor) == parameter_hash(b.feature_extractor)

    def test_cross_batch_needs_two_batches(self, tiny_index, tiny_plan, tiny_model_config, tiny_views, store):
        batch, _ = split_by_scope(tiny_index, "batch", ["S1B1"])
        with pytest.raises(PairIneligible, match="cross-batch pairs are impossible"):
            run_pretrain(batch, tiny_plan, tiny_model_config, tiny_views, objective="dino_cb", store=store)

    def test_checkpoint_restores_state(self, tmp_path, source_splits, tiny_plan, tiny_model_config, tiny_views, store):
        train, _, _ = source_splits
        record = RunRecord.create(tmp_path)
        result = run_pretrain(
            train, tiny_plan, tiny_model_config, tiny_views, objective="dino", store=store, record=record
        )
        assert result.checkpoint == record.checkpoint_path("pretrain")
        assert record.checkpoints == {"pretrain": "checkpoints/pretrain.pt"}
        restored, config = restore_pretrain(result.checkpoint, tiny_plan)
        assert config == tiny_model_config
        assert restored.objective == "dino"
        assert parameter_hash(restored.feature_extractor) == parameter_hash(result.feature_extractor)
        assert parameter_hash(restored.state.teacher_backbone) == parameter_hash(result.state.teacher_backbone)
        assert torch.equal(restored.state.center, result.state.center)
        assert result.steps == max(1, math.ceil(len(train) / tiny_plan.pretrain.batch_size))
        assert restored.steps == result.steps
        assert restored.rng == rng_state(tiny_plan.seed, "pretrain", next_epoch=tiny_plan.pretrain.epochs)
        reloaded = RunRecord.load(tmp_path)
        assert reloaded.progress["pretrain"] == {"step": result.steps, "rng": restored.rng}


class TestHead:
    """Test cases for run_head."""

    def test_extractor_untouched(self, source_splits, tiny_plan, tiny_model_config, tiny_views, store):
        train, val, _ = source_splits
        pretrained = run_pretrain(train, tiny_plan, tiny_model_config, tiny_views, objective="dino", store=store)
        before = parameter_hash(pretrained.feature_extractor)
        head = run_head(pretrained.feature_extractor, train, val, tiny_plan, tiny_model_config, store=store)
        assert parameter_hash(head.model.feature_extractor) == before
        assert len(head.history) == tiny_plan.head.epochs
        assert 1 <= head.best_epoch <= tiny_plan.head.epochs
        assert "val_accuracy" in head.history[0]

    def test_needs_labels(self, source_splits, tiny_plan, tiny_model_config, tiny_views, store):
        train, _, _ = source_splits
        pretrained = run_pretrain(train, tiny_plan, tiny_model_config, tiny_views, objective="dino", store=store)
        with pytest.raises(NoLabels):
            run_head(pretrained.feature_extractor, train.without_labels(), None, tiny_plan, tiny_model_config)

    def test_checkpoint_round_trip(self, tmp_path, source_splits, tiny_plan, tiny_model_config, tiny_views, store):
        train, val, test = source_splits
        pretrained = run_pretrain(train, tiny_plan, tiny_model_config, tiny_views, objective="dino", store=store)
        record = RunRecord.create(tmp_path)
        head = run_head(
            pretrained.feature_extractor, train, val, tiny_plan, tiny_model_config, store=store, record=record
        )
        dual, config, header = restore_dual(head.checkpoint)
        assert header["phase"] == "head"
        per_epoch = math.ceil(len(train.labeled) / tiny_plan.head.batch_size)
        assert header["step"] == head.steps == tiny_plan.head.epochs * per_epoch
        assert header["rng"] == rng_state(tiny_plan.seed, "head", next_epoch=tiny_plan.head.epochs)
        assert RunRecord.load(tmp_path).progress["head"]["step"] == head.steps
        assert config == tiny_model_config
        expected, _ = predict(head.model, test, store=store)
        actual, _ = predict(dual, test, store=store)
        np.testing.assert_allclose(actual, expected, atol=1e-6)


class TestAllocateSteps:
    """Test cases for allocate_steps."""

    def test_equal_sizes_break_ties_by_order(self):
        assert allocate_steps(3, {"a": 16, "b": 16}) == {"a": 2, "b": 1}
        assert allocate_steps(5, {"a": 1, "b": 1, "c": 1}) == {"a": 2, "b": 2, "c": 1}

    def test_largest_remainder_wins(self):
        # exact shares 0.3, 1.2 and 1.5; the 0.5 remainder takes the spare step
        assert allocate_steps(3, {"a": 2, "b": 8, "c": 10}) == {"a": 0, "b": 1, "c": 2}
        assert allocate_steps(4, {"a": 1, "b": 3}) == {"a": 1, "b": 3}

    @pytest.mark.parametrize("total", [0, 1, 7, 50])
    def test_shares_sum_to_total(self, total):
        shares = allocate_steps(total, {"x": 5, "y": 11, "z": 16, "w": 1})
        assert sum(shares.values()) == total
        assert all(n >= 0 for n in shares.values())

    def test_empty_scopes(self):
        assert allocate_steps(4, {}) == {}
        assert allocate_steps(4, {"a": 0}) == {"a": 0}
        assert allocate_steps(4, {"a": 3, "b": 0}) == {"a": 4, "b": 0}


class TestAdapt:
    """Test cases for run_adapt."""

    def test_classifier_frozen_and_input_model_untouched(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        original = parameter_hash(head.model)
        result = run_adapt(head.model, target, tiny_plan, tiny_model_config, tiny_views, store=store)
        adapted = result.models["S2"]
        assert parameter_hash(head.model) == original
        assert parameter_hash(adapted.classifier) == parameter_hash(head.model.classifier)
        assert parameter_hash(adapted.feature_extractor) != parameter_hash(head.model.feature_extractor)
        assert result.objectives == {"S2": "dino_cb"}
        # 32 target images in batches of 16, one epoch
        assert result.iterations == {"S2": 2}
        assert result.total_iterations == 2

    def test_labels_never_reach_adaptation(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        shuffled = target.with_labels(random_labels(target, seed=7))
        a = run_adapt(head.model, target, tiny_plan, tiny_model_config, tiny_views, store=store)
        b = run_adapt(head.model, shuffled, tiny_plan, tiny_model_config, tiny_views, store=store)
        assert parameter_hash(a.models["S2"]) == parameter_hash(b.models["S2"])

    def test_reuses_projection_head(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        pretrained, head = trained
        before = parameter_hash(pretrained.projection_head)
        result = run_adapt(
            head.model,
            target,
            tiny_plan,
            tiny_model_config,
            tiny_views,
            objective="dino",
            projection_head=pretrained.projection_head,
            store=store,
        )
        assert result.objectives == {"S2": "dino"}
        assert parameter_hash(pretrained.projection_head) == before

    def test_plate_scope_falls_back_to_single_image(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        result = run_adapt(
            head.model, target, tiny_plan, tiny_model_config, tiny_views, scope=AdaptScope("plate"), store=store
        )
        assert result.objectives == {"S2B1P1": "dino", "S2B2P1": "dino"}
        assert result.iterations == {"S2B1P1": 1, "S2B2P1": 1}

    def test_batch_scope_cross_batch_is_ineligible(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        with pytest.raises(PairIneligible):
            run_adapt(
                head.model, target, tiny_plan, tiny_model_config, tiny_views, scope=AdaptScope("batch"), store=store
            )

    def test_invalid_objective(self, trained, target, tiny_plan, tiny_model_config, tiny_views):
        _, head = trained
        with pytest.raises(ValueError, match="Invalid adaptation objective"):
            run_adapt(head.model, target, tiny_plan, tiny_model_config, tiny_views, objective="mae")

    def test_predict_adapted_covers_every_record(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        result = run_adapt(
            head.model,
            target,
            tiny_plan,
            tiny_model_config,
            tiny_views,
            scope=AdaptScope("batch"),
            objective="dino",
            store=store,
        )
        logits, records = predict_adapted(result, target, store=store)
        assert logits.shape == (len(target), target.class_count)
        assert [r.id for r in records] == [r.id for r in target.records]

    def test_batch_scope_shares_the_source_step_budget(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        # 32 target images at batch size 12: three steps per epoch in total.
        _, head = trained
        plan = dataclasses.replace(tiny_plan, adapt=dataclasses.replace(tiny_plan.adapt, batch_size=12))
        runs = {
            level: run_adapt(
                head.model, target, plan, tiny_model_config, tiny_views, scope=AdaptScope(level), objective="dino", store=store
            )
            for level in ("source", "batch", "plate")
        }
        assert runs["source"].iterations == {"S2": 3}
        assert sorted(runs["batch"].iterations.values()) == [1, 2]
        assert runs["batch"].total_iterations == runs["source"].total_iterations
        assert runs["plate"].total_iterations == runs["source"].total_iterations

    def test_steps_per_epoch_cap_applies_to_the_whole_target(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        adapt = dataclasses.replace(tiny_plan.adapt, epochs=2, batch_size=12, steps_per_epoch=1)
        plan = dataclasses.replace(tiny_plan, adapt=adapt)
        source = run_adapt(head.model, target, plan, tiny_model_config, tiny_views, objective="dino", store=store)
        batch = run_adapt(
            head.model, target, plan, tiny_model_config, tiny_views, scope=AdaptScope("batch"), objective="dino", store=store
        )
        assert source.total_iterations == 2
        assert batch.total_iterations == 2

    def test_adapt_checkpoint_carries_step_and_rng(self, tmp_path, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        record = RunRecord.create(tmp_path)
        result = run_adapt(head.model, target, tiny_plan, tiny_model_config, tiny_views, store=store, record=record)
        _, _, header = restore_dual(tmp_path / "checkpoints" / "adapt-source-S2.pt")
        assert header["step"] == result.iterations["S2"] == 2
        assert header["rng"] == rng_state(tiny_plan.seed, "adapt:source:S2", next_epoch=tiny_plan.adapt.epochs)
        assert RunRecord.load(tmp_path).progress["adapt:source:S2"] == {"step": 2, "rng": header["rng"]}

    def test_predict_adapted_rejects_uncovered_records(self, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        result = run_adapt(
            head.model,
            target,
            tiny_plan,
            tiny_model_config,
            tiny_views,
            scope=AdaptScope("plate", ("S2B1P1",)),
            objective="dino",
            store=store,
        )
        uncovered = next(r.id for r in target.records if r.batch == "S2B2")
        with pytest.raises(UncoveredRecords, match=f"plate scope for records: .*{re.escape(uncovered)}"):
            predict_adapted(result, target, store=store)

    def test_checkpoints_named_by_scope(self, tmp_path, trained, target, tiny_plan, tiny_model_config, tiny_views, store):
        _, head = trained
        record = RunRecord.create(tmp_path)
        run_adapt(head.model, target, tiny_plan, tiny_model_config, tiny_views, store=store, record=record)
        assert record.checkpoints == {"adapt:source:S2": "checkpoints/adapt-source-S2.pt"}


class TestTestTimeTraining:
    """Test cases for run_ttt."""

    @pytest.fixture
    def mae_model(self, source_splits, tiny_plan, tiny_model_config, tiny_views, store):
        train, val, _ = source_splits
        pretrained = run_pretrain(train, tiny_plan, tiny_model_config, tiny_views, objective="mae", store=store)
        head = run_head(pretrained.feature_extractor, train, val, tiny_plan, tiny_model_config, store=store)
        return head.model, pretrained.mae_head

    @pytest.fixture
    def batch(self, tiny_index):
        batch, _ = split_by_scope(tiny_index, "batch", ["S2B1"])
        return batch

    def test_zero_steps_equals_plain_inference(self, mae_model, batch, tiny_plan, store):
        dual, mae_head = mae_model
        plan = dataclasses.replace(tiny_plan, ttt=TTTConfig(steps=0))
        result = run_ttt(dual, mae_head, batch, plan, store=store)
        expected, records = predict(dual, batch, store=store)
        assert [r.id for r in result.records] == [r.id for r in records]
        assert all(r.moa_label is None for r in result.records)
        np.testing.assert_allclose(result.logits, expected, atol=1e-5)
        assert result.predictions.shape == (len(batch),)

    def test_every_image_starts_from_the_same_weights(self, mae_model, batch, tiny_plan, store):
        dual, mae_head = mae_model
        initial = parameter_hash(dual.feature_extractor)
        seen = []
        result = run_ttt(
            dual, mae_head, batch, tiny_plan, store=store, observer=lambda record, fe: seen.append(parameter_hash(fe))
        )
        assert result.steps == 1
        assert len(seen) == len(batch)
        assert set(seen) == {initial}
        assert parameter_hash(dual.feature_extractor) == initial


class TestSupervised:
    """Test cases for run_supervised."""

    def test_train_and_restore(self, tmp_path, source_splits, tiny_plan, tiny_model_config, store):
        train, val, test = source_splits
        record = RunRecord.create(tmp_path)
        result = run_supervised(train, val, tiny_plan, tiny_model_config, store=store, record=record)
        logits, _ = predict(result.model, test, store=store)
        assert logits.shape == (len(test), 2)
        model, config = restore_supervised(result.checkpoint)
        assert config == tiny_model_config
        restored, _ = predict(model, test, store=store)
        np.testing.assert_allclose(restored, logits, atol=1e-6)
        progress = RunRecord.load(tmp_path).progress["supervised"]
        assert progress["step"] == result.steps > 0
        assert progress["rng"]["keys"] == ["supervised"]

    def test_needs_labels(self, source_splits, tiny_plan, tiny_model_config):
        train, _, _ = source_splits
        with pytest.raises(NoLabels):
            run_supervised(train.without_labels(), None, tiny_plan, tiny_model_config)
