"""Longer runs over the full method list and the desk-scale phenomena.

Deselected by default; run with ``-m slow``.
"""

import dataclasses
import hashlib
import os

import numpy as np
import pytest

from hci_coda.config import load_config, preset_path
from hci_coda.dataset import ManifestSchema, load_manifest, split_by_scope
from hci_coda.evaluation.cka import layerwise_cka
from hci_coda.synthetic import generate_dataset
from hci_coda.training.data import ImageStore
from hci_coda.training.matrix import METHODS, run_granularity, run_matrix
from hci_coda.training.phases import predict, restore_dual, run_adapt, run_head, run_pretrain, run_ttt
from hci_coda.training.plan import TTTConfig

pytestmark = [pytest.mark.slow, pytest.mark.acceptance]


def test_full_grid_is_reproducible(tmp_path, tiny_index, tiny_plan, tiny_model_config, tiny_views):
    digests = []
    for name in ("first", "second"):
        result = run_matrix(
            tiny_index, tiny_plan, tiny_model_config, tiny_views, methods=METHODS, out_dir=tmp_path / name
        )
        # supervised, dual_* in-domain and cross cells plus adaptive cross cells
        assert len(result.cells) == 4 * 4 + 3 * 2
        digests.append(hashlib.sha256((tmp_path / name / "metrics.csv").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_ttt_without_steps_reproduces_the_dual_model(tiny_index, tiny_plan, tiny_model_config, tiny_views):
    source, target = split_by_scope(tiny_index, "source", ["S1"])
    pretrained = run_pretrain(source, tiny_plan, tiny_model_config, tiny_views, objective="mae")
    head = run_head(pretrained.feature_extractor, source, None, tiny_plan, tiny_model_config)
    plan = dataclasses.replace(tiny_plan, ttt=TTTConfig(steps=0))
    result = run_ttt(head.model, pretrained.mae_head, target, plan)
    expected, _ = predict(head.model, target)
    np.testing.assert_array_equal(result.predictions, expected.argmax(axis=1))


# ---------------------------------------------------------------------------
# Desk-scale phenomena, seed-averaged
# ---------------------------------------------------------------------------

BASELINES = ["supervised", "dual_dino", "dual_cb"]


@pytest.fixture(scope="module")
def desk():
    return load_config(preset_path("desk"))


@pytest.fixture(scope="module")
def desk_index(desk, tmp_path_factory):
    dataset = generate_dataset(desk.dataset.generator, tmp_path_factory.mktemp("desk-data"))
    return load_manifest(dataset.manifest, ManifestSchema(channel_count=desk.model.channels))


@pytest.fixture(scope="module")
def desk_grid(desk, desk_index, tmp_path_factory):
    """Seed-mean accuracy per (source, target) row and method column, plus the grid directory."""
    out = tmp_path_factory.mktemp("desk-grid")
    result = run_matrix(
        desk_index,
        desk.plan,
        desk.model,
        desk.views,
        methods=desk.eval.methods,
        seeds=desk.eval.seeds,
        out_dir=out,
        workers=min(4, os.cpu_count() or 1),
    )
    assert not result.failures
    accuracy = result.metrics[result.metrics["metric"] == "accuracy"]
    means = accuracy.groupby(["source", "target", "method"])["value"].mean().unstack("method")
    return means, out


def _transfer_rows(means):
    sources = means.index.get_level_values("source")
    targets = means.index.get_level_values("target")
    return means[sources != targets], means[sources == targets]


def _head(out, seed, source, objective):
    return restore_dual(out / "runs" / f"seed{seed}" / source / "checkpoints" / f"head-{objective}.pt")[0]


def test_desk_generalization_gap(desk_grid):
    off, diagonal = _transfer_rows(desk_grid[0])
    assert off["supervised"].mean() <= 0.6 * diagonal["supervised"].mean()


def test_desk_method_ordering(desk_grid):
    off, _ = _transfer_rows(desk_grid[0])
    assert (off["coda"] > off["oda"]).all()
    assert (off["oda"] > off[BASELINES].max(axis=1)).all()
    assert (off["coda"] - off["supervised"]).mean() >= 0.10


def test_desk_ttt_never_beats_oda(desk_grid):
    off, _ = _transfer_rows(desk_grid[0])
    assert (off["ttt"] <= off["oda"]).all()


def test_desk_adaptation_aligns_layers_with_target_model(desk, desk_index, desk_grid):
    _, out = desk_grid
    source, target = desk_index.ids_at("source")[:2]
    target_index, _ = split_by_scope(desk_index, "source", [target])
    store = ImageStore((desk.model.image_size, desk.model.image_size))
    images = store.stack(sorted(target_index.records, key=lambda r: r.id)[: desk.eval.probe_images])
    mode = desk.eval.cka_token_mode
    before, after = [], []
    for seed in desk.eval.seeds:
        plan = dataclasses.replace(desk.plan, seed=seed)
        start = _head(out, seed, source, "dino_cb")
        reference = _head(out, seed, target, "dino_cb")
        adapted = run_adapt(
            start, target_index, plan, desk.model, desk.views, objective="dino_cb", store=store
        ).models[target]
        before.append(layerwise_cka(start, reference, images, mode).diagonal_mean)
        after.append(layerwise_cka(adapted, reference, images, mode).diagonal_mean)
    assert np.mean(after) > np.mean(before)


def test_desk_batch_scope_at_least_source_scope(desk, desk_index, desk_grid):
    _, out = desk_grid
    source, target = desk_index.ids_at("source")[:2]
    target_index, _ = split_by_scope(desk_index, "source", [target])
    store = ImageStore((desk.model.image_size, desk.model.image_size))
    scores = {"source": [], "batch": []}
    for seed in desk.eval.seeds:
        frame = run_granularity(
            _head(out, seed, source, "dino"),
            target_index,
            dataclasses.replace(desk.plan, seed=seed),
            desk.model,
            desk.views,
            levels=("source", "batch"),
            modes=("subset",),
            objective="dino",
            store=store,
        )
        accuracy = frame[(frame["metric"] == "accuracy") & (frame["mode"] == "subset")]
        for level in scores:
            scores[level].append(float(accuracy[accuracy["level"] == level]["value"].iloc[0]))
    assert np.mean(scores["batch"]) >= np.mean(scores["source"]) - 0.01
