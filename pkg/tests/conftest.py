"""Shared fixtures: a tiny generated dataset and matching model, view and plan settings."""

import os
import sys

# Add the src directory to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import pytest
import structlog

from hci_coda.dataset import DatasetIndex, ImageRecord, ManifestSchema, load_manifest
from hci_coda.models import ModelConfig
from hci_coda.synthetic import GeneratorConfig, generate_dataset
from hci_coda.training.plan import PhaseSchedule, TrainPlan, TTTConfig
from hci_coda.views import ViewConfig

# 2 sources x 2 batches x 1 plate x 8 wells x 2 sites = 64 images of 16x16.
# Each source holds 32 images; batch sizes of 16 divide every scope evenly.
TINY_GENERATOR = {
    "sources": 2,
    "batches_per_source": 2,
    "plates_per_batch": 1,
    "wells_per_plate": 8,
    "sites_per_well": 2,
    "class_count": 2,
    "treatments_per_class": 2,
    "image_size": [16, 16],
    "channels": 3,
}

TINY_MODEL = {
    "image_size": 16,
    "channels": 3,
    "patch_size": 8,
    "embed_dim": 24,
    "depth": 2,
    "num_heads": 2,
    "classifier_dim": 24,
    "classifier_depth": 1,
    "classifier_heads": 2,
    "projection_dim": 16,
    "projection_hidden": 32,
    "projection_bottleneck": 8,
    "decoder_dim": 16,
    "decoder_depth": 1,
    "decoder_heads": 2,
}

TINY_VIEWS = {"global_views": 2, "local_views": 2, "global_size": 16, "local_size": 8}


def _tiny_config_data(output_dir, method="dual_dino"):
    return {
        "method": method,
        "seed": 0,
        "output_dir": str(output_dir),
        "dataset": {"generator": dict(TINY_GENERATOR)},
        "model": dict(TINY_MODEL),
        "views": dict(TINY_VIEWS),
        "plan": {
            "pretrain": {"epochs": 1, "lr": 0.001, "warmup_epochs": 0, "batch_size": 16},
            "head": {
                "epochs": 2,
                "lr": 0.001,
                "warmup_epochs": 0,
                "schedule": "plateau",
                "batch_size": 16,
            },
            "adapt": {"epochs": 1, "lr": 0.001, "warmup_epochs": 0, "batch_size": 16},
            "ttt": {"steps": 1, "lr": 0.0001},
            "val_fraction": 0.25,
            "test_fraction": 0.25,
        },
        "eval": {"seeds": [0], "probe_images": 8},
    }


@pytest.fixture
def tiny_config_data():
    """Factory of plain config mappings for CLI and config tests."""
    return _tiny_config_data


@pytest.fixture(autouse=True)
def _reset_structlog():
    """Keep structlog configuration from leaking between tests."""
    yield
    structlog.reset_defaults()


@pytest.fixture(scope="session")
def tiny_generator_config():
    return GeneratorConfig(**{**TINY_GENERATOR, "image_size": (16, 16)})


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_generator_config):
    """The tiny synthetic dataset, written once per session."""
    return generate_dataset(tiny_generator_config, tmp_path_factory.mktemp("tiny-data"))


@pytest.fixture(scope="session")
def tiny_index(tiny_dataset) -> DatasetIndex:
    return load_manifest(tiny_dataset.manifest, ManifestSchema(channel_count=3))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_views():
    return ViewConfig(**TINY_VIEWS)


@pytest.fixture
def tiny_plan():
    return TrainPlan(
        pretrain=PhaseSchedule(epochs=1, lr=1e-3, warmup_epochs=0, batch_size=16),
        head=PhaseSchedule(epochs=2, lr=1e-3, warmup_epochs=0, schedule="plateau", batch_size=16),
        adapt=PhaseSchedule(epochs=1, lr=1e-3, warmup_epochs=0, batch_size=16),
        objective="dino_cb",
        ttt=TTTConfig(steps=1, lr=1e-4),
        val_fraction=0.25,
        test_fraction=0.25,
        seed=0,
    )


@pytest.fixture
def record_factory():
    """Build in-memory ImageRecords without image files."""

    def make(
        record_id,
        source="S1",
        batch="S1B1",
        plate="S1B1P1",
        well="W000",
        site=0,
        treatment="T000",
        moa="moa00",
        moa_label=0,
    ):
        return ImageRecord(
            id=record_id,
            source=source,
            batch=batch,
            plate=plate,
            well=well,
            site=site,
            channel_paths=("a.png", "b.png", "c.png"),
            treatment=treatment,
            moa=moa,
            moa_label=moa_label,
        )

    return make
