"""Torch datasets over a :class:`DatasetIndex`.

Every random choice is drawn from :func:`hci_coda.utils.seeding.stream`
keyed by (seed, tag, epoch, ordinal), so loaders are reproducible for any
worker count.
"""

from __future__ import annotations

import dataclasses
import threading
from collections.abc import Sequence
from typing import Literal

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from ..dataset import DatasetIndex, ImageRecord, load_image
from ..utils.seeding import stream, torch_generator
from ..views import (
    PairIndex,
    ViewConfig,
    ViewSet,
    build_pair_views,
    build_views,
    collate_views,
    sample_cross_batch_pair,
)

ViewMode = Literal["single", "pair"]


class ImageStore:
    """Decoded images cached as float32 tensors, keyed by record id."""

    def __init__(self, size: tuple[int, int] = (64, 64)) -> None:
        self.size = size
        self._cache: dict[str, torch.Tensor] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._cache)

    def get(self, record: ImageRecord) -> torch.Tensor:
        image = self._cache.get(record.id)
        if image is None:
            image = torch.from_numpy(load_image(record, self.size))
            with self._lock:
                self._cache[record.id] = image
        return image

    def stack(self, records: Sequence[ImageRecord]) -> torch.Tensor:
        return torch.stack([self.get(r) for r in records])


class LabeledImages(Dataset):
    """(image, label) pairs over the labelled records of an index."""

    def __init__(self, index: DatasetIndex, store: ImageStore) -> None:
        self.records = index.labeled
        self.store = store

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        record = self.records[i]
        return self.store.get(record), int(record.moa_label)  # ty: ignore[invalid-argument-type]


def _repeat_key(repeat: int) -> tuple[str, ...]:
    # Pass 0 keeps the plain epoch key.
    return ("repeat", str(repeat)) if repeat else ()


class ViewDataset(Dataset):
    """Multi-crop samples for self-distillation and MAE.

    In ``single`` mode item *i* is the views of the i-th record. In
    ``pair`` mode item *i* is the views of a freshly sampled cross-batch
    pair; the epoch length stays ``len(index)`` so both modes see the
    same number of samples per epoch.

    Only record ids, treatments and batches are read. Label fields are
    never touched.
    """

    def __init__(
        self,
        index: DatasetIndex,
        store: ImageStore,
        config: ViewConfig,
        *,
        mode: ViewMode = "single",
        seed: int = 0,
        tag: str = "views",
    ) -> None:
        self.records = index.records
        self.store = store
        self.config = config.for_pairs() if mode == "pair" else config
        self.mode = mode
        self.seed = seed
        self.tag = tag
        self.epoch = 0
        self.repeat = 0
        self.pairs = PairIndex.from_index(index) if mode == "pair" else None

    def set_epoch(self, epoch: int, repeat: int = 0) -> None:
        self.epoch = epoch
        self.repeat = repeat

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> ViewSet:
        rng = stream(self.seed, self.tag, self.epoch, *_repeat_key(self.repeat), i)
        if self.pairs is None:
            record = self.records[i]
            return build_views(self.store.get(record), self.config, rng, provenance=(record.id,))
        record_a, record_b = sample_cross_batch_pair(self.pairs, rng)
        return build_pair_views(
            self.store.get(record_a),
            self.store.get(record_b),
            self.config,
            rng,
            provenance=(record_a.id, record_b.id),
        )


class MaskedImages(Dataset):
    """One augmented full-size view per record, for MAE training."""

    def __init__(
        self, index: DatasetIndex, store: ImageStore, config: ViewConfig, *, seed: int = 0, tag: str = "mae"
    ) -> None:
        self.records = index.records
        self.store = store
        self.config = dataclasses.replace(config, global_views=1, local_views=0, blur_prob=0.0)
        self.seed = seed
        self.tag = tag
        self.epoch = 0
        self.repeat = 0

    def set_epoch(self, epoch: int, repeat: int = 0) -> None:
        self.epoch = epoch
        self.repeat = repeat

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> torch.Tensor:
        rng = stream(self.seed, self.tag, self.epoch, *_repeat_key(self.repeat), i)
        record = self.records[i]
        return build_views(self.store.get(record), self.config, rng).global_views[0]


def make_loader(
    dataset: Dataset,
    batch_size: int,
    *,
    shuffle: bool,
    seed: int = 0,
    tag: str = "loader",
    epoch: int = 0,
    repeat: int = 0,
) -> DataLoader:
    """Single-process loader; shuffling order is keyed by (seed, tag, epoch, repeat)."""
    collate = collate_views if isinstance(dataset, ViewDataset) else None
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=torch_generator(seed, tag, "order", epoch, *_repeat_key(repeat)) if shuffle else None,
        collate_fn=collate,
        num_workers=0,
    )


def random_labels(index: DatasetIndex, seed: int) -> dict[str, int]:
    """Random class per record, for label-blindness checks."""
    rng = stream(seed, "random-labels")
    k = max(index.class_count, 1)
    return {r.id: int(v) for r, v in zip(index.records, rng.integers(0, k, len(index)), strict=True)}


def labels_of(records: Sequence[ImageRecord]) -> np.ndarray:
    return np.array([r.moa_label if r.moa_label is not None else -1 for r in records])
