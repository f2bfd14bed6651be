"""Multi-crop views and cross-batch pair sampling.

Views are built with ``torchvision.transforms.v2.functional`` from crop
and augmentation parameters drawn from a numpy ``Generator``, so every
ViewSet is a pure function of its image and rng state.
"""

from __future__ import annotations

import dataclasses
import math
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
import structlog
import torch
from torchvision.transforms.v2 import functional as TF

from .dataset import DatasetIndex, ImageRecord
from .exceptions import CodaError

logger = structlog.get_logger()

__all__ = [
    "ImageTooSmall",
    "NoEligibleTreatment",
    "PairIndex",
    "ViewBatch",
    "ViewConfig",
    "ViewSet",
    "build_pair_views",
    "build_views",
    "collate_views",
    "sample_cross_batch_pair",
]


class ViewError(CodaError):
    """Base class for view-pipeline errors."""


class ImageTooSmall(ViewError, ValueError):
    """Raised when an image is smaller than the requested global crop."""


class NoEligibleTreatment(ViewError):
    """Raised when no treatment spans two or more batches."""


def _check_scale(name: str, bounds: tuple[float, float]) -> None:
    low, high = bounds
    if not 0 < low <= high <= 1:
        raise ValueError(f"{name}: must satisfy 0 < low <= high <= 1, got {bounds}")


@dataclass(frozen=True)
class ViewConfig:
    """Multi-crop settings.

    Defaults are the single-image DINO layout (2 global + 6 local views);
    :meth:`for_pairs` gives the cross-batch layout of one global and three
    local views per pair member.
    """

    global_views: int = 2
    local_views: int = 6
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    global_size: int = 64
    local_size: int = 32
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip: bool = True
    intensity_jitter: float = 0.2
    channel_dropout: float = 0.1
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self) -> None:
        if self.global_views < 1:
            raise ValueError("global_views: must be >= 1")
        if self.local_views < 0:
            raise ValueError("local_views: must be >= 0")
        if self.local_size >= self.global_size:
            raise ValueError("local_size: must be smaller than global_size")
        _check_scale("global_scale", self.global_scale)
        _check_scale("local_scale", self.local_scale)
        for name in ("intensity_jitter", "channel_dropout", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name}: must be in [0, 1]")

    def for_pairs(self) -> ViewConfig:
        """Same augmentations with 1 global + 3 local views per image."""
        return dataclasses.replace(self, global_views=1, local_views=3)

    def plain(self) -> ViewConfig:
        """Same layout with every augmentation disabled."""
        return dataclasses.replace(self, flip=False, intensity_jitter=0.0, channel_dropout=0.0, blur_prob=0.0)


@dataclass(frozen=True)
class ViewSet:
    """Views of one image or of one cross-batch pair."""

    global_views: tuple[torch.Tensor, ...]
    local_views: tuple[torch.Tensor, ...]
    provenance: tuple[str, ...]

    @property
    def views(self) -> tuple[torch.Tensor, ...]:
        """All views, globals first."""
        return self.global_views + self.local_views

    def __len__(self) -> int:
        return len(self.global_views) + len(self.local_views)


@dataclass(frozen=True)
class ViewBatch:
    """Position-wise stack of ViewSets: one ``(B, C, h, w)`` tensor per view slot."""

    global_views: tuple[torch.Tensor, ...]
    local_views: tuple[torch.Tensor, ...]
    provenance: tuple[tuple[str, ...], ...] = field(default=())

    @property
    def views(self) -> tuple[torch.Tensor, ...]:
        return self.global_views + self.local_views

    def __len__(self) -> int:
        return len(self.global_views) + len(self.local_views)

    def to(self, device: torch.device | str, dtype: torch.dtype | None = None) -> ViewBatch:
        return ViewBatch(
            tuple(v.to(device=device, dtype=dtype) for v in self.global_views),
            tuple(v.to(device=device, dtype=dtype) for v in self.local_views),
            self.provenance,
        )


def collate_views(viewsets: Sequence[ViewSet]) -> ViewBatch:
    """Stack the i-th view of every ViewSet into one tensor (DataLoader collate_fn)."""
    if not viewsets:
        raise ValueError("collate_views needs at least one ViewSet")
    n_global = len(viewsets[0].global_views)
    n_local = len(viewsets[0].local_views)
    if any(len(v.global_views) != n_global or len(v.local_views) != n_local for v in viewsets):
        raise ValueError("ViewSets in one batch must share their view layout")
    return ViewBatch(
        tuple(torch.stack([v.global_views[i] for v in viewsets]) for i in range(n_global)),
        tuple(torch.stack([v.local_views[i] for v in viewsets]) for i in range(n_local)),
        tuple(v.provenance for v in viewsets),
    )


# ---------------------------------------------------------------------------
# Crops and augmentations
# ---------------------------------------------------------------------------


def _crop_box(
    height: int,
    width: int,
    scale: tuple[float, float],
    ratio: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[int, int, int, int]:
    """Random-resized-crop box, same sampling as torchvision's RandomResizedCrop."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w

    # Fallback to central crop
    in_ratio = width / height
    if in_ratio < min(ratio):
        w, h = width, int(round(width / min(ratio)))
    elif in_ratio > max(ratio):
        h, w = height, int(round(height * max(ratio)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _augment(
    view: torch.Tensor, config: ViewConfig, rng: np.random.Generator, blur: bool
) -> torch.Tensor:
    if config.flip:
        if rng.random() < 0.5:
            view = TF.horizontal_flip(view)
        if rng.random() < 0.5:
            view = TF.vertical_flip(view)
    if config.intensity_jitter > 0:
        factors = rng.uniform(
            1 - config.intensity_jitter, 1 + config.intensity_jitter, size=view.shape[0]
        )
        view = view * torch.as_tensor(factors, dtype=view.dtype)[:, None, None]
    if config.channel_dropout > 0 and view.shape[0] > 1:
        drop = rng.random(view.shape[0]) < config.channel_dropout
        if drop.all():
            drop[int(rng.integers(0, view.shape[0]))] = False
        keep = torch.as_tensor(~drop, dtype=view.dtype)[:, None, None]
        view = view * keep
    if blur and config.blur_prob > 0 and rng.random() < config.blur_prob:
        sigma = float(rng.uniform(*config.blur_sigma))
        kernel = 2 * math.ceil(3 * sigma) + 1
        kernel = min(kernel, 2 * (min(view.shape[-2:]) // 2) - 1)
        view = TF.gaussian_blur(view, kernel_size=[kernel, kernel], sigma=[sigma, sigma])
    return view.clamp(0.0, 1.0)


def _crop(
    image: torch.Tensor,
    size: int,
    scale: tuple[float, float],
    config: ViewConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    top, left, h, w = _crop_box(image.shape[-2], image.shape[-1], scale, config.ratio, rng)
    return TF.resized_crop(image, top, left, h, w, [size, size], antialias=True)


def build_views(
    image: np.ndarray | torch.Tensor,
    config: ViewConfig,
    rng: np.random.Generator,
    provenance: Sequence[str] = (),
) -> ViewSet:
    """Build ``config.global_views`` global and ``config.local_views`` local views.

    Blur is only ever applied to the first global view.

    Raises:
        ImageTooSmall: The image is smaller than ``config.global_size``.
    """
    tensor = torch.as_tensor(image, dtype=torch.float32)
    if tensor.ndim != 3:
        raise ImageTooSmall(f"expected a (C, H, W) image, got shape {tuple(tensor.shape)}")
    if min(tensor.shape[-2:]) < config.global_size:
        raise ImageTooSmall(
            f"image {tuple(tensor.shape[-2:])} is smaller than global size {config.global_size}"
        )
    globals_ = tuple(
        _augment(_crop(tensor, config.global_size, config.global_scale, config, rng), config, rng, blur=i == 0)
        for i in range(config.global_views)
    )
    locals_ = tuple(
        _augment(_crop(tensor, config.local_size, config.local_scale, config, rng), config, rng, blur=False)
        for _ in range(config.local_views)
    )
    return ViewSet(globals_, locals_, tuple(provenance))


def build_pair_views(
    image_a: np.ndarray | torch.Tensor,
    image_b: np.ndarray | torch.Tensor,
    config: ViewConfig,
    rng: np.random.Generator,
    provenance: Sequence[str] = (),
) -> ViewSet:
    """Views of a cross-batch pair: ``[global_a, global_b, locals_a..., locals_b...]``.

    *config* is used as given; pass ``config.for_pairs()`` for the
    one-global, three-local layout.
    """
    a = build_views(image_a, config, rng)
    b = build_views(image_b, config, rng)
    return ViewSet(
        a.global_views + b.global_views,
        a.local_views + b.local_views,
        tuple(provenance),
    )


# ---------------------------------------------------------------------------
# Cross-batch pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairIndex:
    """Records grouped by (treatment, batch) for cross-batch pair sampling."""

    index: DatasetIndex
    groups: Mapping[tuple[str, str], tuple[str, ...]]
    batches: Mapping[str, tuple[str, ...]]
    eligible: tuple[str, ...]

    @classmethod
    def from_index(cls, index: DatasetIndex) -> PairIndex:
        groups: dict[tuple[str, str], list[str]] = defaultdict(list)
        for rec in index.records:
            groups[(rec.treatment, rec.batch)].append(rec.id)
        batches: dict[str, list[str]] = defaultdict(list)
        for treatment, batch in sorted(groups):
            batches[treatment].append(batch)
        eligible = tuple(sorted(t for t, bs in batches.items() if len(bs) >= 2))
        return cls(
            index=index,
            groups=MappingProxyType({k: tuple(sorted(v)) for k, v in groups.items()}),
            batches=MappingProxyType({t: tuple(bs) for t, bs in batches.items()}),
            eligible=eligible,
        )

    @property
    def is_eligible(self) -> bool:
        return bool(self.eligible)


def sample_cross_batch_pair(
    pairs: PairIndex, rng: np.random.Generator
) -> tuple[ImageRecord, ImageRecord]:
    """Draw two records of one treatment from two different batches.

    The treatment is uniform over eligible treatments, the two batches
    are drawn without replacement, and each record is uniform within its
    batch.

    Raises:
        NoEligibleTreatment: No treatment spans two batches.
    """
    if not pairs.eligible:
        raise NoEligibleTreatment(
            "no treatment spans two or more batches; cross-batch pairs are impossible"
        )
    treatment = pairs.eligible[int(rng.integers(len(pairs.eligible)))]
    batch_a, batch_b = rng.choice(pairs.batches[treatment], size=2, replace=False)
    ids_a = pairs.groups[(treatment, str(batch_a))]
    ids_b = pairs.groups[(treatment, str(batch_b))]
    record_a = pairs.index.get(ids_a[int(rng.integers(len(ids_a)))])
    record_b = pairs.index.get(ids_b[int(rng.integers(len(ids_b)))])
    return record_a, record_b
