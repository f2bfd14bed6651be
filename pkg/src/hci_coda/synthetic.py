"""Desk-scale synthetic imaging benchmark with controllable batch effects.

Each image carries a class ("biological") signal built from a spatial
pattern and a channel intensity profile, and is then corrupted by a fixed
nuisance pipeline whose parameters are drawn per batch and per source:

    source channel mixing -> batch gain/offset -> batch blur
    -> source gamma -> additive noise -> clip to [0, 1]

Classes share spatial patterns in pairs and differ by channel profile, so
batch-level channel gains can make one class look like another. That is
what makes a model trained on one source degrade on another.

The generator writes 8-bit PNG channel files, a manifest in the
:mod:`hci_coda.dataset` schema, and a JSON sidecar recording every
nuisance parameter and class assignment. Class templates are stored next
to the sidecar so oracle accuracies can be computed without re-deriving
anything.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import structlog
from PIL import Image
from scipy import ndimage

from .dataset import DatasetIndex, ImageRecord, ManifestSchema, write_manifest
from .exceptions import CodaError, IOFailure
from .utils.seeding import stream

logger = structlog.get_logger()

__all__ = [
    "GeneratedDataset",
    "GeneratorConfig",
    "InvalidGeneratorConfig",
    "NuisanceParams",
    "NuisanceStrengths",
    "apply_nuisance",
    "class_templates",
    "cross_batch_violations",
    "generate_dataset",
    "generator_config_from_dict",
    "load_sidecar",
    "oracle_accuracy",
    "render_class_signal",
]


class InvalidGeneratorConfig(CodaError, ValueError):
    """Raised when a generator configuration violates its invariants."""


def _check_range(name: str, bounds: tuple[float, float]) -> None:
    low, high = bounds
    if low > high:
        raise InvalidGeneratorConfig(f"{name}: low {low} must be <= high {high}")


@dataclass(frozen=True)
class NuisanceStrengths:
    """Ranges from which per-batch and per-source nuisance params are drawn."""

    channel_gain_range: tuple[float, float] = (0.55, 1.6)
    channel_offset_range: tuple[float, float] = (-0.08, 0.08)
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    noise_sigma: float = 0.03
    source_gamma_range: tuple[float, float] = (0.6, 1.6)
    mixing_strength: float = 0.15

    def __post_init__(self) -> None:
        for name in (
            "channel_gain_range",
            "channel_offset_range",
            "blur_sigma_range",
            "source_gamma_range",
        ):
            _check_range(name, getattr(self, name))
        if self.channel_gain_range[0] <= 0:
            raise InvalidGeneratorConfig("channel_gain_range: gains must be > 0")
        if self.source_gamma_range[0] <= 0:
            raise InvalidGeneratorConfig("source_gamma_range: gamma must be > 0")
        if self.blur_sigma_range[0] < 0 or self.noise_sigma < 0:
            raise InvalidGeneratorConfig("blur and noise sigmas must be >= 0")
        if not 0 <= self.mixing_strength < 1:
            raise InvalidGeneratorConfig("mixing_strength must be in [0, 1)")


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape of a synthetic dataset.

    Every plate holds every treatment (``wells_per_plate`` must be at
    least ``class_count * treatments_per_class``), so each treatment spans
    all batches of all sources.
    """

    sources: int = 4
    batches_per_source: int = 4
    plates_per_batch: int = 1
    wells_per_plate: int = 32
    sites_per_well: int = 8
    class_count: int = 8
    treatments_per_class: int = 2
    image_size: tuple[int, int] = (64, 64)
    channels: int = 3
    nuisance: NuisanceStrengths = field(default_factory=NuisanceStrengths)
    jitter: bool = True
    keep_float: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        minima = {
            "sources": 2,
            "batches_per_source": 2,
            "plates_per_batch": 1,
            "wells_per_plate": 1,
            "sites_per_well": 1,
            "class_count": 2,
            "treatments_per_class": 1,
            "channels": 1,
        }
        for name, low in minima.items():
            if getattr(self, name) < low:
                raise InvalidGeneratorConfig(f"{name}: must be >= {low}")
        if self.wells_per_plate < self.treatment_count:
            raise InvalidGeneratorConfig(
                f"wells_per_plate: must be >= class_count * treatments_per_class "
                f"({self.treatment_count})"
            )
        if min(self.image_size) < 8:
            raise InvalidGeneratorConfig("image_size: must be at least 8x8")

    @property
    def treatment_count(self) -> int:
        return self.class_count * self.treatments_per_class

    @property
    def record_count(self) -> int:
        return (
            self.sources
            * self.batches_per_source
            * self.plates_per_batch
            * self.wells_per_plate
            * self.sites_per_well
        )


@dataclass(frozen=True)
class NuisanceParams:
    """Parameters of one nuisance transform (batch part + source part)."""

    gains: tuple[float, ...]
    offsets: tuple[float, ...]
    blur_sigma: float
    gamma: float
    mixing: tuple[tuple[float, ...], ...]
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if any(g <= 0 for g in self.gains):
            raise InvalidGeneratorConfig("gains must be > 0")
        if self.gamma <= 0:
            raise InvalidGeneratorConfig("gamma must be > 0")
        if not np.allclose(np.sum(self.mixing, axis=1), 1.0, atol=1e-9):
            raise InvalidGeneratorConfig("mixing matrix rows must sum to 1")

    @classmethod
    def identity(cls, channels: int) -> NuisanceParams:
        return cls(
            gains=(1.0,) * channels,
            offsets=(0.0,) * channels,
            blur_sigma=0.0,
            gamma=1.0,
            mixing=tuple(
                tuple(1.0 if i == j else 0.0 for j in range(channels))
                for i in range(channels)
            ),
            noise_sigma=0.0,
        )


# ---------------------------------------------------------------------------
# Class signal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _ClassRecipe:
    frequency: tuple[float, float]
    phase: float
    blob_centres: tuple[tuple[float, float], ...]
    blob_sigma: float
    profile: tuple[float, ...]


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    span = noise.max() - noise.min()
    return (noise - noise.min()) / span if span > 0 else np.zeros(shape)


@lru_cache(maxsize=8)
def _recipes(config: GeneratorConfig) -> list[_ClassRecipe]:
    """Class recipes: pairs of classes share a spatial pattern."""
    n_patterns = max(1, math.ceil(config.class_count / 2))
    height, width = config.image_size
    patterns = []
    for p in range(n_patterns):
        rng = stream(config.seed, "pattern", p)
        angle = np.pi * p / n_patterns + rng.uniform(-0.1, 0.1)
        cycles = rng.uniform(2.0, 5.0)
        blobs = tuple(
            (float(rng.uniform(0.15, 0.85) * height), float(rng.uniform(0.15, 0.85) * width))
            for _ in range(3)
        )
        patterns.append(
            (
                (cycles * np.cos(angle), cycles * np.sin(angle)),
                float(rng.uniform(0, 2 * np.pi)),
                blobs,
                float(rng.uniform(0.06, 0.12) * min(height, width)),
            )
        )

    recipes = []
    for k in range(config.class_count):
        freq, phase, blobs, sigma = patterns[k % n_patterns]
        emphasis = (k // n_patterns) % config.channels
        profile = tuple(
            1.0 if c == emphasis else 0.6 for c in range(config.channels)
        )
        recipes.append(
            _ClassRecipe(
                frequency=(float(freq[0]), float(freq[1])),
                phase=phase,
                blob_centres=blobs,
                blob_sigma=sigma,
                profile=profile,
            )
        )
    return recipes


@lru_cache(maxsize=8)
def _base_texture(config: GeneratorConfig) -> np.ndarray:
    rng = stream(config.seed, "base")
    height, width = config.image_size
    return np.stack(
        [_smooth_field(rng, (height, width), sigma=height / 8) for _ in range(config.channels)]
    )


def render_class_signal(
    k: int,
    rng: np.random.Generator,
    config: GeneratorConfig | None = None,
    *,
    jitter: bool | None = None,
) -> np.ndarray:
    """Render the clean ``(C, H, W)`` signal of class *k* in ``[0, 1]``.

    Args:
        k: Class index, ``< config.class_count``.
        rng: Per-sample stream; only consumed when jitter is on.
        config: Generator shape. Defaults to :class:`GeneratorConfig`.
        jitter: Override ``config.jitter``. Without jitter the result is
            the class template.

    Raises:
        InvalidGeneratorConfig: *k* is out of range.
    """
    config = config or GeneratorConfig()
    if not 0 <= k < config.class_count:
        raise InvalidGeneratorConfig(
            f"class {k} out of range for class_count {config.class_count}"
        )
    jitter = config.jitter if jitter is None else jitter
    recipe = _recipes(config)[k]
    height, width = config.image_size
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    amp, phase_shift, shift = 1.0, 0.0, np.zeros(2)
    if jitter:
        amp = rng.uniform(0.85, 1.15)
        phase_shift = rng.uniform(-0.3, 0.3)
        shift = rng.uniform(-1.5, 1.5, size=2)

    fy, fx = recipe.frequency
    grating = 0.5 + 0.5 * np.sin(
        2 * np.pi * (fx * xx / width + fy * yy / height) + recipe.phase + phase_shift
    )
    blobs = np.zeros((height, width))
    for cy, cx in recipe.blob_centres:
        d2 = (yy - cy - shift[0]) ** 2 + (xx - cx - shift[1]) ** 2
        blobs += np.exp(-d2 / (2 * recipe.blob_sigma**2))
    pattern = 0.5 * grating + 0.5 * np.clip(blobs, 0.0, 1.0)

    base = _base_texture(config)
    image = np.stack(
        [
            0.1 + 0.2 * base[c] + 0.6 * amp * recipe.profile[c] * pattern
            for c in range(config.channels)
        ]
    )
    if jitter:
        image += 0.03 * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0)


def class_templates(config: GeneratorConfig) -> np.ndarray:
    """Jitter-free signals of every class, shape ``(K, C, H, W)``."""
    rng = stream(config.seed, "templates")
    return np.stack(
        [render_class_signal(k, rng, config, jitter=False) for k in range(config.class_count)]
    )


def oracle_accuracy(
    images: np.ndarray, classes: np.ndarray, templates: np.ndarray
) -> float:
    """Accuracy of the nearest-template (max Pearson correlation) classifier."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    refs = templates.reshape(len(templates), -1).astype(np.float64)
    flat = flat - flat.mean(axis=1, keepdims=True)
    refs = refs - refs.mean(axis=1, keepdims=True)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True) + 1e-12
    refs /= np.linalg.norm(refs, axis=1, keepdims=True) + 1e-12
    predicted = np.argmax(flat @ refs.T, axis=1)
    return float(np.mean(predicted == np.asarray(classes)))


# ---------------------------------------------------------------------------
# Nuisance
# ---------------------------------------------------------------------------


def apply_nuisance(
    clean: np.ndarray, params: NuisanceParams, rng: np.random.Generator
) -> np.ndarray:
    """Corrupt a clean ``(C, H, W)`` image; the output lies in ``[0, 1]``.

    Identity params (unit gains, zero offsets, no blur, unit gamma,
    identity mixing, no noise) return the input unchanged.
    """
    channels = clean.shape[0]
    if len(params.gains) != channels or len(params.mixing) != channels:
        raise InvalidGeneratorConfig(
            f"nuisance params are for {len(params.gains)} channels, image has {channels}"
        )
    x = np.einsum("ij,jhw->ihw", np.asarray(params.mixing), clean)
    x = x * np.asarray(params.gains)[:, None, None] + np.asarray(params.offsets)[:, None, None]
    if params.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(0, params.blur_sigma, params.blur_sigma), mode="reflect")
    if params.gamma != 1.0:
        x = np.clip(x, 0.0, None) ** params.gamma
    if params.noise_sigma > 0:
        x = x + rng.normal(0.0, params.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


def _source_params(config: GeneratorConfig, source: str) -> dict:
    rng = stream(config.seed, "source", source)
    c = config.channels
    strength = config.nuisance.mixing_strength
    off_diag = rng.uniform(0.0, 1.0, size=(c, c))
    np.fill_diagonal(off_diag, 0.0)
    rows = off_diag.sum(axis=1, keepdims=True)
    off_diag = np.divide(off_diag, rows, out=np.zeros_like(off_diag), where=rows > 0)
    mixing = (1 - strength) * np.eye(c) + strength * off_diag if c > 1 else np.eye(1)
    return {
        "gamma": float(rng.uniform(*config.nuisance.source_gamma_range)),
        "mixing": [[float(v) for v in row] for row in mixing],
    }


def _batch_params(config: GeneratorConfig, batch: str) -> dict:
    rng = stream(config.seed, "batch", batch)
    c = config.channels
    return {
        "gains": [float(v) for v in rng.uniform(*config.nuisance.channel_gain_range, size=c)],
        "offsets": [float(v) for v in rng.uniform(*config.nuisance.channel_offset_range, size=c)],
        "blur_sigma": float(rng.uniform(*config.nuisance.blur_sigma_range)),
    }


def _nuisance_for(source_p: dict, batch_p: dict, noise_sigma: float = 0.0) -> NuisanceParams:
    return NuisanceParams(
        gains=tuple(batch_p["gains"]),
        offsets=tuple(batch_p["offsets"]),
        blur_sigma=batch_p["blur_sigma"],
        gamma=source_p["gamma"],
        mixing=tuple(tuple(row) for row in source_p["mixing"]),
        noise_sigma=noise_sigma,
    )


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratedDataset:
    manifest: Path
    sidecar: Path
    templates: Path
    ground_truth: Path | None = None


def _save_png(array: np.ndarray, path: Path) -> None:
    quantized = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized).save(path, format="PNG", optimize=False)


def _config_json(config: GeneratorConfig) -> dict:
    raw = asdict(config)
    raw["image_size"] = list(config.image_size)
    return raw


def generate_dataset(config: GeneratorConfig, out_dir: str | Path) -> GeneratedDataset:
    """Write a synthetic dataset to *out_dir*.

    Layout::

        out_dir/manifest.csv
        out_dir/ground_truth.json      # sidecar: nuisance params, classes
        out_dir/templates.npy          # (K, C, H, W) jitter-free signals
        out_dir/ground_truth.npz       # float images, only with keep_float
        out_dir/images/<plate>/<well>_s<site>_c<channel>.png

    Returns:
        Paths of everything written.

    Raises:
        IOFailure: *out_dir* or a file inside it cannot be written.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "images").mkdir(exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"Cannot create output directory {root}: {exc}") from exc

    moa_names = [f"moa{k:02d}" for k in range(config.class_count)]
    treatments = [f"T{t:03d}" for t in range(config.treatment_count)]
    sidecar: dict = {
        "seed": config.seed,
        "config": _config_json(config),
        "sources": {},
        "batches": {},
        "records": {},
    }
    records: list[ImageRecord] = []
    floats: dict[str, np.ndarray] = {}

    try:
        for s in range(config.sources):
            source = f"S{s + 1}"
            source_p = _source_params(config, source)
            sidecar["sources"][source] = source_p
            for b in range(config.batches_per_source):
                batch = f"{source}B{b + 1}"
                batch_p = _batch_params(config, batch)
                sidecar["batches"][batch] = {"source": source, **batch_p}
                params = _nuisance_for(source_p, batch_p, config.nuisance.noise_sigma)
                for p in range(config.plates_per_batch):
                    plate = f"{batch}P{p + 1}"
                    plate_dir = root / "images" / plate
                    plate_dir.mkdir(parents=True, exist_ok=True)
                    for w in range(config.wells_per_plate):
                        well = f"W{w:03d}"
                        t = w % config.treatment_count
                        k = t % config.class_count
                        for site in range(config.sites_per_well):
                            record_id = f"{plate}-{well}-s{site}"
                            rng = stream(config.seed, "record", record_id)
                            clean = render_class_signal(k, rng, config)
                            image = apply_nuisance(clean, params, rng)
                            paths = []
                            for c in range(config.channels):
                                path = plate_dir / f"{well}_s{site}_c{c}.png"
                                _save_png(image[c], path)
                                paths.append(str(path.resolve()))
                            if config.keep_float:
                                floats[record_id] = image.astype(np.float32)
                            sidecar["records"][record_id] = k
                            records.append(
                                ImageRecord(
                                    id=record_id,
                                    source=source,
                                    batch=batch,
                                    plate=plate,
                                    well=well,
                                    site=site,
                                    channel_paths=tuple(paths),
                                    treatment=treatments[t],
                                    moa=moa_names[k],
                                    moa_label=k,
                                )
                            )

        treatment_to_label = {treatments[t]: t % config.class_count for t in range(config.treatment_count)}
        index = DatasetIndex.from_records(records, moa_names, treatment_to_label, config.channels)
        manifest = write_manifest(index, root / "manifest.csv", ManifestSchema(config.channels))
        templates_path = root / "templates.npy"
        np.save(templates_path, class_templates(config).astype(np.float32))
        sidecar_path = root / "ground_truth.json"
        sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
        gt_path = None
        if config.keep_float:
            gt_path = root / "ground_truth.npz"
            np.savez(gt_path, **floats)
    except OSError as exc:
        raise IOFailure(f"Cannot write synthetic dataset to {root}: {exc}") from exc

    logger.info(
        "synthetic dataset written",
        out_dir=str(root),
        records=len(records),
        sources=config.sources,
        classes=config.class_count,
    )
    return GeneratedDataset(manifest, sidecar_path, templates_path, gt_path)


def cross_batch_violations(index: DatasetIndex) -> list[tuple[str, str]]:
    """(source, treatment) pairs whose images span fewer than two batches."""
    batches: dict[tuple[str, str], set[str]] = defaultdict(set)
    for rec in index.records:
        batches[(rec.source, rec.treatment)].add(rec.batch)
    return sorted(key for key, seen in batches.items() if len(seen) < 2)


def load_sidecar(path: str | Path) -> dict:
    """Read a generator sidecar and rebuild its :class:`NuisanceParams`.

    Returns the raw JSON with an extra ``"nuisance"`` mapping of
    batch id to :class:`NuisanceParams`.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    noise = raw["config"]["nuisance"]["noise_sigma"]
    raw["nuisance"] = {
        batch: _nuisance_for(raw["sources"][info["source"]], info, noise)
        for batch, info in raw["batches"].items()
    }
    return raw


def generator_config_from_dict(data: dict) -> GeneratorConfig:
    """Inverse of the ``config`` block stored in the sidecar."""
    data = dict(data)
    nuisance = data.pop("nuisance", {}) or {}
    nuisance = {k: tuple(v) if isinstance(v, list) else v for k, v in nuisance.items()}
    if "image_size" in data:
        data["image_size"] = tuple(data["image_size"])
    return GeneratorConfig(nuisance=NuisanceStrengths(**nuisance), **data)
