"""Metadata-aware dataset model for hierarchical multi-channel imaging data.

Records are organised as source > batch > plate > well > site, one record
per imaging site, with one image file per channel. A manifest is a UTF-8
CSV with the columns::

    id, source, batch, plate, well, site, channel_paths, treatment, moa

``channel_paths`` joins per-channel file paths (relative to the manifest's
directory) with ``;``. ``moa`` is empty for unlabeled treatments; a value
listing several MoAs separated by ``|`` marks a multi-MoA treatment, which
loads as unlabeled.

Example:
    ```python
    from hci_coda.dataset import load_manifest, split_by_scope

    index = load_manifest("data/manifest.csv")
    target, rest = split_by_scope(index, "source", ["S2"])
    ```
"""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Literal

import numpy as np
import pandas as pd
import structlog
from PIL import Image, UnidentifiedImageError

from .exceptions import CodaError, IOFailure
from .utils.seeding import stream

logger = structlog.get_logger()

Scope = Literal["source", "batch", "plate", "well"]
Role = Literal["train", "val", "test"]

MANIFEST_COLUMNS = (
    "id",
    "source",
    "batch",
    "plate",
    "well",
    "site",
    "channel_paths",
    "treatment",
    "moa",
)
_SCOPES = ("source", "batch", "plate", "well")


class DatasetError(CodaError):
    """Base class for manifest and image loading errors."""


class MissingColumn(DatasetError):
    """Raised when a manifest lacks a required column."""


class DuplicateRecordKey(DatasetError):
    """Raised when two rows share (source, batch, plate, well, site)."""


class UnknownLabel(DatasetError):
    """Raised when a MoA string is not in the supplied label vocabulary."""


class UnknownScopeId(DatasetError):
    """Raised when a held-out or split id does not exist at the named scope."""


class OverlappingSplits(DatasetError):
    """Raised when split specs select the same record for two roles."""


class DecodeError(DatasetError):
    """Raised when a channel file cannot be read as an image."""


class ChannelShapeMismatch(DatasetError):
    """Raised when channel files of one record differ in spatial size."""


class MalformedManifest(DatasetError):
    """Raised when a manifest cannot be parsed into records."""


@dataclass(frozen=True)
class ImageRecord:
    """One imaging site with its full provenance."""

    id: str
    source: str
    batch: str
    plate: str
    well: str
    site: int
    channel_paths: tuple[str, ...]
    treatment: str
    moa: str | None = None  # raw MoA text from the manifest
    moa_label: int | None = None

    @property
    def key(self) -> tuple[str, str, str, str, int]:
        """Natural key, unique within a dataset."""
        return (self.source, self.batch, self.plate, self.well, self.site)

    @property
    def well_key(self) -> tuple[str, str, str, str]:
        return (self.source, self.batch, self.plate, self.well)

    def scope_id(self, scope: Scope) -> str:
        """Identifier of this record at *scope*.

        Plates and wells are qualified by their parents so that ids stay
        unique when sources reuse plate or well names.
        """
        if scope == "source":
            return self.source
        if scope == "batch":
            return self.batch
        if scope == "plate":
            return self.plate
        if scope == "well":
            return "/".join(self.well_key)
        raise ValueError(
            f"Invalid scope '{scope}'. Must be one of: {', '.join(_SCOPES)}"
        )


@dataclass(frozen=True)
class ManifestSchema:
    """How to read a manifest.

    Attributes:
        channel_count: Channels every record must declare.
        label_vocabulary: Optional fixed MoA vocabulary; its order defines
            the class indices and unknown MoAs raise :class:`UnknownLabel`.
        channel_separator: Separator inside ``channel_paths``.
        moa_separator: Separator marking multi-MoA treatments.
    """

    channel_count: int = 3
    label_vocabulary: tuple[str, ...] | None = None
    channel_separator: str = ";"
    moa_separator: str = "|"


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable record collection with label map and hierarchy index.

    Build instances with :meth:`from_records`; the hierarchy index and
    the label map are derived there and never edited afterwards.
    """

    records: tuple[ImageRecord, ...]
    class_count: int
    class_names: tuple[str, ...]
    treatment_to_label: Mapping[str, int]
    hierarchy: Mapping[str, Mapping[str, Mapping[str, tuple[str, ...]]]]
    channel_count: int = 3
    _by_id: Mapping[str, ImageRecord] = field(repr=False, compare=False, default=None)  # ty: ignore[invalid-assignment]

    @classmethod
    def from_records(
        cls,
        records: Iterable[ImageRecord],
        class_names: Sequence[str],
        treatment_to_label: Mapping[str, int],
        channel_count: int = 3,
    ) -> DatasetIndex:
        ordered = tuple(records)
        tree: dict[str, dict[str, dict[str, list[str]]]] = defaultdict(
            lambda: defaultdict(lambda: defaultdict(list))
        )
        for rec in ordered:
            tree[rec.source][rec.batch][rec.plate].append(rec.id)
        hierarchy = MappingProxyType(
            {
                s: MappingProxyType(
                    {
                        b: MappingProxyType({p: tuple(ids) for p, ids in plates.items()})
                        for b, plates in batches.items()
                    }
                )
                for s, batches in tree.items()
            }
        )
        return cls(
            records=ordered,
            class_count=len(class_names),
            class_names=tuple(class_names),
            treatment_to_label=MappingProxyType(dict(treatment_to_label)),
            hierarchy=hierarchy,
            channel_count=channel_count,
            _by_id=MappingProxyType({r.id: r for r in ordered}),
        )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetIndex):
            return NotImplemented
        return (
            self.records == other.records
            and self.class_names == other.class_names
            and dict(self.treatment_to_label) == dict(other.treatment_to_label)
            and self.channel_count == other.channel_count
        )

    def get(self, record_id: str) -> ImageRecord:
        return self._by_id[record_id]

    def iter_hierarchy(self) -> Iterator[ImageRecord]:
        """Walk source > batch > plate and yield every record once."""
        for batches in self.hierarchy.values():
            for plates in batches.values():
                for ids in plates.values():
                    for record_id in ids:
                        yield self._by_id[record_id]

    def ids_at(self, scope: Scope) -> list[str]:
        """Sorted distinct ids present at *scope*."""
        return sorted({r.scope_id(scope) for r in self.records})

    @property
    def labeled(self) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if r.moa_label is not None)

    def subset(self, records: Iterable[ImageRecord]) -> DatasetIndex:
        """New index over *records* that keeps this index's label map."""
        return DatasetIndex.from_records(
            records, self.class_names, self.treatment_to_label, self.channel_count
        )

    def without_labels(self) -> DatasetIndex:
        """Copy with every label bit removed (MoA text, class index, label map)."""
        stripped = [dataclasses.replace(r, moa=None, moa_label=None) for r in self.records]
        return DatasetIndex.from_records(stripped, (), {}, self.channel_count)

    def with_labels(self, labels: Mapping[str, int | None]) -> DatasetIndex:
        """Copy whose class indices are replaced by *labels* (record id → class)."""
        relabeled = [
            dataclasses.replace(r, moa_label=labels.get(r.id, r.moa_label))
            for r in self.records
        ]
        return DatasetIndex.from_records(
            relabeled, self.class_names, self.treatment_to_label, self.channel_count
        )


@dataclass(frozen=True)
class SplitSpec:
    """Selects the records of one split role by ids at a scope."""

    role: Role
    scope: Scope
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.role not in ("train", "val", "test"):
            raise ValueError(
                f"Invalid role '{self.role}'. Must be one of: train, val, test"
            )
        if self.scope not in _SCOPES:
            raise ValueError(
                f"Invalid scope '{self.scope}'. Must be one of: {', '.join(_SCOPES)}"
            )


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------


def _parse_moa(raw: str, schema: ManifestSchema) -> str | None:
    text = raw.strip()
    if not text or schema.moa_separator in text:
        return None
    return text


def _parse_site(raw: str, record_id: str, manifest: Path) -> int:
    try:
        return int(raw)
    except ValueError:
        raise MalformedManifest(
            f"Record '{record_id}' in {manifest} has a non-integer site '{raw}'"
        ) from None


def load_manifest(
    path: str | Path, schema: ManifestSchema | None = None
) -> DatasetIndex:
    """Load a manifest CSV into a :class:`DatasetIndex`.

    Class indices follow the sorted MoA vocabulary (or the order of
    ``schema.label_vocabulary`` when supplied); ``treatment_to_label`` is
    built over the sorted treatment ids carrying a single MoA.

    Args:
        path: Manifest file.
        schema: Reading options. Defaults to three channels, no fixed
            vocabulary.

    Returns:
        The index; one record per manifest row.

    Raises:
        MissingColumn: A required column is absent.
        DuplicateRecordKey: Two rows share a natural key.
        UnknownLabel: A MoA is outside the supplied vocabulary.
        MalformedManifest: The file is not a readable CSV or a site is not an integer.
        IOFailure: The file cannot be read.
    """
    schema = schema or ManifestSchema()
    manifest = Path(path)
    try:
        frame = pd.read_csv(manifest, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as exc:
        raise IOFailure(f"Manifest not found: {manifest}") from exc
    except OSError as exc:
        raise IOFailure(f"Cannot read manifest {manifest}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise MalformedManifest(f"Manifest {manifest} is empty") from exc
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise MalformedManifest(f"Manifest {manifest} is not a UTF-8 CSV file: {exc}") from exc

    for column in MANIFEST_COLUMNS:
        if column not in frame.columns:
            raise MissingColumn(f"Manifest {manifest} is missing column '{column}'")

    root = manifest.resolve().parent
    seen: dict[tuple, str] = {}
    parsed: list[ImageRecord] = []
    for row in frame.itertuples(index=False):
        paths = tuple(
            str((root / p.strip()).resolve())
            for p in row.channel_paths.split(schema.channel_separator)
            if p.strip()
        )
        if len(paths) != schema.channel_count:
            raise ChannelShapeMismatch(
                f"Record '{row.id}' lists {len(paths)} channels, "
                f"expected {schema.channel_count}"
            )
        rec = ImageRecord(
            id=row.id,
            source=row.source,
            batch=row.batch,
            plate=row.plate,
            well=row.well,
            site=_parse_site(row.site, row.id, manifest),
            channel_paths=paths,
            treatment=row.treatment,
            moa=_parse_moa(row.moa, schema),
        )
        if rec.key in seen:
            raise DuplicateRecordKey(
                f"Records '{seen[rec.key]}' and '{rec.id}' share key {rec.key}"
            )
        seen[rec.key] = rec.id
        parsed.append(rec)

    if schema.label_vocabulary is not None:
        class_names = tuple(schema.label_vocabulary)
        unknown = sorted({r.moa for r in parsed if r.moa} - set(class_names))
        if unknown:
            raise UnknownLabel(
                f"MoA '{unknown[0]}' is not in the label vocabulary "
                f"({len(class_names)} classes)"
            )
    else:
        class_names = tuple(sorted({r.moa for r in parsed if r.moa}))

    moa_to_class = {name: i for i, name in enumerate(class_names)}
    treatment_to_label: dict[str, int] = {}
    for treatment in sorted({r.treatment for r in parsed}):
        moas = {r.moa for r in parsed if r.treatment == treatment}
        if len(moas) == 1 and (moa := next(iter(moas))) is not None:
            treatment_to_label[treatment] = moa_to_class[moa]

    records = [
        dataclasses.replace(r, moa_label=treatment_to_label.get(r.treatment))
        for r in parsed
    ]
    index = DatasetIndex.from_records(
        records, class_names, treatment_to_label, schema.channel_count
    )
    logger.debug(
        "manifest loaded",
        path=str(manifest),
        records=len(index),
        classes=index.class_count,
        unlabeled=len(index) - len(index.labeled),
    )
    return index


def write_manifest(
    index: DatasetIndex, path: str | Path, schema: ManifestSchema | None = None
) -> Path:
    """Write *index* as a manifest CSV with paths relative to *path*'s directory."""
    schema = schema or ManifestSchema(channel_count=index.channel_count)
    target = Path(path)
    root = target.resolve().parent
    rows = []
    for rec in index.records:
        rel = [
            Path(p).resolve().relative_to(root).as_posix()
            if Path(p).resolve().is_relative_to(root)
            else str(p)
            for p in rec.channel_paths
        ]
        rows.append(
            {
                "id": rec.id,
                "source": rec.source,
                "batch": rec.batch,
                "plate": rec.plate,
                "well": rec.well,
                "site": rec.site,
                "channel_paths": schema.channel_separator.join(rel),
                "treatment": rec.treatment,
                "moa": rec.moa or "",
            }
        )
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS)).to_csv(
            target, index=False, encoding="utf-8", lineterminator="\n"
        )
    except OSError as exc:
        raise IOFailure(f"Cannot write manifest {target}: {exc}") from exc
    return target


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_by_scope(
    index: DatasetIndex, scope: Scope, held_out: Sequence[str]
) -> tuple[DatasetIndex, DatasetIndex]:
    """Partition *index* into (records under *held_out*, everything else).

    Raises:
        UnknownScopeId: A held-out id does not exist at *scope*.
    """
    known = set(index.ids_at(scope))
    missing = [i for i in held_out if i not in known]
    if missing:
        raise UnknownScopeId(f"Unknown {scope} id '{missing[0]}'")
    wanted = set(held_out)
    inside = [r for r in index.records if r.scope_id(scope) in wanted]
    outside = [r for r in index.records if r.scope_id(scope) not in wanted]
    return index.subset(inside), index.subset(outside)


def resolve_splits(
    index: DatasetIndex, specs: Sequence[SplitSpec]
) -> dict[str, DatasetIndex]:
    """Materialise split specs into one index per role.

    Raises:
        UnknownScopeId: A spec names an id absent at its scope.
        OverlappingSplits: Two roles select the same record.
    """
    owner: dict[str, str] = {}
    result: dict[str, DatasetIndex] = {}
    for spec in specs:
        chosen, _ = split_by_scope(index, spec.scope, spec.ids)
        for rec in chosen:
            if rec.id in owner and owner[rec.id] != spec.role:
                raise OverlappingSplits(
                    f"Record '{rec.id}' selected for both "
                    f"'{owner[rec.id]}' and '{spec.role}'"
                )
            owner[rec.id] = spec.role
    for role in dict.fromkeys(s.role for s in specs):
        result[role] = index.subset(r for r in index.records if owner.get(r.id) == role)
    return result


def holdout_split(
    index: DatasetIndex,
    val_fraction: float = 0.1,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    """Split into train/val/test at well granularity.

    All sites of a well land in the same split. Wells are shuffled within
    each treatment so every treatment keeps roughly the same proportions
    in every split.
    """
    if not 0 <= val_fraction < 1 or not 0 <= test_fraction < 1:
        raise ValueError("val_fraction and test_fraction must be in [0, 1)")
    if val_fraction + test_fraction >= 1:
        raise ValueError("val_fraction + test_fraction must be < 1")

    wells_by_treatment: dict[str, list[str]] = defaultdict(list)
    for rec in index.records:
        well = rec.scope_id("well")
        if well not in wells_by_treatment[rec.treatment]:
            wells_by_treatment[rec.treatment].append(well)

    val_ids: list[str] = []
    test_ids: list[str] = []
    for treatment in sorted(wells_by_treatment):
        wells = sorted(wells_by_treatment[treatment])
        order = stream(seed, "holdout", treatment).permutation(len(wells))
        n_test = int(round(test_fraction * len(wells)))
        n_val = int(round(val_fraction * len(wells)))
        shuffled = [wells[i] for i in order]
        test_ids.extend(shuffled[:n_test])
        val_ids.extend(shuffled[n_test : n_test + n_val])

    specs = [SplitSpec("test", "well", tuple(test_ids)), SplitSpec("val", "well", tuple(val_ids))]
    parts = resolve_splits(index, [s for s in specs if s.ids])
    taken = {r.id for part in parts.values() for r in part}
    train = index.subset(r for r in index.records if r.id not in taken)
    empty = index.subset(())
    return train, parts.get("val", empty), parts.get("test", empty)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def _read_channel(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except FileNotFoundError as exc:
        raise DecodeError(f"Channel file not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"Cannot decode channel file {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DecodeError(f"Channel file {path} is not single-channel (shape {arr.shape})")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype in (np.uint16, np.dtype(">u2"), np.dtype("<u2")):
        return arr.astype(np.float32) / 65535.0
    if np.issubdtype(arr.dtype, np.integer):
        # PIL reports 16-bit PNGs as int32 in mode "I".
        return arr.astype(np.float32) / 65535.0
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def load_image(record: ImageRecord, target_size: tuple[int, int]) -> np.ndarray:
    """Load a record as a ``(C, H, W)`` float32 array in ``[0, 1]``.

    Channels are stacked in manifest order, rescaled from their stored
    integer range and resized with bilinear interpolation when their size
    differs from *target_size*.

    Raises:
        DecodeError: A channel file is missing or unreadable.
        ChannelShapeMismatch: Channel files differ in spatial size.
    """
    channels = [_read_channel(p) for p in record.channel_paths]
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise ChannelShapeMismatch(
            f"Record '{record.id}' has channels of shapes {sorted(shapes)}"
        )
    height, width = target_size
    if channels[0].shape != (height, width):
        channels = [
            np.asarray(
                Image.fromarray(c).resize((width, height), Image.BILINEAR)
            )
            for c in channels
        ]
    return np.clip(np.stack(channels, axis=0), 0.0, 1.0).astype(np.float32)
