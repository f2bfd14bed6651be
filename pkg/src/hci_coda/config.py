"""Experiment configuration.

Config files are YAML. Resolution order for the base file:

1. the explicit ``--config`` path,
2. the ``HCI_CODA_CONFIG`` environment variable,
3. ``coda.yaml`` / ``coda.yml`` in the working directory,
4. the packaged ``desk`` preset.

A file may start from a packaged preset with ``preset: <name>`` and
override any part of it. ``--set dotted.path=value`` overrides (values
parsed as YAML scalars) are applied last, then the merged mapping is
built into frozen dataclasses. Every validation failure is reported as
:class:`ConfigValidationError` with the dotted path of the bad field::

    plan.pretrain.epochs: must be >= 1

Example::

    config = load_config("coda.yaml", ["plan.adapt.epochs=5", "method=oda"])
"""

from __future__ import annotations

import copy
import dataclasses
import os
import re
import types
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Union, get_args, get_origin, get_type_hints

import structlog
import yaml

from .dataset import DatasetIndex, split_by_scope
from .evaluation.cka import TokenMode
from .evaluation.embeddings import Pooling
from .evaluation.metrics import Aggregation
from .exceptions import CodaError
from .models import ModelConfig
from .synthetic import GeneratorConfig
from .training.matrix import METHOD_OBJECTIVE, METHODS, EvalMode, Method
from .training.phases import PairIneligible
from .training.plan import SCOPE_LEVELS, ScopeLevel, TrainPlan
from .views import PairIndex, ViewConfig

logger = structlog.get_logger()

__all__ = [
    "ENV_VAR",
    "PRESETS",
    "ConfigValidationError",
    "DatasetSection",
    "EvalSection",
    "ExperimentConfig",
    "apply_overrides",
    "build_config",
    "check_pair_eligibility",
    "config_to_dict",
    "discover_config_path",
    "load_config",
    "preset_path",
]

ENV_VAR = "HCI_CODA_CONFIG"
LOCAL_NAMES = ("coda.yaml", "coda.yml")
PRESETS = ("desk", "paper-scale", "granularity")
DEFAULT_PRESET = "desk"

_FIELD_PREFIX = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*: ")


class ConfigValidationError(CodaError, ValueError):
    """Raised for an unreadable, unknown or invalid configuration value.

    Attributes:
        path: Dotted path of the offending field (empty for the whole file).
    """

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _join(path: str, key: str | int) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else key


def _wrap(path: str, exc: Exception) -> ConfigValidationError:
    message = str(exc)
    # "epochs: must be >= 1" raised inside a section becomes "plan.pretrain.epochs: ..."
    if _FIELD_PREFIX.match(message):
        name, _, rest = message.partition(": ")
        return ConfigValidationError(_join(path, name), rest)
    return ConfigValidationError(path, message)


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSection:
    """Where the images come from.

    Attributes:
        manifest: Existing manifest CSV. When unset the manifest lives at
            ``<root>/manifest.csv`` and is generated from ``generator`` on
            first use.
        generator: Synthetic benchmark settings.
        root: Data directory for generated datasets (default
            ``<output_dir>/data``).
        source: Source id trained on (default: first source).
        target: Source id adapted to and scored (default: second source).
    """

    manifest: str | None = None
    generator: GeneratorConfig | None = None
    root: str | None = None
    source: str | None = None
    target: str | None = None

    def __post_init__(self) -> None:
        if self.manifest is None and self.generator is None:
            raise ValueError("manifest: one of manifest or generator is required")

    def data_dir(self, output_dir: str | Path) -> Path:
        if self.manifest is not None:
            return Path(self.manifest).parent
        return Path(self.root) if self.root is not None else Path(output_dir) / "data"

    def manifest_path(self, output_dir: str | Path) -> Path:
        if self.manifest is not None:
            return Path(self.manifest)
        return self.data_dir(output_dir) / "manifest.csv"


@dataclass(frozen=True)
class EvalSection:
    """Scoring, analysis and grid settings."""

    aggregation: Aggregation = "image"
    cka_token_mode: TokenMode = "all"
    pooling: Pooling = "cls"
    probe_images: int = 64
    seeds: tuple[int, ...] = (0,)
    methods: tuple[Method, ...] = METHODS
    sources: tuple[str, ...] = ()
    levels: tuple[ScopeLevel, ...] = SCOPE_LEVELS
    modes: tuple[EvalMode, ...] = ("subset", "full")
    color_by: tuple[str, ...] = ("moa", "batch", "source")

    def __post_init__(self) -> None:
        if self.probe_images < 1:
            raise ValueError("probe_images: must be >= 1")
        if not self.seeds:
            raise ValueError("seeds: at least one seed is required")
        if not self.methods:
            raise ValueError("methods: at least one method is required")


def _default_dataset() -> DatasetSection:
    return DatasetSection(generator=GeneratorConfig())


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: data, architecture, views, phases, method and outputs."""

    dataset: DatasetSection = field(default_factory=_default_dataset)
    model: ModelConfig = field(default_factory=ModelConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    eval: EvalSection = field(default_factory=EvalSection)
    method: Method = "coda"
    seed: int = 0
    output_dir: str = "runs"
    workers: int = 1

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"Invalid method '{self.method}'. Must be one of: {', '.join(METHODS)}")
        required = METHOD_OBJECTIVE[self.method]
        if required is not None and self.plan.objective != required:
            raise ValueError(
                f"plan.objective: method '{self.method}' requires objective '{required}', "
                f"got '{self.plan.objective}'"
            )
        if self.plan.seed != self.seed:
            raise ValueError(f"plan.seed: must equal seed ({self.seed}), got {self.plan.seed}")
        generator = self.dataset.generator
        if self.dataset.manifest is None and generator is not None and generator.channels != self.model.channels:
            raise ValueError(
                f"model.channels: must match dataset.generator.channels ({generator.channels})"
            )
        if self.workers < 1:
            raise ValueError("workers: must be >= 1")


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------


def _type_name(tp: Any) -> str:
    return getattr(tp, "__name__", str(tp))


def _build(tp: Any, value: Any, path: str) -> Any:
    """Convert plain YAML data at *path* into an instance of *tp*."""
    origin = get_origin(tp)
    if tp is Any:
        return value
    if dataclasses.is_dataclass(tp) and isinstance(tp, type):
        return _build_dataclass(tp, value, path)
    if origin is Union or origin is types.UnionType:
        args = get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigValidationError(path, "must not be null")
        error: ConfigValidationError | None = None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _build(arg, value, path)
            except ConfigValidationError as exc:
                error = error or exc
        assert error is not None
        raise error
    if origin is Literal:
        choices = get_args(tp)
        if value not in choices:
            raise ConfigValidationError(
                path, f"Invalid value {value!r}. Must be one of: {', '.join(map(str, choices))}"
            )
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(path, f"expected a list, got {type(value).__name__}")
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, _join(path, i)) for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigValidationError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_build(a, v, _join(path, i)) for i, (a, v) in enumerate(zip(args, value, strict=True)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(path, f"expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigValidationError(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"Unsupported config field type {_type_name(tp)} at '{path}'")


def _build_dataclass(tp: type, value: Any, path: str) -> Any:
    if isinstance(value, tp):
        return value
    if not isinstance(value, Mapping):
        raise ConfigValidationError(path, f"expected a mapping, got {type(value).__name__}")
    hints = get_type_hints(tp)
    names = [f.name for f in dataclasses.fields(tp) if f.init]
    unknown = sorted(str(k) for k in value if k not in names)
    if unknown:
        raise ConfigValidationError(
            _join(path, unknown[0]), f"unknown field. Must be one of: {', '.join(names)}"
        )
    kwargs = {name: _build(hints[name], raw, _join(path, name)) for name, raw in value.items()}
    try:
        return tp(**kwargs)
    except ConfigValidationError:
        raise
    except (ValueError, TypeError) as exc:
        raise _wrap(path, exc) from exc


def build_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a merged mapping into an :class:`ExperimentConfig`.

    ``plan.objective`` defaults to the objective the method requires and
    ``plan.seed`` always follows the top-level ``seed``.

    Raises:
        ConfigValidationError: Any field is unknown, mistyped or out of range.
    """
    data = copy.deepcopy(dict(data))
    data.pop("preset", None)
    plan = data.get("plan")
    if plan is None:
        plan = data["plan"] = {}
    if not isinstance(plan, dict):
        raise ConfigValidationError("plan", f"expected a mapping, got {type(plan).__name__}")
    method = data.get("method", "coda")
    if "objective" not in plan and isinstance(method, str) and METHOD_OBJECTIVE.get(method):
        plan["objective"] = METHOD_OBJECTIVE[method]
    plan["seed"] = data.get("seed", 0)
    return _build(ExperimentConfig, data, "")


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Plain snapshot of *config*; ``build_config`` of the result rebuilds it."""

    def plain(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        return value

    return plain(dataclasses.asdict(config))


# ---------------------------------------------------------------------------
# Files, presets and overrides
# ---------------------------------------------------------------------------


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigValidationError("preset", f"Invalid preset '{name}'. Must be one of: {', '.join(PRESETS)}")
    return Path(str(resources.files("hci_coda") / "data" / f"{name}.yaml"))


def _read_yaml(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigValidationError("", f"Cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigValidationError("", f"Invalid YAML in {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigValidationError("", f"Config file {path} must contain a mapping")
    return data


def _merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _expand_preset(data: dict[str, Any], seen: tuple[str, ...] = ()) -> dict[str, Any]:
    name = data.get("preset")
    if name is None:
        return data
    if not isinstance(name, str):
        raise ConfigValidationError("preset", f"expected a string, got {name!r}")
    if name in seen:
        raise ConfigValidationError("preset", f"preset cycle: {' -> '.join((*seen, name))}")
    base = _expand_preset(_read_yaml(preset_path(name)), (*seen, name))
    rest = {k: v for k, v in data.items() if k != "preset"}
    return _merge(base, rest)


def apply_overrides(data: Mapping[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """Apply ``dotted.path=value`` overrides; values are parsed as YAML.

    Example:
        ```python
        apply_overrides({}, ["plan.adapt.epochs=5", "eval.seeds=[0, 1, 2]"])
        # {'plan': {'adapt': {'epochs': 5}}, 'eval': {'seeds': [0, 1, 2]}}
        ```
    """
    result = copy.deepcopy(dict(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigValidationError("--set", f"expected key=value, got '{item}'")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigValidationError(key, f"cannot parse override value '{raw}': {exc}") from exc
        node = result
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return result


def discover_config_path(explicit: str | Path | None = None) -> Path | None:
    """Config file to load, or ``None`` for the packaged default preset."""
    if explicit is not None:
        path = Path(explicit)
        if not path.is_file():
            raise ConfigValidationError("", f"Config file not found: {path}")
        return path
    env_path = os.environ.get(ENV_VAR)
    if env_path:
        if Path(env_path).is_file():
            return Path(env_path)
        logger.warning("config from environment not found, ignoring", variable=ENV_VAR, path=env_path)
    for candidate in LOCAL_NAMES:
        if Path(candidate).is_file():
            return Path(candidate)
    return None


def load_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    *,
    seed: int | None = None,
    output_dir: str | Path | None = None,
) -> ExperimentConfig:
    """Resolve, merge and validate an experiment config.

    Args:
        path: Explicit config file; see the module docstring for the
            discovery order when ``None``.
        overrides: ``dotted.path=value`` strings.
        seed: Shorthand for ``seed=...``.
        output_dir: Shorthand for ``output_dir=...``.

    Raises:
        ConfigValidationError: The file is missing or unreadable, or any
            field is invalid.
    """
    source = discover_config_path(path)
    data = _read_yaml(source) if source is not None else {"preset": DEFAULT_PRESET}
    data = _expand_preset(data)
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    config = build_config(data)
    logger.debug(
        "config loaded",
        source=str(source) if source is not None else f"preset:{DEFAULT_PRESET}",
        method=config.method,
        seed=config.seed,
    )
    return config


# ---------------------------------------------------------------------------
# Data-dependent checks
# ---------------------------------------------------------------------------


def check_pair_eligibility(index: DatasetIndex, method: str, sources: Sequence[str]) -> None:
    """Fail before any compute when the method needs cross-batch pairs the data lacks.

    ``dino_cb`` pretraining needs pairs in every source trained on; CODA
    also adapts with pairs, so the target must have them too.

    Raises:
        PairIneligible: A source has no treatment spanning two batches.
    """
    if METHOD_OBJECTIVE.get(method) != "dino_cb":
        return
    for source in sources:
        part, _ = split_by_scope(index, "source", [source])
        if not PairIndex.from_index(part).is_eligible:
            raise PairIneligible(
                f"method '{method}' needs cross-batch pairs, but no treatment in "
                f"source '{source}' spans two or more batches"
            )

