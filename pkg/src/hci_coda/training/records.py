"""Run directories.

Layout of one run::

    <run>/config.json        # config snapshot
    <run>/record.json        # status, wall clock, checkpoint names, step and rng per checkpoint
    <run>/metrics.csv        # long format: phase, epoch, split, metric, value
    <run>/checkpoints/<phase>.pt
    <run>/log.txt
"""

from __future__ import annotations

import json
import time
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd
import structlog

from ..exceptions import IOFailure

logger = structlog.get_logger()

METRIC_COLUMNS = ("phase", "epoch", "split", "metric", "value")


@dataclass
class RunRecord:
    """Mutable handle on a run directory; rows are flushed on :meth:`save`."""

    root: Path
    config: dict[str, Any] = field(default_factory=dict)
    rows: list[dict[str, Any]] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    progress: dict[str, dict[str, Any]] = field(default_factory=dict)
    status: str = "running"
    started: float = field(default_factory=time.time)
    wall_clock: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, root: str | Path, config: Mapping[str, Any] | None = None) -> RunRecord:
        record = cls(Path(root), dict(config or {}))
        try:
            (record.root / "checkpoints").mkdir(parents=True, exist_ok=True)
            (record.root / "config.json").write_text(
                json.dumps(record.config, indent=2, sort_keys=True, default=str), encoding="utf-8"
            )
        except OSError as exc:
            raise IOFailure(f"Cannot create run directory {record.root}: {exc}") from exc
        record.save()
        return record

    @classmethod
    def load(cls, root: str | Path) -> RunRecord:
        root = Path(root)
        meta_path = root / "record.json"
        if not meta_path.is_file():
            raise IOFailure(f"Not a run directory (no record.json): {root}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        config_path = root / "config.json"
        config = json.loads(config_path.read_text(encoding="utf-8")) if config_path.is_file() else {}
        metrics_path = root / "metrics.csv"
        rows = (
            pd.read_csv(metrics_path).to_dict("records") if metrics_path.is_file() else []
        )
        return cls(
            root=root,
            config=config,
            rows=rows,
            checkpoints=meta.get("checkpoints", {}),
            progress=meta.get("progress", {}),
            status=meta.get("status", "running"),
            started=meta.get("started", 0.0),
            wall_clock=meta.get("wall_clock", 0.0),
            extra=meta.get("extra", {}),
        )

    @staticmethod
    def is_complete(root: str | Path) -> bool:
        return read_status(root).get("status") == "complete"

    @property
    def log_path(self) -> Path:
        return self.root / "log.txt"

    def checkpoint_path(self, phase: str) -> Path:
        return self.root / "checkpoints" / f"{phase}.pt"

    def add_checkpoint(
        self, phase: str, path: Path, *, step: int | None = None, rng: Mapping[str, Any] | None = None
    ) -> None:
        """Register *path*; *step* and *rng* record where training stood when it was written."""
        self.checkpoints[phase] = path.relative_to(self.root).as_posix()
        if step is not None or rng is not None:
            self.progress[phase] = {"step": step, "rng": dict(rng or {})}

    def log(self, phase: str, epoch: int, split: str, **metrics: float) -> None:
        for name, value in metrics.items():
            self.rows.append(
                {"phase": phase, "epoch": epoch, "split": split, "metric": name, "value": float(value)}
            )

    def metrics(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(METRIC_COLUMNS))

    def save(self) -> None:
        self.wall_clock = time.time() - self.started
        try:
            self.metrics().to_csv(self.root / "metrics.csv", index=False, lineterminator="\n")
        except OSError as exc:
            raise IOFailure(f"Cannot write run record {self.root}: {exc}") from exc
        write_status(
            self.root,
            self.status,
            started=self.started,
            wall_clock=self.wall_clock,
            checkpoints=self.checkpoints,
            progress=self.progress,
            extra=self.extra,
        )

    def complete(self, **extra: Any) -> None:
        self.extra.update(extra)
        self.status = "complete"
        self.save()
        logger.info("run complete", run=str(self.root), wall_clock=round(self.wall_clock, 2))

    def fail(self, error: BaseException) -> None:
        self.extra["error"] = f"{type(error).__name__}: {error}"
        self.status = "failed"
        self.save()


def read_status(root: str | Path) -> dict[str, Any]:
    """Contents of ``record.json`` under *root*, or ``{}`` when absent."""
    meta_path = Path(root) / "record.json"
    if not meta_path.is_file():
        return {}
    return json.loads(meta_path.read_text(encoding="utf-8"))


def write_status(root: str | Path, status: str, **fields: Any) -> Path:
    target = Path(root) / "record.json"
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(
            json.dumps({"status": status, **fields}, indent=2, sort_keys=True, default=str),
            encoding="utf-8",
        )
    except OSError as exc:
        raise IOFailure(f"Cannot write {target}: {exc}") from exc
    return target
