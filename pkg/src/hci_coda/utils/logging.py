"""Structured logging setup for hci-coda.

Modules log through ``structlog.get_logger()``; this module wires
structlog into stdlib ``logging`` so the same events reach the console
and, while a run is active, the run's ``log.txt``.

Quick start::

    from hci_coda.utils.logging import setup_logging
    logger = setup_logging(level="DEBUG", renderer="json")
    logger.info("pretrain started", epochs=300)
"""

from __future__ import annotations

import contextlib
import logging
import sys
from collections.abc import Iterator
from pathlib import Path
from typing import IO, Literal

import structlog

__all__ = ["log_to_file", "setup_logging"]

_ROOT = "hci_coda"

_SHARED_PROCESSORS: list = [
    structlog.contextvars.merge_contextvars,
    structlog.stdlib.add_log_level,
    structlog.stdlib.add_logger_name,
    structlog.processors.TimeStamper(fmt="iso"),
    structlog.processors.format_exc_info,
]


def _renderer(kind: str, colors: bool):
    if kind == "json":
        return structlog.processors.JSONRenderer(sort_keys=True)
    if kind == "kv":
        return structlog.processors.KeyValueRenderer(
            key_order=["timestamp", "level", "event"]
        )
    return structlog.dev.ConsoleRenderer(colors=colors)


def setup_logging(
    level: int | str = logging.INFO,
    renderer: Literal["console", "json", "kv"] = "console",
    colors: bool | None = None,
    stream: IO[str] | None = None,
) -> structlog.stdlib.BoundLogger:
    """One-call logging setup with stdlib integration.

    Args:
        level: Log level (name or int). Defaults to ``INFO``.
        renderer: ``"console"``, ``"json"`` or ``"kv"``.
        colors: Enable ANSI colors. ``None`` auto-detects from the stream.
        stream: Output stream. Defaults to ``sys.stderr``.

    Returns:
        A ready-to-use bound logger.
    """
    out = stream or sys.stderr
    if colors is None:
        colors = bool(getattr(out, "isatty", lambda: False)())

    structlog.configure(
        processors=[
            *_SHARED_PROCESSORS,
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )

    root = logging.getLogger(_ROOT)
    root.setLevel(level if isinstance(level, int) else level.upper())
    root.propagate = False
    # Drop console handlers from earlier calls, keep active run files.
    for handler in list(root.handlers):
        if not isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)

    handler = logging.StreamHandler(out)
    handler.setFormatter(
        structlog.stdlib.ProcessorFormatter(
            processor=_renderer(renderer, colors),
            foreign_pre_chain=_SHARED_PROCESSORS,
        )
    )
    root.addHandler(handler)
    return structlog.get_logger(_ROOT)


@contextlib.contextmanager
def log_to_file(path: str | Path) -> Iterator[Path]:
    """Tee every ``hci_coda`` log record into *path* while the block runs.

    The file is appended to, so re-running a resumable command keeps the
    earlier history.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(target, mode="a", encoding="utf-8")
    handler.setFormatter(
        structlog.stdlib.ProcessorFormatter(
            processor=structlog.processors.KeyValueRenderer(
                key_order=["timestamp", "level", "logger", "event"]
            ),
            foreign_pre_chain=_SHARED_PROCESSORS,
        )
    )
    root = logging.getLogger(_ROOT)
    root.addHandler(handler)
    try:
        yield target
    finally:
        root.removeHandler(handler)
        handler.close()
