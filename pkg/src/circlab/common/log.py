"""Logging setup for circlab.

One stderr sink, ``[scope HH:MM:SS] message``; debug output when
``CIRCLAB_DEBUG=1``.
"""

from __future__ import annotations

import os
import sys

from loguru import logger

_FORMAT = "[{extra[scope]} {time:HH:mm:ss}] {message}"
_configured = False


def debug_enabled() -> bool:
    return os.environ.get("CIRCLAB_DEBUG") == "1"


def configure(level: str | None = None) -> None:
    """(Re)install the stderr sink. Safe to call repeatedly."""
    global _configured
    logger.remove()
    logger.configure(extra={"scope": "circlab"})
    logger.add(
        sys.stderr,
        level=level or ("DEBUG" if debug_enabled() else "INFO"),
        format=_FORMAT,
        colorize=False,
    )
    _configured = True


def get_logger(scope: str):
    if not _configured:
        configure()
    return logger.bind(scope=scope)
