"""Filesystem helpers for circlab.

Utilities for generating non-clobbering output paths, e.g. runs/canonical ->
runs/canonical (1).
"""

from __future__ import annotations

from pathlib import Path


def unique_path(path: str | Path) -> Path:
    """Return a unique path by appending " (n)" before the suffix if needed.

    Examples:
    - "/tmp/summary.json" -> if exists, returns "/tmp/summary (1).json", then (2), etc.
    - "/tmp/run" (no suffix) -> "/tmp/run (1)"
    """
    p = Path(path)
    if not p.exists():
        return p

    stem = p.stem
    suffix = p.suffix
    parent = p.parent

    n = 1
    while True:
        candidate = parent / f"{stem} ({n}){suffix}"
        if not candidate.exists():
            return candidate
        n += 1


def prepare_output_dir(path: str | Path) -> Path:
    """Create the report directory.

    An existing empty directory is reused; a non-empty one is never written
    into, a fresh sibling from ``unique_path`` is created instead.
    """
    p = Path(path).expanduser()
    if p.is_dir() and not any(p.iterdir()):
        return p
    target = unique_path(p)
    target.mkdir(parents=True, exist_ok=False)
    return target
