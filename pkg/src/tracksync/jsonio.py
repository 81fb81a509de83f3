"""Deterministic JSON persistence helpers.

Floats are written with ``repr`` precision (shortest round-trip form), so a
load/dump cycle reproduces every value bit-exactly and identical inputs give
identical bytes.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any

from .errors import SchemaError


def _sanitize(obj: Any) -> Any:
    # numpy scalars/arrays sneak in easily; normalise to plain Python types
    if hasattr(obj, "tolist"):
        obj = obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"refusing to serialise non-finite float {obj!r}")
    return obj


def dumps(obj: Any, compact: bool = False) -> str:
    obj = _sanitize(obj)
    if compact:
        text = json.dumps(obj, separators=(",", ":"), allow_nan=False)
    else:
        text = json.dumps(obj, indent=2, allow_nan=False)
    return text + "\n"


def write_json(path: str | os.PathLike, obj: Any, compact: bool = False) -> Path:
    """Write ``obj`` atomically (temp file in the same directory + rename)."""
    return write_text(path, dumps(obj, compact=compact))


def write_text(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_json(path: str | os.PathLike) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError("file not found", source=str(path)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(
            f"invalid JSON ({exc.msg})", location=f"line {exc.lineno} column {exc.colno}", source=str(path)
        ) from None
