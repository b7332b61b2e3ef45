"""Deterministic serialisation: JSON, JSON Lines and CSV with provenance metadata.

Floats are written with 17 significant digits so that re-runs are
byte-identical and values round-trip exactly.  Non-finite floats become
``null``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import __version__


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def dumps(obj: Any) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def config_hash(config: Any) -> str:
    return hashlib.sha256(dumps(config).encode()).hexdigest()[:16]


def meta(config: Any = None, **extra) -> dict:
    m = {"tool": "store3d", "version": __version__, "config_hash": config_hash(config)}
    m.update(extra)
    return m


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


def write_jsonl(path, records: Iterable[dict], header: Optional[dict] = None) -> None:
    """One record per line; an optional leading ``{"meta": ...}`` line."""
    with open(path, "w") as fh:
        if header is not None:
            fh.write(dumps({"meta": header}) + "\n")
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if set(rec) == {"meta"}:
                continue
            yield rec


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]], header_meta: Optional[dict] = None) -> None:
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return _fmt_float(float(v)) if math.isfinite(v) else str(float(v))
        return str(v)

    with open(path, "w") as fh:
        if header_meta is not None:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header_meta.items()) + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(cell(v) for v in row) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = [ln.rstrip("\n") for ln in open(path) if not ln.startswith("#") and ln.strip()]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


class OutputTracker:
    """Remembers files written by a command so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def __call__(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                os.remove(p)
            except FileNotFoundError:
                pass
