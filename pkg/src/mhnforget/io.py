"""Plain-text serialization shared by every module: CSV tables, JSON, memory files."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import MemorySet

FLOAT_FORMAT = ".17g"


def fmt(value) -> str:
    """Render one CSV cell: floats at 17 significant digits, everything else via str."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), FLOAT_FORMAT)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def atomic_write_text(path: str | os.PathLike, text: str) -> Path:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json_text(obj))


def memory_set_to_dict(X: MemorySet) -> dict:
    return {
        "vectors": X.vectors,
        "roles": list(X.roles),
        "cluster_cosine": X.cluster_cosine,
    }


def memory_set_from_dict(obj: dict, norm_tol: float | None = None) -> MemorySet:
    """Inverse of :func:`memory_set_to_dict`; unit-norm validation reports bad rows."""
    if "vectors" not in obj:
        raise ValueError("memory file has no 'vectors' entry")
    kw = {} if norm_tol is None else {"norm_tol": norm_tol}
    return MemorySet(
        np.asarray(obj["vectors"], dtype=float),
        tuple(obj.get("roles") or ()),
        obj.get("cluster_cosine"),
        **kw,
    )


def save_memory_set(path, X: MemorySet) -> Path:
    """JSON for ``.json`` paths; otherwise CSV with a role column then d coordinates."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return write_json(path, memory_set_to_dict(X))
    header = ["role"] + [f"x{j}" for j in range(X.dim)]
    return write_csv(path, header, ([r, *v] for r, v in zip(X.roles, X.vectors)))


def load_memory_set(path, norm_tol: float | None = None) -> MemorySet:
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as fh:
            return memory_set_from_dict(json.load(fh), norm_tol)
    header, rows = read_csv(path)
    if not rows:
        raise ValueError(f"{path}: no memory rows")
    has_role = header[0] == "role"
    roles = tuple(r[0] for r in rows) if has_role else ()
    vals = np.array([[float(v) for v in (r[1:] if has_role else r)] for r in rows])
    return memory_set_from_dict({"vectors": vals, "roles": roles}, norm_tol)
