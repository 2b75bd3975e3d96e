"""Weight files: JSON documents holding named float64 arrays.

Values are written by Python's repr, the shortest decimal string that parses
back to the identical double, so save -> load is exact. The format carries a
kind tag and free-form metadata so model wrappers can store normalization
constants and shape info alongside the raw arrays.
"""

from __future__ import annotations

import numpy as np

from ..artifacts import read_json, write_json
from .trees import Tree

FORMAT_VERSION = 1


def save_arrays(path, kind: str, arrays: Tree, metadata: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "metadata": metadata or {},
        "arrays": {name: arr.tolist() for name, arr in arrays.items()},
    }
    write_json(path, doc)


def load_arrays(path) -> tuple[str, Tree, dict]:
    """Returns (kind, arrays, metadata)."""
    doc = read_json(path)
    if not isinstance(doc, dict) or "arrays" not in doc:
        raise ValueError(f"{path}: not a weights file")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {version!r}")
    arrays = {name: np.asarray(value, dtype=np.float64) for name, value in doc["arrays"].items()}
    return doc.get("kind", ""), arrays, doc.get("metadata", {})
