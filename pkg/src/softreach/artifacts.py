"""Deterministic on-disk artifact formats.

All numeric text artifacts (CSV tables, JSON documents) are written through
this module so that the same data always produces the same bytes:

* floats are rendered with ``repr``, the shortest string that round-trips
  exactly in IEEE-754 double precision;
* JSON objects are written with sorted keys and a fixed indent;
* manifests carry config echoes, seeds, input hashes and library versions,
  but never timestamps or absolute output locations.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Iterable, Sequence

import numpy as np


def format_number(x) -> str:
    """Shortest exact decimal form: ints bare, floats via repr."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_number(v) for v in row) + "\n")


def read_table(path: str | os.PathLike, expected_header: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV written by :func:`write_csv`.

    Returns (header, data) with data as a float64 array of shape
    (n_rows, n_columns). Malformed content raises ValueError naming the
    1-based line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split(",")
    if expected_header is not None and header != list(expected_header):
        raise ValueError(
            f"{path}: line 1: expected header {','.join(expected_header)!r}, got {lines[0]!r}"
        )
    width = len(header)
    rows = np.empty((len(lines) - 1, width), dtype=np.float64)
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != width:
            raise ValueError(f"{path}: line {i}: expected {width} columns, got {len(parts)}")
        try:
            rows[i - 2] = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"{path}: line {i}: {exc}") from None
    return header, rows


def write_json(path: str | os.PathLike, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path: str | os.PathLike):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sha256_file(path: str | os.PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    out_dir: str | os.PathLike,
    command: str,
    config: dict,
    seed: int | None,
    inputs: Sequence[str | os.PathLike] = (),
    outputs: Sequence[str] = (),
) -> str:
    """Write manifest.json describing one pipeline stage.

    ``outputs`` are names relative to ``out_dir``; their hashes are recorded,
    so the manifest must be written after all other artifacts. The output
    directory itself is deliberately not embedded: a rerun into a different
    directory should yield byte-identical files.
    """
    from . import __version__

    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [{"path": str(p), "sha256": sha256_file(p)} for p in inputs],
        "outputs": [
            {"name": name, "sha256": sha256_file(os.path.join(out_dir, name))} for name in outputs
        ],
        "versions": {"softreach": __version__, "numpy": np.__version__},
    }
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, manifest)
    return path
