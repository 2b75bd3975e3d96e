"""Parameter trees: flat dicts mapping names to float64 arrays.

Optimizers, gradient clipping and serialization all operate on trees so they
stay agnostic of the network architecture. Keys are expected to match
between a parameter tree and its gradient tree.
"""

from __future__ import annotations

import numpy as np

Tree = dict[str, np.ndarray]


def tree_map(fn, *trees: Tree) -> Tree:
    keys = trees[0].keys()
    for other in trees[1:]:
        if other.keys() != keys:
            raise ValueError(f"tree key mismatch: {sorted(keys)} vs {sorted(other.keys())}")
    return {k: fn(*(t[k] for t in trees)) for k in keys}


def zeros_like_tree(tree: Tree) -> Tree:
    return {k: np.zeros_like(v) for k, v in tree.items()}


def n_parameters(tree: Tree) -> int:
    return int(sum(v.size for v in tree.values()))


def global_norm(tree: Tree) -> float:
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in tree.values())))


def clip_by_global_norm(tree: Tree, max_norm: float) -> tuple[Tree, float]:
    """Scale the whole tree so its global L2 norm is at most max_norm.

    Returns (clipped tree, pre-clip norm).
    """
    norm = global_norm(tree)
    if norm <= max_norm or norm == 0.0:
        return tree, norm
    scale = max_norm / norm
    return {k: v * scale for k, v in tree.items()}, norm


def flat_get(tree: Tree, index: int) -> float:
    """Read one scalar by position in key-sorted flattened order."""
    for key in sorted(tree):
        arr = tree[key]
        if index < arr.size:
            return float(arr.flat[index])
        index -= arr.size
    raise IndexError("flat index out of range")


def flat_add(tree: Tree, index: int, delta: float) -> None:
    """Add delta to one scalar in key-sorted flattened order (in place)."""
    for key in sorted(tree):
        arr = tree[key]
        if index < arr.size:
            arr.flat[index] += delta
            return
        index -= arr.size
    raise IndexError("flat index out of range")
