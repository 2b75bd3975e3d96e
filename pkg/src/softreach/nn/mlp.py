"""Small fully-connected networks with explicit backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trees import Tree

_ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class MlpParams:
    """Layer weights (in, out), biases (out,), and one activation tag per
    layer ('tanh' | 'relu' | 'identity')."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must align")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def to_tree(self, prefix: str = "") -> Tree:
        tree: Tree = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            tree[f"{prefix}w{i}"] = w
            tree[f"{prefix}b{i}"] = b
        return tree

    def from_tree(self, tree: Tree, prefix: str = "") -> "MlpParams":
        weights = [tree[f"{prefix}w{i}"] for i in range(self.n_layers)]
        biases = [tree[f"{prefix}b{i}"] for i in range(self.n_layers)]
        return MlpParams(weights=weights, biases=biases, activations=list(self.activations))


def init_mlp(dims: list[int], activations: list[str], rng: np.random.Generator) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise ValueError("dims must list layer sizes and activations one tag per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases, activations=list(activations))


def mlp_forward(params: MlpParams, x: np.ndarray, want_cache: bool = False):
    """Apply the network to x (..., in_dim).

    Returns out, or (out, cache) when want_cache is set.
    """
    cache = [] if want_cache else None
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ w + b
        if act == "tanh":
            a = np.tanh(z)
        elif act == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z
        if want_cache:
            cache.append((h, a))
        h = a
    return (h, cache) if want_cache else h


def mlp_backward(params: MlpParams, cache, dout: np.ndarray) -> tuple[Tree, np.ndarray]:
    """Gradients for a forward pass recorded with want_cache=True.

    dout matches the forward output shape. Returns (grad tree matching
    to_tree() layout with empty prefix, gradient w.r.t. the input).
    """
    grads: Tree = {}
    da = dout
    for i in reversed(range(params.n_layers)):
        h_in, a = cache[i]
        act = params.activations[i]
        if act == "tanh":
            dz = da * (1.0 - a * a)
        elif act == "relu":
            dz = da * (a > 0.0)
        else:
            dz = da
        flat_h = h_in.reshape(-1, h_in.shape[-1])
        flat_dz = dz.reshape(-1, dz.shape[-1])
        grads[f"w{i}"] = flat_h.T @ flat_dz
        grads[f"b{i}"] = flat_dz.sum(axis=0)
        da = dz @ params.weights[i].T
    return grads, da
