"""Adam over parameter trees, pure-functional with bias correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trees import Tree, zeros_like_tree


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: Tree
    v: Tree
    step: int
    config: AdamConfig


def adam_init(params: Tree, config: AdamConfig = AdamConfig()) -> AdamState:
    return AdamState(m=zeros_like_tree(params), v=zeros_like_tree(params), step=0, config=config)


def adam_update(params: Tree, grads: Tree, state: AdamState) -> tuple[Tree, AdamState]:
    """One Adam step; returns (new params, new state), inputs untouched."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient trees disagree")
    cfg = state.config
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params: Tree = {}
    new_m: Tree = {}
    new_v: Tree = {}
    for key, p in params.items():
        g = grads[key]
        m = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * (g * g)
        new_params[key] = p - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t, config=cfg)
