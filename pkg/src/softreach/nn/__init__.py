"""Minimal float64 neural-network core: parameter trees, an LSTM with full
backpropagation through time, small MLPs, and Adam. Written directly in
numpy so every gradient is explicit and checkable against finite
differences."""

from .trees import global_norm, clip_by_global_norm, tree_map, zeros_like_tree
from .mlp import MlpParams, init_mlp, mlp_forward, mlp_backward
from .lstm import (
    LstmCellParams,
    LstmParams,
    init_lstm_cell,
    init_lstm,
    cell_step,
    lstm_step,
    cell_apply,
    cell_backward,
    lstm_apply,
    lstm_loss_and_grads,
)
from .adam import AdamConfig, AdamState, adam_init, adam_update
from .serialize import save_arrays, load_arrays

__all__ = [
    "global_norm",
    "clip_by_global_norm",
    "tree_map",
    "zeros_like_tree",
    "MlpParams",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "LstmCellParams",
    "LstmParams",
    "init_lstm_cell",
    "init_lstm",
    "cell_step",
    "lstm_step",
    "cell_apply",
    "cell_backward",
    "lstm_apply",
    "lstm_loss_and_grads",
    "AdamConfig",
    "AdamState",
    "adam_init",
    "adam_update",
    "save_arrays",
    "load_arrays",
]
