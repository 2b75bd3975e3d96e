"""Single-layer LSTM with exact backpropagation through time.

The four gate pre-activations are packed into one matrix per step in the
column order [input, forget, output | candidate], so the sigmoid applies to
one contiguous block and the tanh to the other:

    z_t = x_t W_x + h_{t-1} W_h + b                   (batch, 4H)
    i, f, o = sigmoid(z[:, :3H]),  g = tanh(z[:, 3H:])
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)
    y_t = h_t W_out + b_out

Sequences are processed time-major internally; the input projection for all
steps is computed as one matrix product up front, and the weight gradients
are accumulated as single stacked products after the reverse pass, so the
per-step work is one (batch, H) x (H, 4H) product plus elementwise ops.

Gradients are exact over the full sequence length (no truncation). The
optional per-step reset mask zeroes the carried state *before* a step
consumes it, which is how policy training replays rollouts that cross
episode boundaries; the backward pass stops gradient flow at the same
boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteError
from ._kernels import backward_pointwise, forward_pointwise
from .trees import Tree


@dataclass
class LstmCellParams:
    """Recurrent core weights: w_x (in, 4H), w_h (H, 4H), b (4H,)."""

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.w_x.ndim != 2 or self.w_h.ndim != 2 or self.b.ndim != 1:
            raise ValueError("malformed LSTM cell parameter shapes")
        four_h = self.w_x.shape[1]
        if four_h % 4 != 0 or self.w_h.shape != (four_h // 4, four_h) or self.b.shape != (four_h,):
            raise ValueError("LSTM cell parameter shapes disagree")

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    def to_tree(self, prefix: str = "") -> Tree:
        return {f"{prefix}w_x": self.w_x, f"{prefix}w_h": self.w_h, f"{prefix}b": self.b}

    @classmethod
    def from_tree(cls, tree: Tree, prefix: str = "") -> "LstmCellParams":
        return cls(w_x=tree[f"{prefix}w_x"], w_h=tree[f"{prefix}w_h"], b=tree[f"{prefix}b"])


@dataclass
class LstmParams:
    """Cell plus linear readout: w_out (H, out_dim), b_out (out_dim,)."""

    cell: LstmCellParams
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        if self.w_out.shape != (self.cell.hidden_size, self.b_out.shape[0]):
            raise ValueError("readout shapes disagree with the cell")

    @property
    def input_dim(self) -> int:
        return self.cell.input_dim

    @property
    def hidden_size(self) -> int:
        return self.cell.hidden_size

    @property
    def output_dim(self) -> int:
        return self.b_out.shape[0]

    def to_tree(self) -> Tree:
        tree = self.cell.to_tree()
        tree["w_out"] = self.w_out
        tree["b_out"] = self.b_out
        return tree

    @classmethod
    def from_tree(cls, tree: Tree) -> "LstmParams":
        return cls(cell=LstmCellParams.from_tree(tree), w_out=tree["w_out"], b_out=tree["b_out"])


def init_lstm_cell(
    input_dim: int, hidden_size: int, rng: np.random.Generator, forget_bias: float = 1.0
) -> LstmCellParams:
    """Uniform(-1/sqrt(fan_in), ...) weights; biases zero except the forget
    gate, which starts positive so early training does not flush the cell
    state. Draw order: w_x then w_h."""
    bx = 1.0 / np.sqrt(input_dim)
    bh = 1.0 / np.sqrt(hidden_size)
    w_x = rng.uniform(-bx, bx, (input_dim, 4 * hidden_size))
    w_h = rng.uniform(-bh, bh, (hidden_size, 4 * hidden_size))
    b = np.zeros(4 * hidden_size)
    b[hidden_size : 2 * hidden_size] = forget_bias
    return LstmCellParams(w_x=w_x, w_h=w_h, b=b)


def init_lstm(
    input_dim: int,
    hidden_size: int,
    output_dim: int,
    rng: np.random.Generator,
    forget_bias: float = 1.0,
) -> LstmParams:
    cell = init_lstm_cell(input_dim, hidden_size, rng, forget_bias)
    bound = 1.0 / np.sqrt(hidden_size)
    w_out = rng.uniform(-bound, bound, (hidden_size, output_dim))
    b_out = np.zeros(output_dim)
    return LstmParams(cell=cell, w_out=w_out, b_out=b_out)


def _sigmoid_inplace(a: np.ndarray) -> None:
    np.negative(a, out=a)
    np.exp(a, out=a)
    a += 1.0
    np.reciprocal(a, out=a)


def cell_step(cell: LstmCellParams, x, h, c):
    """One step for a single state vector or a batch of rows.

    Returns (h', c'). Used for interactive stepping; sequence processing
    should go through cell_apply.
    """
    H = cell.hidden_size
    z = x @ cell.w_x + h @ cell.w_h + cell.b
    zs = z[..., : 3 * H]
    _sigmoid_inplace(zs)
    g = np.tanh(z[..., 3 * H :])
    i = z[..., :H]
    f = z[..., H : 2 * H]
    o = z[..., 2 * H : 3 * H]
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    return h_next, c_next


def lstm_step(params: LstmParams, x, h, c):
    """One step plus readout: returns (h', c', y)."""
    h_next, c_next = cell_step(params.cell, x, h, c)
    return h_next, c_next, h_next @ params.w_out + params.b_out


@dataclass
class _CellCache:
    xs: np.ndarray      # (T, B, in)
    gates: np.ndarray   # (T, B, 4H), post-activation [i, f, o | g]
    hprev: np.ndarray   # (T, B, H), state consumed by step t (after resets)
    cprev: np.ndarray   # (T, B, H)
    tc: np.ndarray      # (T, B, H), tanh(c_t)
    keeps: np.ndarray | None  # (T, B), 0 where the state was reset before step t


def cell_apply(
    cell: LstmCellParams,
    xs: np.ndarray,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
    resets: np.ndarray | None = None,
    want_cache: bool = False,
    check_finite: bool = True,
):
    """Run the cell over a time-major batch xs of shape (T, B, input_dim).

    resets, when given, is (T, B); entries equal to 1 zero the carried
    (h, c) before step t consumes it. Returns (hs (T, B, H), h_T, c_T,
    cache-or-None). Raises NonFiniteError naming the first bad step when
    check_finite is set.
    """
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if xs.ndim != 3 or xs.shape[2] != cell.input_dim:
        raise ValueError(f"xs must be (T, B, {cell.input_dim}), got {xs.shape}")
    T, B, _ = xs.shape
    H = cell.hidden_size
    h = np.zeros((B, H)) if h0 is None else np.array(h0, dtype=np.float64)
    c = np.zeros((B, H)) if c0 is None else np.array(c0, dtype=np.float64)
    if h.shape != (B, H) or c.shape != (B, H):
        raise ValueError("h0/c0 must have shape (batch, hidden)")

    xw = xs.reshape(T * B, -1) @ cell.w_x
    xw += cell.b
    xw = xw.reshape(T, B, 4 * H)

    hs = np.empty((T, B, H))
    gates = np.empty((T, B, 4 * H))
    hprev = np.empty((T, B, H)) if want_cache else None
    cprev = np.empty((T, B, H)) if want_cache else None
    tcs = np.empty((T, B, H)) if want_cache else None
    keeps = None
    if resets is not None:
        resets = np.asarray(resets, dtype=np.float64)
        if resets.shape != (T, B):
            raise ValueError(f"resets must be (T, B) = ({T}, {B}), got {resets.shape}")
        keeps = 1.0 - resets

    tc = np.empty((B, H))
    for t in range(T):
        if keeps is not None:
            h *= keeps[t][:, None]
            c *= keeps[t][:, None]
        if want_cache:
            hprev[t] = h
            cprev[t] = c
        z = gates[t]
        np.matmul(h, cell.w_h, out=z)
        forward_pointwise(z, xw[t], c, h, tc)
        if want_cache:
            tcs[t] = tc
        hs[t] = h
        if check_finite and not np.isfinite(h).all():
            raise NonFiniteError("LSTM hidden state became non-finite", step=t)
    cache = (
        _CellCache(xs=xs, gates=gates, hprev=hprev, cprev=cprev, tc=tcs, keeps=keeps)
        if want_cache
        else None
    )
    return hs, h.copy(), c.copy(), cache


def cell_backward(
    cell: LstmCellParams,
    cache: _CellCache,
    dhs: np.ndarray,
    dh_final: np.ndarray | None = None,
    dc_final: np.ndarray | None = None,
) -> tuple[Tree, np.ndarray, np.ndarray]:
    """Exact reverse pass for a cached cell_apply.

    dhs (T, B, H) is the loss gradient injected at each step's hidden output;
    dh_final/dc_final add gradient arriving at the final carried state.
    Returns ({'w_x','w_h','b'}, dh0, dc0).
    """
    T, B, H = dhs.shape
    gates, tcs, hprev, cprev = cache.gates, cache.tc, cache.hprev, cache.cprev
    w_hT = np.ascontiguousarray(cell.w_h.T)
    dG = np.empty((T, B, 4 * H))
    dh = np.zeros((B, H)) if dh_final is None else np.array(dh_final, dtype=np.float64)
    dc = np.zeros((B, H)) if dc_final is None else np.array(dc_final, dtype=np.float64)
    dhs = np.ascontiguousarray(dhs, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        backward_pointwise(gates[t], tcs[t], cprev[t], dhs[t], dh, dc, dG[t])
        np.matmul(dG[t], w_hT, out=dh)
        if cache.keeps is not None:
            keep = cache.keeps[t][:, None]
            dh *= keep
            dc *= keep
    flat_dG = dG.reshape(T * B, 4 * H)
    grads: Tree = {
        "w_x": cache.xs.reshape(T * B, -1).T @ flat_dG,
        "w_h": hprev.reshape(T * B, H).T @ flat_dG,
        "b": flat_dG.sum(axis=0).reshape(-1),
    }
    return grads, dh, dc


def lstm_apply(
    params: LstmParams,
    xs: np.ndarray,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
    check_finite: bool = True,
):
    """Forward pass over a batch-major batch xs (B, T, input_dim).

    Returns (ys (B, T, output_dim), h_T, c_T).
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 3:
        raise ValueError(f"xs must be (B, T, input_dim), got shape {xs.shape}")
    xs_tm = np.ascontiguousarray(xs.transpose(1, 0, 2))
    hs, h_T, c_T, _ = cell_apply(params.cell, xs_tm, h0, c0, check_finite=check_finite)
    T, B, H = hs.shape
    ys = hs.reshape(T * B, H) @ params.w_out + params.b_out
    ys = ys.reshape(T, B, -1).transpose(1, 0, 2)
    return np.ascontiguousarray(ys), h_T, c_T


def lstm_loss_and_grads(
    params: LstmParams,
    xs: np.ndarray,
    targets: np.ndarray,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
    check_finite: bool = True,
) -> tuple[float, Tree]:
    """Mean-squared-error loss over every step and exact gradients.

    xs (B, T, in), targets (B, T, out). The mean runs over batch, time and
    output channels. Gradient keys match LstmParams.to_tree().
    """
    xs = np.asarray(xs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if xs.ndim != 3 or targets.ndim != 3 or xs.shape[:2] != targets.shape[:2]:
        raise ValueError("xs and targets must be (B, T, *) with matching batch and time")
    xs_tm = np.ascontiguousarray(xs.transpose(1, 0, 2))
    targets_tm = np.ascontiguousarray(targets.transpose(1, 0, 2))
    hs, _, _, cache = cell_apply(
        params.cell, xs_tm, h0, c0, want_cache=True, check_finite=check_finite
    )
    T, B, H = hs.shape
    out_dim = params.output_dim
    flat_h = hs.reshape(T * B, H)
    ys = flat_h @ params.w_out + params.b_out
    err = ys - targets_tm.reshape(T * B, out_dim)
    loss = float(np.mean(err * err))
    dy = err * (2.0 / err.size)
    grads: Tree = {
        "w_out": flat_h.T @ dy,
        "b_out": dy.sum(axis=0),
    }
    dhs = (dy @ params.w_out.T).reshape(T, B, H)
    cell_grads, _, _ = cell_backward(params.cell, cache, dhs)
    grads.update(cell_grads)
    return loss, grads
