"""Training and evaluation of the learned plant model.

The forward model is a sequence-to-sequence LSTM: it consumes a window of
commanded valve pressures and predicts the tip trajectory over the same
window, carrying its hidden state so a long rollout is just a longer window.
Inputs and targets are affinely normalized with statistics taken from the
training split only; the model file stores those constants so a saved model
is self-contained.

Training minimizes mean-squared error over every step of every window, with
exact gradients through the full window length. The ordering of training
windows is a first-class experimental knob: 'permuted' draws a fresh
shuffle every epoch, 'sequential' replays windows in recording order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import as_float_array, require
from .artifacts import write_csv
from .dataset import Run, SequencePair, epoch_order
from .errors import NonFiniteError, TrainingDiverged
from .nn import (
    LstmParams,
    adam_init,
    adam_update,
    init_lstm,
    lstm_apply,
    lstm_loss_and_grads,
)
from .nn.adam import AdamConfig
from .nn.serialize import load_arrays, save_arrays
from .rng import stream

# Channels with essentially no variance would otherwise blow up to huge
# normalized values; they carry no signal, so divide by one instead.
STD_FLOOR = 1e-8


@dataclass
class Normalization:
    """Per-channel affine map x -> (x - mean) / std."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalization":
        data = as_float_array(data, "data")
        flat = data.reshape(-1, data.shape[-1])
        require(flat.shape[0] >= 1, "cannot fit normalization to empty data")
        std = flat.std(axis=0)
        std = np.where(std < STD_FLOOR, 1.0, std)
        return cls(mean=flat.mean(axis=0), std=std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def ema(values, factor: float = 0.025) -> np.ndarray:
    """Exponential moving average: s_0 = v_0, s_t = (1-f) s_{t-1} + f v_t."""
    values = as_float_array(values, "values")
    require(values.ndim == 1 and values.shape[0] >= 1, "values must be a non-empty vector")
    require(0.0 < factor <= 1.0, "factor must be in (0, 1]")
    out = np.empty_like(values)
    acc = values[0]
    out[0] = acc
    for k in range(1, len(values)):
        acc = (1.0 - factor) * acc + factor * values[k]
        out[k] = acc
    return out


@dataclass(frozen=True)
class TrainConfig:
    """Forward-model optimization settings."""

    hidden_size: int = 64
    steps: int = 20000
    batch_size: int = 32
    learning_rate: float = 3e-4
    ordering: str = "permuted"
    order_seed: int = 0
    val_every: int = 500
    seed: int = 0

    def validate(self) -> None:
        require(self.hidden_size >= 1, "hidden_size must be >= 1")
        require(self.steps >= 0, "steps must be >= 0")
        require(self.batch_size >= 1, "batch_size must be >= 1")
        require(self.learning_rate > 0.0, "learning_rate must be > 0")
        require(self.ordering in ("permuted", "sequential"), f"unknown ordering {self.ordering!r}")
        require(self.val_every >= 1, "val_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "ordering": self.ordering,
            "order_seed": self.order_seed,
            "val_every": self.val_every,
            "seed": self.seed,
        }


@dataclass
class TrainReport:
    """Loss curves from one training run.

    val_losses[k] was measured after train step val_steps[k]. Wall-clock time
    is kept on the object but never written to artifacts, so reruns produce
    identical files.
    """

    train_losses: np.ndarray
    val_steps: np.ndarray
    val_losses: np.ndarray
    config: dict
    wall_clock_s: float = 0.0

    CSV_HEADER = ("step", "train_loss", "val_loss")

    def train_ema(self, factor: float = 0.025) -> np.ndarray:
        return ema(self.train_losses, factor)

    def final_val_ema(self, factor: float = 0.025) -> float:
        return float(ema(self.val_losses, factor)[-1])

    def to_csv(self, path) -> None:
        val_at = {int(s): float(v) for s, v in zip(self.val_steps, self.val_losses)}
        rows = (
            [step, self.train_losses[step - 1], val_at.get(step, float("nan"))]
            for step in range(1, len(self.train_losses) + 1)
        )
        write_csv(path, self.CSV_HEADER, rows)


@dataclass
class ForwardModel:
    """A trained plant model: LSTM weights plus the normalization constants
    learned from the training split."""

    params: LstmParams
    input_norm: Normalization
    output_norm: Normalization
    window_length: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_valves(self) -> int:
        return self.params.input_dim

    def rollout(
        self,
        pressures: np.ndarray,
        h0: np.ndarray | None = None,
        c0: np.ndarray | None = None,
        check_finite: bool = True,
    ) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
        """Open-loop prediction for a pressure schedule (T, n_valves).

        Starts from zero hidden state unless (h0, c0) carry state from an
        earlier call; returns (positions (T, 3), (h_T, c_T)) with hidden
        state shaped (hidden_size,).
        """
        pressures = as_float_array(pressures, "pressures")
        require(
            pressures.ndim == 2 and pressures.shape[1] == self.n_valves,
            f"pressures must be (T, {self.n_valves}), got {pressures.shape}",
        )
        H = self.params.hidden_size
        if pressures.shape[0] == 0:
            h = np.zeros(H) if h0 is None else np.asarray(h0, dtype=np.float64)
            c = np.zeros(H) if c0 is None else np.asarray(c0, dtype=np.float64)
            return np.zeros((0, 3)), (h, c)
        xs = self.input_norm.normalize(pressures)[None, :, :]
        hb = None if h0 is None else np.asarray(h0, dtype=np.float64).reshape(1, H)
        cb = None if c0 is None else np.asarray(c0, dtype=np.float64).reshape(1, H)
        ys, h_T, c_T = lstm_apply(self.params, xs, hb, cb, check_finite=check_finite)
        return self.output_norm.denormalize(ys[0]), (h_T[0], c_T[0])

    def predict_windows(self, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Predict positions for stacked windows (N, W, n_valves), each from
        zero hidden state. Returns (N, W, 3) in mm."""
        inputs = as_float_array(inputs, "inputs")
        require(inputs.ndim == 3, "inputs must be (N, W, n_valves)")
        out = np.empty(inputs.shape[:2] + (3,))
        xs = self.input_norm.normalize(inputs)
        for lo in range(0, inputs.shape[0], batch_size):
            ys, _, _ = lstm_apply(self.params, xs[lo : lo + batch_size], check_finite=False)
            out[lo : lo + batch_size] = self.output_norm.denormalize(ys)
        return out

    def save(self, path) -> None:
        arrays = dict(self.params.to_tree())
        arrays["input_mean"] = self.input_norm.mean
        arrays["input_std"] = self.input_norm.std
        arrays["output_mean"] = self.output_norm.mean
        arrays["output_std"] = self.output_norm.std
        metadata = dict(self.metadata)
        metadata["window_length"] = self.window_length
        save_arrays(path, "forward_model", arrays, metadata)

    @classmethod
    def load(cls, path) -> "ForwardModel":
        kind, arrays, metadata = load_arrays(path)
        require(kind == "forward_model", f"{path}: expected a forward_model file, got {kind!r}")
        norm_keys = ("input_mean", "input_std", "output_mean", "output_std")
        params = LstmParams.from_tree({k: v for k, v in arrays.items() if k not in norm_keys})
        metadata = dict(metadata)
        window_length = int(metadata.pop("window_length"))
        return cls(
            params=params,
            input_norm=Normalization(mean=arrays["input_mean"], std=arrays["input_std"]),
            output_norm=Normalization(mean=arrays["output_mean"], std=arrays["output_std"]),
            window_length=window_length,
            metadata=metadata,
        )


def _stack_pairs(pairs: list[SequencePair]) -> tuple[np.ndarray, np.ndarray]:
    require(len(pairs) >= 1, "need at least one pair")
    inputs = np.stack([p.inputs for p in pairs]).astype(np.float64)
    targets = np.stack([p.targets for p in pairs]).astype(np.float64)
    return inputs, targets


def _val_loss(params: LstmParams, xs: np.ndarray, ts: np.ndarray, batch_size: int) -> float:
    total = 0.0
    count = 0
    for lo in range(0, xs.shape[0], batch_size):
        xb = xs[lo : lo + batch_size]
        ys, _, _ = lstm_apply(params, xb, check_finite=False)
        err = ys - ts[lo : lo + batch_size]
        total += float(np.sum(err * err))
        count += err.size
    return total / count


def train_forward(
    train_pairs: list[SequencePair],
    val_pairs: list[SequencePair],
    cfg: TrainConfig,
) -> tuple[ForwardModel, TrainReport]:
    """Train the plant model; returns the model and its loss report.

    Normalization statistics come from the train pairs alone. Windows are
    visited according to cfg.ordering: one epoch walks every train window
    once, and the permuted ordering reshuffles with a per-epoch seed
    (order_seed + epoch). Validation runs every val_every steps and at the
    final step. A non-finite loss raises TrainingDiverged carrying the
    partial report.
    """
    cfg.validate()
    train_x, train_t = _stack_pairs(train_pairs)
    val_x, val_t = _stack_pairs(val_pairs)
    window = train_x.shape[1]
    n_valves = train_x.shape[2]
    input_norm = Normalization.fit(train_x)
    output_norm = Normalization.fit(train_t)
    train_x = input_norm.normalize(train_x)
    train_t = output_norm.normalize(train_t)
    val_x = input_norm.normalize(val_x)
    val_t = output_norm.normalize(val_t)

    params = init_lstm(n_valves, cfg.hidden_size, 3, stream(cfg.seed))
    tree = params.to_tree()
    adam_state = adam_init(tree, AdamConfig(lr=cfg.learning_rate))

    n_train = train_x.shape[0]
    train_losses = np.empty(cfg.steps)
    val_steps: list[int] = []
    val_losses: list[float] = []
    started = time.perf_counter()

    def partial_report(done: int) -> TrainReport:
        return TrainReport(
            train_losses=train_losses[:done].copy(),
            val_steps=np.asarray(val_steps, dtype=np.int64),
            val_losses=np.asarray(val_losses, dtype=np.float64),
            config=cfg.to_dict(),
            wall_clock_s=time.perf_counter() - started,
        )

    if cfg.steps == 0:
        # no-op training: report the validation loss of the untouched init
        val_steps.append(0)
        val_losses.append(_val_loss(params, val_x, val_t, cfg.batch_size))

    step = 0
    epoch = 0
    while step < cfg.steps:
        order = epoch_order(n_train, cfg.ordering, cfg.order_seed, epoch)
        for lo in range(0, n_train, cfg.batch_size):
            if step >= cfg.steps:
                break
            idx = order[lo : lo + cfg.batch_size]
            xb = train_x[idx]
            tb = train_t[idx]
            params = LstmParams.from_tree(tree)
            loss, grads = lstm_loss_and_grads(params, xb, tb, check_finite=False)
            if not np.isfinite(loss):
                # rerun with per-step checks to name the offending step
                try:
                    lstm_loss_and_grads(params, xb, tb, check_finite=True)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"training loss became non-finite at train step {step + 1} "
                        f"(sequence step {exc.step})",
                        report=partial_report(step),
                    ) from exc
                raise TrainingDiverged(
                    f"training loss became non-finite at train step {step + 1}",
                    report=partial_report(step),
                )
            tree, adam_state = adam_update(tree, grads, adam_state)
            train_losses[step] = loss
            step += 1
            if step % cfg.val_every == 0 or step == cfg.steps:
                if not val_steps or val_steps[-1] != step:
                    val_steps.append(step)
                    val_losses.append(
                        _val_loss(LstmParams.from_tree(tree), val_x, val_t, cfg.batch_size)
                    )
        epoch += 1

    model = ForwardModel(
        params=LstmParams.from_tree(tree),
        input_norm=input_norm,
        output_norm=output_norm,
        window_length=window,
        metadata={"n_valves": n_valves, "train_config": cfg.to_dict()},
    )
    return model, partial_report(cfg.steps)


@dataclass
class EvalReport:
    """Open-loop accuracy summary, in mm where applicable."""

    rmse_mm: float
    rmse_mm_per_axis: np.ndarray
    mse_normalized: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "rmse_mm": self.rmse_mm,
            "rmse_mm_per_axis": [float(v) for v in self.rmse_mm_per_axis],
            "mse_normalized": self.mse_normalized,
            "n_samples": self.n_samples,
        }


def evaluate_windows(model: ForwardModel, pairs: list[SequencePair], batch_size: int = 32) -> EvalReport:
    """Window-level open-loop evaluation (each window from zero state)."""
    inputs, targets = _stack_pairs(pairs)
    pred = model.predict_windows(inputs, batch_size)
    return _eval_report(model, pred.reshape(-1, 3), targets.reshape(-1, 3))


def evaluate_run(model: ForwardModel, run: Run) -> EvalReport:
    """Whole-run open-loop evaluation: one rollout across the full recording."""
    pred, _ = model.rollout(run.p, check_finite=False)
    return _eval_report(model, pred, run.pos)


def _eval_report(model: ForwardModel, pred: np.ndarray, truth: np.ndarray) -> EvalReport:
    err = pred - truth
    per_axis = np.sqrt(np.mean(err * err, axis=0))
    norm_err = model.output_norm.normalize(pred) - model.output_norm.normalize(truth)
    return EvalReport(
        rmse_mm=float(np.sqrt(np.mean(np.sum(err * err, axis=1)))),
        rmse_mm_per_axis=per_axis,
        mse_normalized=float(np.mean(norm_err * norm_err)),
        n_samples=truth.shape[0],
    )


class ForwardDynamicsRegressor(BaseEstimator):
    """Estimator facade over train_forward / rollout.

    fit takes a list of SequencePair windows (plus an optional validation
    list); predict maps a pressure schedule (T, n_valves) to positions.
    """

    def __init__(
        self,
        hidden_size: int = 64,
        train_steps: int = 20000,
        batch_size: int = 32,
        learning_rate: float = 3e-4,
        ordering: str = "permuted",
        order_seed: int = 0,
        val_every: int = 500,
        seed: int = 0,
    ):
        self.hidden_size = hidden_size
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.ordering = ordering
        self.order_seed = order_seed
        self.val_every = val_every
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            hidden_size=self.hidden_size,
            steps=self.train_steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            ordering=self.ordering,
            order_seed=self.order_seed,
            val_every=self.val_every,
            seed=self.seed,
        )

    def fit(self, X: list[SequencePair], y=None, val_pairs: list[SequencePair] | None = None):
        # Without a validation set, validate on the training windows; the
        # report is then a fit-quality curve rather than a generalization one.
        self.model_, self.report_ = train_forward(X, val_pairs if val_pairs else X, self._config())
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        if isinstance(X, Run):
            return self.model_.rollout(X.p)[0]
        return self.model_.rollout(X)[0]

    def score(self, X: list[SequencePair], y=None) -> float:
        """Negative normalized MSE (greater is better)."""
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before score")
        return -evaluate_windows(self.model_, X).mse_normalized
