"""Run logs, timestamp alignment, and sliding-window training pairs.

A *run* is one contiguous recording: commanded pressures and measured tip
positions on a common time grid. Raw hardware logs arrive as two files with
independent clocks (the pressure logger ticks slowly, the tracker fast);
``align`` resamples them onto the tracker timestamps by nearest-neighbor
matching. Training consumes fixed-length windows sliced from runs, split
into train/test sets and fed to the optimizer in either their original
temporal order or a freshly shuffled order each epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_float_array, require, require_finite
from .artifacts import read_table, write_csv
from .rng import stream


@dataclass
class Run:
    """One recording: strictly increasing times (s), pressures (kPa),
    positions (mm)."""

    t: np.ndarray
    p: np.ndarray
    pos: np.ndarray
    run_id: str = ""

    def __post_init__(self):
        self.t = as_float_array(self.t, "t")
        self.p = as_float_array(self.p, "p")
        self.pos = as_float_array(self.pos, "pos")
        require(self.t.ndim == 1, "t must be 1-D")
        n = self.t.shape[0]
        require(self.p.ndim == 2 and self.p.shape[0] == n, "p must be (len(t), n_valves)")
        require(self.pos.ndim == 2 and self.pos.shape == (n, 3), "pos must be (len(t), 3)")

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def n_valves(self) -> int:
        return self.p.shape[1]

    def validate(self) -> None:
        for name, arr in (("t", self.t), ("p", self.p), ("pos", self.pos)):
            require_finite(arr, name)
        require(len(self) >= 1, "run must contain at least one sample")
        require(bool((np.diff(self.t) > 0.0).all()), "timestamps must be strictly increasing")

    def csv_header(self) -> list[str]:
        return (
            ["t_s"]
            + [f"p{j + 1}_kpa" for j in range(self.n_valves)]
            + ["x_mm", "y_mm", "z_mm"]
        )

    def to_csv(self, path) -> None:
        rows = ([self.t[i], *self.p[i], *self.pos[i]] for i in range(len(self)))
        write_csv(path, self.csv_header(), rows)

    @classmethod
    def from_csv(cls, path, run_id: str | None = None) -> "Run":
        header, data = read_table(path)
        n_valves = len(header) - 4
        require(n_valves >= 1, f"{path}: not a run CSV (too few columns)")
        expected = (
            ["t_s"] + [f"p{j + 1}_kpa" for j in range(n_valves)] + ["x_mm", "y_mm", "z_mm"]
        )
        if header != expected:
            raise ValueError(f"{path}: line 1: expected header {','.join(expected)!r}")
        run = cls(
            t=data[:, 0],
            p=data[:, 1 : 1 + n_valves],
            pos=data[:, 1 + n_valves :],
            run_id=run_id if run_id is not None else str(path),
        )
        run.validate()
        return run


def nearest_indices(reference_t: np.ndarray, query_t: np.ndarray) -> np.ndarray:
    """Index into reference_t of the sample nearest each query time.

    Queries before the first reference map to index 0 (earliest value);
    exact midpoints resolve to the earlier sample.
    """
    reference_t = as_float_array(reference_t, "reference_t")
    query_t = as_float_array(query_t, "query_t")
    right = np.searchsorted(reference_t, query_t, side="left")
    right = np.clip(right, 0, len(reference_t) - 1)
    left = np.maximum(right - 1, 0)
    d_left = np.abs(query_t - reference_t[left])
    d_right = np.abs(reference_t[right] - query_t)
    return np.where(d_left <= d_right, left, right)


def align(
    pressure_t: np.ndarray,
    pressure_p: np.ndarray,
    mocap_t: np.ndarray,
    mocap_pos: np.ndarray,
    run_id: str = "",
) -> Run:
    """Merge a pressure log and a tracker log into one run.

    The tracker clock wins: output rows sit on mocap timestamps, and each row
    carries the pressure sample nearest in time (ties to the earlier sample,
    rows before the first pressure sample get the earliest one).
    """
    pressure_t = as_float_array(pressure_t, "pressure_t")
    pressure_p = as_float_array(pressure_p, "pressure_p")
    mocap_t = as_float_array(mocap_t, "mocap_t")
    mocap_pos = as_float_array(mocap_pos, "mocap_pos")
    require(pressure_t.ndim == 1 and len(pressure_t) >= 1, "pressure log is empty")
    require(mocap_t.ndim == 1 and len(mocap_t) >= 1, "mocap log is empty")
    require(pressure_p.shape[0] == len(pressure_t), "pressure log length mismatch")
    require(mocap_pos.shape == (len(mocap_t), 3), "mocap log must have x/y/z columns")
    require(bool((np.diff(pressure_t) > 0.0).all()), "pressure timestamps must increase")
    require(bool((np.diff(mocap_t) > 0.0).all()), "mocap timestamps must increase")
    idx = nearest_indices(pressure_t, mocap_t)
    run = Run(t=mocap_t.copy(), p=pressure_p[idx], pos=mocap_pos.copy(), run_id=run_id)
    run.validate()
    return run


@dataclass
class SequencePair:
    """One training window: inputs (W, n_valves) -> targets (W, 3).

    Arrays are views into the source run; copy before mutating.
    """

    inputs: np.ndarray
    targets: np.ndarray
    source_run: str = ""
    start_index: int = 0


def pair_count(run_length: int, window_length: int, step: int) -> int:
    """Number of windows a run of the given length yields."""
    require(window_length >= 1, "window_length must be >= 1")
    require(step >= 1, "step must be >= 1")
    if run_length < window_length:
        return 0
    return (run_length - window_length) // step + 1


def make_pairs(run: Run, window_length: int = 512, step: int = 1) -> list[SequencePair]:
    """Slice a run into overlapping windows."""
    require(
        len(run) >= window_length,
        f"run {run.run_id!r} has {len(run)} samples, needs >= {window_length}",
    )
    n = pair_count(len(run), window_length, step)
    return [
        SequencePair(
            inputs=run.p[k * step : k * step + window_length],
            targets=run.pos[k * step : k * step + window_length],
            source_run=run.run_id,
            start_index=k * step,
        )
        for k in range(n)
    ]


@dataclass(frozen=True)
class DatasetConfig:
    """Windowing, splitting and ordering choices.

    ordering     'permuted' reshuffles the train pairs every epoch with a
                 deterministic per-epoch seed; 'sequential' keeps source
                 order.
    split_level  'pair' splits individual windows; 'run' holds out whole
                 runs so no test window overlaps training data.
    """

    window_length: int = 512
    step: int = 1
    split_fraction: float = 0.75
    ordering: str = "permuted"
    split_seed: int = 0
    split_level: str = "pair"

    def validate(self) -> None:
        require(self.window_length >= 1, "window_length must be >= 1")
        require(self.step >= 1, "step must be >= 1")
        require(0.0 < self.split_fraction < 1.0, "split_fraction must be in (0, 1)")
        require(self.ordering in ("permuted", "sequential"), f"unknown ordering {self.ordering!r}")
        require(self.split_level in ("pair", "run"), f"unknown split_level {self.split_level!r}")


def split_and_order(
    pairs: list[SequencePair], cfg: DatasetConfig
) -> tuple[list[SequencePair], list[SequencePair]]:
    """Split pairs into (train, test), both kept in source order.

    Pair-level: a seeded permutation assigns floor(split_fraction * n) pairs
    to train. Run-level: whole runs are assigned to the test side, in seeded
    order, until the test side holds at least (1 - split_fraction) of the
    pairs; runs never straddle the split.
    """
    cfg.validate()
    n = len(pairs)
    require(n >= 1, "no pairs to split")
    rng = stream(cfg.split_seed)
    if cfg.split_level == "pair":
        perm = rng.permutation(n)
        n_train = int(np.floor(cfg.split_fraction * n))
        require(1 <= n_train < n, "split leaves an empty side; adjust split_fraction")
        train_idx = np.sort(perm[:n_train])
        test_idx = np.sort(perm[n_train:])
        return [pairs[i] for i in train_idx], [pairs[i] for i in test_idx]
    run_ids = []
    for pair in pairs:
        if pair.source_run not in run_ids:
            run_ids.append(pair.source_run)
    require(len(run_ids) >= 2, "run-level split needs at least two runs")
    order = rng.permutation(len(run_ids))
    target_test = n - int(np.floor(cfg.split_fraction * n))
    test_runs: set[str] = set()
    test_count = 0
    for k in order:
        if test_count >= target_test:
            break
        test_runs.add(run_ids[k])
        test_count += sum(1 for pair in pairs if pair.source_run == run_ids[k])
    require(test_count < n, "run-level split put every run in the test side")
    train = [pair for pair in pairs if pair.source_run not in test_runs]
    test = [pair for pair in pairs if pair.source_run in test_runs]
    return train, test


def epoch_order(n_pairs: int, ordering: str, order_seed: int, epoch: int) -> np.ndarray:
    """Index order for one pass over the train pairs.

    Permuted ordering reshuffles each epoch on the stream keyed by
    order_seed + epoch; sequential ordering is the identity.
    """
    require(n_pairs >= 1, "need at least one pair")
    require(ordering in ("permuted", "sequential"), f"unknown ordering {ordering!r}")
    if ordering == "sequential":
        return np.arange(n_pairs)
    return stream(order_seed + epoch).permutation(n_pairs)


class SlidingWindowPairs(BaseEstimator, TransformerMixin):
    """Transformer view of :func:`make_pairs` over one run or a list of runs.

    Stateless; fit only validates parameters.
    """

    def __init__(self, window_length: int = 512, step: int = 1):
        self.window_length = window_length
        self.step = step

    def fit(self, X, y=None):
        pair_count(0, self.window_length, self.step)
        return self

    def transform(self, X) -> list[SequencePair]:
        runs = [X] if isinstance(X, Run) else list(X)
        out: list[SequencePair] = []
        for run in runs:
            require(isinstance(run, Run), "SlidingWindowPairs expects Run objects")
            out.extend(make_pairs(run, self.window_length, self.step))
        return out


def dataset_manifest(
    run_files: list[str], cfg: DatasetConfig, train: list[SequencePair], test: list[SequencePair]
) -> dict:
    """JSON-serializable description of a built dataset split."""
    return {
        "runs": list(run_files),
        "config": {
            "window_length": cfg.window_length,
            "step": cfg.step,
            "split_fraction": cfg.split_fraction,
            "ordering": cfg.ordering,
            "split_seed": cfg.split_seed,
            "split_level": cfg.split_level,
        },
        "split": {
            "train": [[p.source_run, p.start_index] for p in train],
            "test": [[p.source_run, p.start_index] for p in test],
        },
    }


def pairs_from_manifest(manifest: dict, runs: dict[str, Run]) -> tuple[list[SequencePair], list[SequencePair]]:
    """Rebuild the exact train/test pairs recorded in a dataset manifest.

    ``runs`` maps run identifiers (as recorded in the manifest) to loaded
    runs.
    """
    window = int(manifest["config"]["window_length"])
    out: list[list[SequencePair]] = []
    for side in ("train", "test"):
        pairs = []
        for run_key, start in manifest["split"][side]:
            require(run_key in runs, f"manifest references missing run {run_key!r}")
            run = runs[run_key]
            start = int(start)
            require(start + window <= len(run), f"window [{start}, {start + window}) exceeds run {run_key!r}")
            pairs.append(
                SequencePair(
                    inputs=run.p[start : start + window],
                    targets=run.pos[start : start + window],
                    source_run=run_key,
                    start_index=start,
                )
            )
        out.append(pairs)
    return out[0], out[1]
