"""Budget-limited exploration of a pneumatic actuation space.

Training data for the forward model comes from driving the arm with a
mean-reverting random walk over valve pressures. Each step blends the
previous commanded pressures with fresh draws centered on the preload
pressure, clamps the blend to be positive, and rescales the whole vector so
the pressure total stays strictly below a safety budget:

    s_j = max(alpha * p_j + (1 - alpha) * d_j, floor),   d_j ~ N(p_b, noise_std^2)
    p'_j = p_max * sigmoid(beta * sum_k s_k) * s_j / sum_k s_k

Because the sigmoid lies in (0.5, 1) for positive arguments, the commanded
total always lands between half the budget and the budget itself, and alpha
directly controls how smooth consecutive commands are.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._validation import as_float_array, require, require_finite
from .artifacts import read_table, write_csv
from .rng import stream

# Candidate pressures are clamped here before rescaling, keeping every valve
# strictly positive and the rescaling denominator bounded away from zero.
PRESSURE_FLOOR_KPA = 1e-6

# In float64 sigmoid(x) rounds to exactly 1.0 once x > ~36.7, which would put
# the commanded total exactly on the budget. The clamp sits at 1e-9 rather
# than the asserted 1e-12 margin so that per-element rounding in the rescale
# can never push the numeric total past p_max * (1 - 1e-12).
_MAX_BUDGET_FRACTION = 1.0 - 1e-9


@dataclass(frozen=True)
class ExplorationConfig:
    """Parameters of the exploration walk.

    alpha        weight on the previous command, in [0, 1]; higher is smoother
    beta         sigmoid slope on the candidate total, > 0; higher pushes the
                 commanded total toward the budget
    p_max        hard budget on the pressure total, kPa
    p_b          preload pressure the walk reverts to, kPa
    noise_std    std of the reversion draws, kPa
    """

    alpha: float = 0.9
    beta: float = 0.1
    p_max: float = 13.0
    p_b: float = 2.0
    n_valves: int = 3
    n_steps: int = 50
    noise_std: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        require(0.0 <= self.alpha <= 1.0, f"alpha must be in [0, 1], got {self.alpha}")
        require(self.beta > 0.0, f"beta must be > 0, got {self.beta}")
        require(self.p_max > 0.0, f"p_max must be > 0, got {self.p_max}")
        require(0.0 < self.p_b < self.p_max, f"p_b must be in (0, p_max), got {self.p_b}")
        require(self.n_valves >= 1, f"n_valves must be >= 1, got {self.n_valves}")
        require(self.n_steps >= 1, f"n_steps must be >= 1, got {self.n_steps}")
        require(self.noise_std >= 0.0, f"noise_std must be >= 0, got {self.noise_std}")
        # The preload row itself must respect the budget.
        require(
            self.n_valves * self.p_b < self.p_max,
            f"n_valves * p_b = {self.n_valves * self.p_b} must stay below p_max = {self.p_max}",
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "p_max": self.p_max,
            "p_b": self.p_b,
            "n_valves": self.n_valves,
            "n_steps": self.n_steps,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _step_from_draws(prev: np.ndarray, draws: np.ndarray, cfg: ExplorationConfig) -> np.ndarray:
    """One walk update given the reversion draws for this step.

    ``prev`` and ``draws`` share a trailing valve axis and may carry leading
    batch axes; the update is elementwise apart from the per-step total, so a
    batched call is bit-identical to looping rows.
    """
    s = cfg.alpha * prev + (1.0 - cfg.alpha) * draws
    s = np.maximum(s, PRESSURE_FLOOR_KPA)
    total = s.sum(axis=-1, keepdims=True)
    scale = np.minimum(_sigmoid(cfg.beta * total), _MAX_BUDGET_FRACTION)
    return cfg.p_max * scale * (s / total)


def explore_step(
    prev: np.ndarray, cfg: ExplorationConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.random.Generator]:
    """Advance the walk one step, consuming one normal draw per valve.

    Returns the next pressure vector and the (advanced) generator.
    """
    cfg.validate()
    prev = as_float_array(prev, "prev", (cfg.n_valves,))
    require_finite(prev, "prev")
    require((prev >= 0.0).all(), "prev must be non-negative")
    draws = rng.normal(cfg.p_b, cfg.noise_std, cfg.n_valves)
    return _step_from_draws(prev, draws, cfg), rng


def _walk(initial: np.ndarray, noise: np.ndarray, cfg: ExplorationConfig) -> np.ndarray:
    """Run the walk from ``initial`` using pre-drawn noise.

    initial: (..., n_valves); noise: (..., n_steps-1, n_valves).
    Returns (..., n_steps, n_valves) including the initial row.
    """
    n_steps = noise.shape[-2] + 1
    out = np.empty(noise.shape[:-2] + (n_steps, cfg.n_valves), dtype=np.float64)
    out[..., 0, :] = initial
    current = initial
    for t in range(1, n_steps):
        current = _step_from_draws(current, noise[..., t - 1, :], cfg)
        out[..., t, :] = current
    return out


@dataclass
class PressureSequence:
    """A commanded pressure schedule, one row per control step (kPa).

    ``source`` is the producing ExplorationConfig, or a string marker for
    sequences that were imported or produced by a policy.
    """

    steps: np.ndarray
    source: ExplorationConfig | str = "unspecified"

    CSV_BASE_HEADER = ("step",)

    def __post_init__(self):
        self.steps = as_float_array(self.steps, "steps")
        require(self.steps.ndim == 2, f"steps must be 2-D, got shape {self.steps.shape}")

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]

    @property
    def n_valves(self) -> int:
        return self.steps.shape[1]

    def validate(self, p_max: float | None = None) -> None:
        require_finite(self.steps, "steps")
        require((self.steps >= 0.0).all(), "pressures must be non-negative")
        if p_max is None and isinstance(self.source, ExplorationConfig):
            p_max = self.source.p_max
        if p_max is not None:
            totals = self.steps.sum(axis=1)
            require(
                bool((totals <= p_max * (1.0 - 1e-12)).all()),
                "pressure totals must stay strictly below the budget",
            )

    def csv_header(self) -> list[str]:
        return ["step"] + [f"p{j + 1}_kpa" for j in range(self.n_valves)]

    def to_csv(self, path) -> None:
        rows = ([i, *row] for i, row in enumerate(self.steps))
        write_csv(path, self.csv_header(), rows)

    @classmethod
    def from_csv(cls, path) -> "PressureSequence":
        header, data = read_table(path)
        require(len(header) >= 2 and header[0] == "step", f"{path}: not a pressure schedule CSV")
        expected = ["step"] + [f"p{j + 1}_kpa" for j in range(len(header) - 1)]
        if header != expected:
            raise ValueError(f"{path}: line 1: expected header {','.join(expected)!r}")
        return cls(steps=data[:, 1:], source="imported")


def generate_sequence(cfg: ExplorationConfig) -> PressureSequence:
    """Generate one exploration run.

    Row 0 is the all-preload vector (the state the arm rests in before the
    walk starts); rows 1..n_steps-1 follow the walk update. The run's noise
    is drawn in a single ``normal(p_b, noise_std, (n_steps-1, n_valves))``
    call on the stream keyed by ``cfg.seed``.
    """
    cfg.validate()
    initial = np.full(cfg.n_valves, cfg.p_b, dtype=np.float64)
    noise = stream(cfg.seed).normal(cfg.p_b, cfg.noise_std, (cfg.n_steps - 1, cfg.n_valves))
    steps = _walk(initial, noise, cfg)
    return PressureSequence(steps=steps, source=cfg)


def generate_batch(cfg: ExplorationConfig, seeds) -> np.ndarray:
    """Vectorized multi-seed generation, bit-identical to the per-seed path.

    Returns (n_seeds, n_steps, n_valves). Row k equals
    ``generate_sequence(replace(cfg, seed=seeds[k])).steps`` exactly: the
    per-seed noise blocks are drawn with the same single call each, and the
    walk update is elementwise over the seed axis.
    """
    cfg.validate()
    seeds = [int(s) for s in seeds]
    require(len(seeds) >= 1, "need at least one seed")
    noise = np.stack(
        [stream(s).normal(cfg.p_b, cfg.noise_std, (cfg.n_steps - 1, cfg.n_valves)) for s in seeds]
    )
    initial = np.full((len(seeds), cfg.n_valves), cfg.p_b, dtype=np.float64)
    return _walk(initial, noise, cfg)


def smoothness(steps: np.ndarray) -> float:
    """Mean absolute per-valve change between consecutive commands."""
    steps = as_float_array(steps, "steps")
    require(steps.ndim == 2 and steps.shape[0] >= 2, "need at least two steps")
    return float(np.abs(np.diff(steps, axis=0)).mean())
