"""Learned forward dynamics and reaching policies for a pneumatic soft arm."""

from softreach.dataset import (
    DatasetConfig,
    Run,
    SequencePair,
    SlidingWindowPairs,
    align,
    make_pairs,
    pair_count,
    split_and_order,
)
from softreach.environment import EnvParams, batched_rollout, reset, step
from softreach.exploration import (
    ExplorationConfig,
    PressureSequence,
    generate_batch,
    generate_sequence,
)
from softreach.forward_model import (
    ForwardDynamicsRegressor,
    ForwardModel,
    TrainConfig,
    TrainReport,
    evaluate_run,
    train_forward,
)
from softreach.ppo import (
    PolicyParams,
    PpoConfig,
    PpoTrainer,
    TrainingCurve,
    evaluate_policy,
    run_seeds,
    train_policy,
)
from softreach.surrogate import SurrogateConfig, collect_run

__version__ = "0.1.0"

__all__ = [
    "DatasetConfig",
    "EnvParams",
    "ExplorationConfig",
    "ForwardDynamicsRegressor",
    "ForwardModel",
    "PolicyParams",
    "PpoConfig",
    "PpoTrainer",
    "PressureSequence",
    "Run",
    "SequencePair",
    "SlidingWindowPairs",
    "SurrogateConfig",
    "TrainConfig",
    "TrainReport",
    "TrainingCurve",
    "align",
    "batched_rollout",
    "collect_run",
    "evaluate_policy",
    "evaluate_run",
    "generate_batch",
    "generate_sequence",
    "make_pairs",
    "pair_count",
    "reset",
    "run_seeds",
    "split_and_order",
    "step",
    "train_forward",
    "train_policy",
]
