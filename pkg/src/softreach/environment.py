"""Goal-reaching environment wrapped around a learned plant model.

Each environment instance drives the forward model one control step at a
time: the action is a valve-pressure vector, the model's hidden state is the
plant state, and the observation is the predicted tip position concatenated
with the episode's goal. Goals are drawn per episode as a Gaussian
perturbation of a nominal pose, the reward is the negative Euclidean
distance to the goal in mm, and episodes end on reaching the goal within
success_radius or on hitting the step horizon.

reset and step are pure functions of their arguments. Randomness comes from
counter-based streams keyed by (seed, env_index, reset_count); because the
key fully determines the draw, running many environments batched, in
parallel workers, or one at a time produces bit-identical trajectories.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_float_array, require, require_finite
from .artifacts import write_csv
from .forward_model import ForwardModel
from .nn import lstm_step
from .rng import stream


@dataclass
class EnvParams:
    """Task definition: the plant model plus goal sampling and limits.

    initial_pose is both the nominal starting position and the center of the
    goal distribution; perturbation scales the per-axis Gaussian goal offset.
    """

    model: ForwardModel
    initial_pose: np.ndarray
    perturbation: np.ndarray
    max_steps: int = 64
    success_radius: float = 1.0
    action_low: np.ndarray | None = None
    action_high: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.initial_pose = as_float_array(self.initial_pose, "initial_pose", (3,))
        self.perturbation = as_float_array(self.perturbation, "perturbation", (3,))
        n = self.model.n_valves
        if self.action_low is None:
            self.action_low = np.zeros(n)
        if self.action_high is None:
            self.action_high = np.full(n, 13.0)
        self.action_low = as_float_array(self.action_low, "action_low", (n,))
        self.action_high = as_float_array(self.action_high, "action_high", (n,))

    def validate(self) -> None:
        require(self.success_radius > 0.0, "success_radius must be > 0")
        require(self.max_steps >= 1, "max_steps must be >= 1")
        require(bool((self.action_low < self.action_high).all()), "need action_low < action_high")
        require(bool((self.perturbation >= 0.0).all()), "perturbation must be >= 0")
        require_finite(self.initial_pose, "initial_pose")

    def to_dict(self, model_path: str) -> dict:
        return {
            "model_path": model_path,
            "initial_pose": [float(v) for v in self.initial_pose],
            "perturbation": [float(v) for v in self.perturbation],
            "max_steps": self.max_steps,
            "success_radius": self.success_radius,
            "action_low": [float(v) for v in self.action_low],
            "action_high": [float(v) for v in self.action_high],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict, model: ForwardModel) -> "EnvParams":
        return cls(
            model=model,
            initial_pose=np.asarray(doc["initial_pose"], dtype=np.float64),
            perturbation=np.asarray(doc["perturbation"], dtype=np.float64),
            max_steps=int(doc.get("max_steps", 64)),
            success_radius=float(doc.get("success_radius", 1.0)),
            action_low=np.asarray(doc["action_low"], dtype=np.float64) if "action_low" in doc else None,
            action_high=np.asarray(doc["action_high"], dtype=np.float64) if "action_high" in doc else None,
            seed=int(doc.get("seed", 0)),
        )


def default_initial_pose(model: ForwardModel) -> np.ndarray:
    """Nominal pose for a model: the mean position of its training data.

    The output normalization mean is exactly that statistic, so goals
    sampled around it stay inside the region the model has seen.
    """
    return model.output_norm.mean.copy()


@dataclass(frozen=True)
class EnvState:
    """Immutable per-instance state.

    The pair (env_index, reset_count) together with params.seed is the RNG
    state: episode e of environment i draws its goal from the stream keyed
    (seed, i, e), so any execution order reproduces the same episodes.
    """

    h: np.ndarray
    c: np.ndarray
    position: np.ndarray
    goal: np.ndarray
    step_count: int
    env_index: int
    reset_count: int


def observe(state: EnvState) -> np.ndarray:
    return np.concatenate([state.position, state.goal])


def reset(params: EnvParams, env_index: int = 0, reset_count: int = 0) -> tuple[EnvState, np.ndarray]:
    """Fresh episode: zeroed model state, goal drawn from the episode's
    stream, position at the nominal pose."""
    params.validate()
    draw = stream(params.seed, env_index, reset_count).standard_normal(3)
    goal = params.initial_pose + params.perturbation * draw
    hidden = np.zeros(params.model.params.hidden_size)
    state = EnvState(
        h=hidden,
        c=hidden.copy(),
        position=params.initial_pose.copy(),
        goal=goal,
        step_count=0,
        env_index=env_index,
        reset_count=reset_count,
    )
    return state, observe(state)


def step(
    state: EnvState, action: np.ndarray, params: EnvParams
) -> tuple[EnvState, np.ndarray, float, bool]:
    """Advance one control period; returns (state', observation, reward, done).

    The action is clipped into the valve box before the model consumes it.
    """
    action = as_float_array(action, "action", (params.model.n_valves,))
    require_finite(action, "action")
    clipped = np.clip(action, params.action_low, params.action_high)
    x = params.model.input_norm.normalize(clipped)
    h, c, y = lstm_step(params.model.params, x, state.h, state.c)
    position = params.model.output_norm.denormalize(y)
    distance = float(np.linalg.norm(state.goal - position))
    reward = -distance
    step_count = state.step_count + 1
    done = distance < params.success_radius or step_count >= params.max_steps
    next_state = EnvState(
        h=h,
        c=c,
        position=position,
        goal=state.goal,
        step_count=step_count,
        env_index=state.env_index,
        reset_count=state.reset_count,
    )
    return next_state, observe(next_state), reward, done


@dataclass
class Trajectories:
    """Batched rollout record, laid out [env][time]."""

    observations: np.ndarray  # (N, T, 6) observation before each action
    actions: np.ndarray       # (N, T, n_valves), as executed (clipped)
    rewards: np.ndarray       # (N, T)
    dones: np.ndarray         # (N, T) episode ended at this step
    final_states: list[EnvState]

    CSV_HEADER_BASE = ("env", "step")

    def to_csv(self, path) -> None:
        n_valves = self.actions.shape[2]
        header = (
            ["env", "step"]
            + [f"p{j + 1}" for j in range(n_valves)]
            + ["x", "y", "z", "gx", "gy", "gz", "reward", "done"]
        )

        def rows():
            # each row: the observation the action was chosen from, the
            # executed (clipped) action, and the resulting reward/done
            for e in range(self.observations.shape[0]):
                for t in range(self.observations.shape[1]):
                    yield [
                        e,
                        t,
                        *self.actions[e, t],
                        *self.observations[e, t, :3],
                        *self.observations[e, t, 3:],
                        self.rewards[e, t],
                        int(self.dones[e, t]),
                    ]

        write_csv(path, header, rows())


def _rollout_single(
    params: EnvParams, state: EnvState, policy, n_steps: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, EnvState]:
    n_valves = params.model.n_valves
    obs_buf = np.empty((n_steps, 6))
    act_buf = np.empty((n_steps, n_valves))
    rew_buf = np.empty(n_steps)
    done_buf = np.zeros(n_steps, dtype=bool)
    obs = observe(state)
    episode_start = state.step_count == 0
    for t in range(n_steps):
        action = policy(obs, state.env_index, episode_start)
        action = np.clip(
            as_float_array(action, "action", (n_valves,)), params.action_low, params.action_high
        )
        obs_buf[t] = obs
        act_buf[t] = action
        state, obs, reward, done = step(state, action, params)
        rew_buf[t] = reward
        done_buf[t] = done
        episode_start = False
        if done:
            state, obs = reset(params, state.env_index, state.reset_count + 1)
            episode_start = True
    return obs_buf, act_buf, rew_buf, done_buf, state


def batched_rollout(
    params: EnvParams,
    states: list[EnvState],
    policy,
    n_steps: int,
    jobs: int = 1,
) -> Trajectories:
    """Roll N environments for n_steps each, auto-resetting on done.

    ``policy`` is called as policy(observation, env_index, episode_start)
    and returns a per-valve action; stateless policies can ignore the extra
    arguments, recurrent ones use them to keep per-env hidden state.
    Environments are fully independent, so results are bit-identical whether
    they run sequentially (jobs=1) or on parallel workers.
    """
    require(len(states) >= 1, "need at least one environment")
    require(n_steps >= 1, "n_steps must be >= 1")
    params.validate()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(lambda s: _rollout_single(params, s, policy, n_steps), states)
            )
    else:
        results = [_rollout_single(params, s, policy, n_steps) for s in states]
    return Trajectories(
        observations=np.stack([r[0] for r in results]),
        actions=np.stack([r[1] for r in results]),
        rewards=np.stack([r[2] for r in results]),
        dones=np.stack([r[3] for r in results]),
        final_states=[r[4] for r in results],
    )
