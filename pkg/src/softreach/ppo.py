"""PPO training of reaching policies inside the learned environment.

Two policy families share one training loop. The feedforward policy maps the
current observation through small tanh networks (separate actor and critic);
the recurrent policy runs a shared LSTM trunk over the episode's observation
history with linear actor/critic heads. Actions are sampled from a diagonal
Gaussian in an unbounded pre-squash space, pushed through tanh, and affinely
mapped into the valve box; log-probabilities carry the change-of-variables
correction, so the ratio math is exact.

Updates follow the clipped-surrogate recipe: advantages from GAE with
done-masking, several epochs of minibatch ascent on
min(ratio * A, clip(ratio) * A), a 0.5 * MSE value loss, an entropy bonus on
the pre-squash Gaussian, and global gradient-norm clipping, all through the
same hand-derived backward passes the rest of the package uses.

Observations arrive in mm with position components that can sit a hundred mm
from the origin, so each policy stores a fixed affine observation map
derived from the task (center at the nominal pose, scale from the goal
perturbation). Rewards are likewise mm-scale; a reward_scale factor is
applied before GAE so value targets live in a range Adam can fit quickly.
Reported returns and distances stay in honest millimetres.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import as_float_array, require, require_finite
from .artifacts import read_table, write_csv
from .environment import EnvParams, observe, reset
from .environment import step as env_step
from .errors import TrainingDiverged
from .nn import (
    LstmCellParams,
    MlpParams,
    adam_init,
    adam_update,
    cell_apply,
    cell_backward,
    cell_step,
    clip_by_global_norm,
    init_lstm_cell,
    init_mlp,
    lstm_step,
    mlp_backward,
    mlp_forward,
)
from .nn.adam import AdamConfig
from .nn.serialize import load_arrays, save_arrays
from .nn.trees import Tree
from .rng import stream

FF_HIDDEN = (64, 64)
RECURRENT_HIDDEN = 64
LOG_STD_INIT = 0.0
# Positions stray at most a few perturbation scales from the nominal pose;
# this floor keeps degenerate (zero-perturbation) tasks well-scaled.
OBS_SCALE_FACTOR = 2.0
OBS_SCALE_FLOOR = 1.0

# Subkey tags for the deterministic stream tree.
_KEY_INIT = 0
_KEY_SAMPLE = 1
_KEY_MINIBATCH = 2


@dataclass(frozen=True)
class PpoConfig:
    """Hyperparameters of the training loop."""

    total_updates: int = 300
    n_envs: int = 16
    rollout_length: int = 128
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs_per_update: int = 4
    minibatches: int = 4
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0
    policy_kind: str = "feedforward"
    reward_scale: float = 0.05
    stop_on_convergence: bool = False
    convergence_patience: int = 50

    def validate(self) -> None:
        require(self.total_updates >= 0, "total_updates must be >= 0")
        require(self.n_envs >= 1, "n_envs must be >= 1")
        require(self.rollout_length >= 1, "rollout_length must be >= 1")
        require(0.0 < self.gamma <= 1.0, "gamma must be in (0, 1]")
        require(0.0 < self.gae_lambda <= 1.0, "gae_lambda must be in (0, 1]")
        require(self.clip_eps > 0.0, "clip_eps must be > 0")
        require(self.epochs_per_update >= 1, "epochs_per_update must be >= 1")
        require(1 <= self.minibatches <= self.n_envs * self.rollout_length, "bad minibatches")
        require(self.lr > 0.0, "lr must be > 0")
        require(self.reward_scale > 0.0, "reward_scale must be > 0")
        require(self.policy_kind in ("feedforward", "recurrent"), f"unknown policy_kind {self.policy_kind!r}")

    def to_dict(self) -> dict:
        return {
            "total_updates": self.total_updates,
            "n_envs": self.n_envs,
            "rollout_length": self.rollout_length,
            "gamma": self.gamma,
            "gae_lambda": self.gae_lambda,
            "clip_eps": self.clip_eps,
            "epochs_per_update": self.epochs_per_update,
            "minibatches": self.minibatches,
            "lr": self.lr,
            "entropy_coef": self.entropy_coef,
            "value_coef": self.value_coef,
            "max_grad_norm": self.max_grad_norm,
            "seed": self.seed,
            "policy_kind": self.policy_kind,
            "reward_scale": self.reward_scale,
            "stop_on_convergence": self.stop_on_convergence,
            "convergence_patience": self.convergence_patience,
        }


@dataclass
class PolicyParams:
    """Actor-critic weights plus the fixed task-derived constants.

    Feedforward: trunk is None, actor/critic are full MLPs on the normalized
    observation. Recurrent: trunk is a shared LSTM cell over observations,
    actor/critic are linear heads on its hidden state.
    """

    kind: str
    trunk: LstmCellParams | None
    actor: MlpParams
    critic: MlpParams
    log_std: np.ndarray
    obs_center: np.ndarray
    obs_scale: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.log_std.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.trunk.hidden_size if self.trunk is not None else 0

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_center) / self.obs_scale

    def to_tree(self) -> Tree:
        tree: Tree = {}
        if self.trunk is not None:
            tree.update(self.trunk.to_tree("trunk."))
        tree.update(self.actor.to_tree("actor."))
        tree.update(self.critic.to_tree("critic."))
        tree["log_std"] = self.log_std
        return tree

    def with_tree(self, tree: Tree) -> "PolicyParams":
        trunk = LstmCellParams.from_tree(tree, "trunk.") if self.trunk is not None else None
        return PolicyParams(
            kind=self.kind,
            trunk=trunk,
            actor=self.actor.from_tree(tree, "actor."),
            critic=self.critic.from_tree(tree, "critic."),
            log_std=tree["log_std"],
            obs_center=self.obs_center,
            obs_scale=self.obs_scale,
            action_low=self.action_low,
            action_high=self.action_high,
        )

    def save(self, path) -> None:
        arrays = dict(self.to_tree())
        arrays["obs_center"] = self.obs_center
        arrays["obs_scale"] = self.obs_scale
        arrays["action_low"] = self.action_low
        arrays["action_high"] = self.action_high
        metadata = {
            "policy_kind": self.kind,
            "actor_activations": list(self.actor.activations),
            "critic_activations": list(self.critic.activations),
            "actor_layers": self.actor.n_layers,
            "critic_layers": self.critic.n_layers,
        }
        save_arrays(path, "policy", arrays, metadata)

    @classmethod
    def load(cls, path) -> "PolicyParams":
        kind_tag, arrays, metadata = load_arrays(path)
        require(kind_tag == "policy", f"{path}: expected a policy file, got {kind_tag!r}")
        policy_kind = metadata["policy_kind"]
        trunk = None
        if policy_kind == "recurrent":
            trunk = LstmCellParams.from_tree(arrays, "trunk.")

        def load_mlp(prefix: str, n_layers: int, activations: list[str]) -> MlpParams:
            return MlpParams(
                weights=[arrays[f"{prefix}w{i}"] for i in range(n_layers)],
                biases=[arrays[f"{prefix}b{i}"] for i in range(n_layers)],
                activations=list(activations),
            )

        return cls(
            kind=policy_kind,
            trunk=trunk,
            actor=load_mlp("actor.", int(metadata["actor_layers"]), metadata["actor_activations"]),
            critic=load_mlp("critic.", int(metadata["critic_layers"]), metadata["critic_activations"]),
            log_std=arrays["log_std"],
            obs_center=arrays["obs_center"],
            obs_scale=arrays["obs_scale"],
            action_low=arrays["action_low"],
            action_high=arrays["action_high"],
        )


def init_policy(env_params: EnvParams, cfg: PpoConfig) -> PolicyParams:
    """Fresh policy for a task; weights drawn from stream (seed, 0)."""
    env_params.validate()
    cfg.validate()
    rng = stream(cfg.seed, _KEY_INIT)
    n_act = env_params.model.n_valves
    obs_dim = 6
    scale3 = OBS_SCALE_FACTOR * np.maximum(env_params.perturbation, OBS_SCALE_FLOOR)
    obs_center = np.concatenate([env_params.initial_pose, env_params.initial_pose])
    obs_scale = np.concatenate([scale3, scale3])
    if cfg.policy_kind == "feedforward":
        trunk = None
        actor = init_mlp([obs_dim, *FF_HIDDEN, n_act], ["tanh", "tanh", "identity"], rng)
        critic = init_mlp([obs_dim, *FF_HIDDEN, 1], ["tanh", "tanh", "identity"], rng)
    else:
        trunk = init_lstm_cell(obs_dim, RECURRENT_HIDDEN, rng)
        actor = init_mlp([RECURRENT_HIDDEN, n_act], ["identity"], rng)
        critic = init_mlp([RECURRENT_HIDDEN, 1], ["identity"], rng)
    return PolicyParams(
        kind=cfg.policy_kind,
        trunk=trunk,
        actor=actor,
        critic=critic,
        log_std=np.full(n_act, LOG_STD_INIT),
        obs_center=obs_center,
        obs_scale=obs_scale,
        action_low=env_params.action_low.copy(),
        action_high=env_params.action_high.copy(),
    )


# ---------------------------------------------------------------------------
# squashed-Gaussian math


def squash(u: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Map pre-squash samples into the action box."""
    return low + (np.tanh(u) + 1.0) * 0.5 * (high - low)


def unsquash(action: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Inverse of squash for actions strictly inside the box."""
    t = 2.0 * (np.asarray(action, dtype=np.float64) - low) / (high - low) - 1.0
    t = np.clip(t, -1.0 + 1e-15, 1.0 - 1e-15)
    return np.arctanh(t)

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _log_jacobian(u: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """log |d action / d u| summed over action dims; u shape (..., V).

    Uses log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), which stays
    finite for large |u|.
    """
    log_dtanh = 2.0 * (math.log(2.0) - u - _softplus(-2.0 * u))
    return np.sum(log_dtanh + np.log((high - low) * 0.5), axis=-1)


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density of pre-squash samples, shape (...,)."""
    z = (u - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * u.shape[-1] * math.log(2.0 * math.pi)


def action_log_prob(
    u: np.ndarray, mean: np.ndarray, log_std: np.ndarray, low: np.ndarray, high: np.ndarray
) -> np.ndarray:
    """Log density of squash(u) under the squashed Gaussian policy."""
    return gaussian_log_prob(u, mean, log_std) - _log_jacobian(u, low, high)


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Entropy of the pre-squash Gaussian (the bonus used in the loss)."""
    return float(np.sum(log_std) + 0.5 * log_std.shape[0] * (1.0 + math.log(2.0 * math.pi)))


# ---------------------------------------------------------------------------
# policy evaluation (single observation, interactive)


def act(
    params: PolicyParams,
    obs: np.ndarray,
    hidden: tuple[np.ndarray, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
):
    """Sample (or take the mean) action for one observation.

    Returns (action, log_prob, value, hidden'); hidden is (h, c) for the
    recurrent policy and None for the feedforward one.
    """
    obs = as_float_array(obs, "obs", (params.obs_center.shape[0],))
    require_finite(obs, "obs")
    x = params.normalize_obs(obs)
    if params.kind == "recurrent":
        if hidden is None:
            hidden = policy_initial_hidden(params)
        h, c = cell_step(params.trunk, x, hidden[0], hidden[1])
        mean = mlp_forward(params.actor, h)
        value = float(mlp_forward(params.critic, h)[0])
        hidden_next = (h, c)
    else:
        mean = mlp_forward(params.actor, x)
        value = float(mlp_forward(params.critic, x)[0])
        hidden_next = None
    if deterministic:
        u = mean
    else:
        require(rng is not None, "an rng is required for stochastic actions")
        u = mean + np.exp(params.log_std) * rng.standard_normal(params.n_actions)
    action = squash(u, params.action_low, params.action_high)
    log_prob = float(action_log_prob(u, mean, params.log_std, params.action_low, params.action_high))
    return action, log_prob, value, hidden_next


def policy_initial_hidden(params: PolicyParams) -> tuple[np.ndarray, np.ndarray] | None:
    if params.kind != "recurrent":
        return None
    return np.zeros(params.hidden_size), np.zeros(params.hidden_size)


class PolicyRunner:
    """Adapter making PolicyParams usable with environment.batched_rollout.

    Keeps per-env hidden state and zeroes it at episode starts. Deterministic
    by default; pass an rng seed for stochastic rollouts.
    """

    def __init__(self, params: PolicyParams, deterministic: bool = True, seed: int = 0):
        self.params = params
        self.deterministic = deterministic
        self._seed = seed
        self._hidden: dict[int, tuple[np.ndarray, np.ndarray] | None] = {}
        self._rngs: dict[int, np.random.Generator] = {}

    def __call__(self, obs: np.ndarray, env_index: int, episode_start: bool) -> np.ndarray:
        if episode_start or env_index not in self._hidden:
            self._hidden[env_index] = policy_initial_hidden(self.params)
        rng = None
        if not self.deterministic:
            if env_index not in self._rngs:
                self._rngs[env_index] = stream(self._seed, env_index)
            rng = self._rngs[env_index]
        action, _, _, hidden = act(
            self.params, obs, self._hidden[env_index], rng, deterministic=self.deterministic
        )
        self._hidden[env_index] = hidden
        return action


# ---------------------------------------------------------------------------
# GAE


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    gae_lambda: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation with done-masking.

    rewards/dones: (T, N); values: (T+1, N) with the bootstrap value
    appended. Returns (advantages, returns), both (T, N), with
    returns = advantages + values[:-1].
    """
    rewards = as_float_array(rewards, "rewards")
    values = as_float_array(values, "values")
    dones = np.asarray(dones, dtype=np.float64)
    require(rewards.ndim == 2, "rewards must be (T, N)")
    T, N = rewards.shape
    require(dones.shape == (T, N), "dones must match rewards")
    require(values.shape == (T + 1, N), "values must be (T+1, N): bootstrap appended")
    advantages = np.empty((T, N))
    carry = np.zeros(N)
    for t in range(T - 1, -1, -1):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * mask - values[t]
        carry = delta + gamma * gae_lambda * mask * carry
        advantages[t] = carry
    return advantages, advantages + values[:-1]


def clipped_surrogate(
    ratio: np.ndarray, advantages: np.ndarray, clip_eps: float
) -> np.ndarray:
    """Elementwise clipped PPO objective min(r*A, clip(r)*A) (to maximize)."""
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return np.minimum(ratio * advantages, clipped * advantages)


# ---------------------------------------------------------------------------
# batched training rollout

@dataclass
class RolloutBatch:
    """Time-major on-policy data for one update."""

    obs: np.ndarray       # (T, N, 6) raw observations
    u: np.ndarray         # (T, N, V) pre-squash samples
    log_probs: np.ndarray  # (T, N)
    values: np.ndarray    # (T+1, N) scaled-value estimates incl. bootstrap
    rewards: np.ndarray   # (T, N) scaled rewards
    dones: np.ndarray     # (T, N)
    resets: np.ndarray    # (T, N) 1 where the policy state starts an episode
    h0: np.ndarray | None  # (N, H) policy hidden at rollout start (recurrent)
    c0: np.ndarray | None


@dataclass
class EpisodeStats:
    env_index: int
    episode_return_mm: float
    terminal_distance_mm: float
    length: int


class _VecTask:
    """Mutable batched environment mirror used only inside training.

    Semantically identical to stepping environment.reset/step per env (the
    test suite checks this); stepping all envs through one batched model
    call keeps the rollout fast.
    """

    def __init__(self, env_params: EnvParams, n_envs: int):
        env_params.validate()
        self.params = env_params
        self.n = n_envs
        H = env_params.model.params.hidden_size
        self.h = np.zeros((n_envs, H))
        self.c = np.zeros((n_envs, H))
        self.pos = np.tile(env_params.initial_pose, (n_envs, 1))
        self.goal = np.empty((n_envs, 3))
        self.step_count = np.zeros(n_envs, dtype=np.int64)
        self.reset_count = np.zeros(n_envs, dtype=np.int64)
        self.episode_start = np.ones(n_envs, dtype=bool)
        self.episode_return = np.zeros(n_envs)
        self.episode_length = np.zeros(n_envs, dtype=np.int64)
        for i in range(n_envs):
            self._draw_goal(i, 0)

    def _draw_goal(self, i: int, reset_count: int) -> None:
        draw = stream(self.params.seed, i, reset_count).standard_normal(3)
        self.goal[i] = self.params.initial_pose + self.params.perturbation * draw

    def observations(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal], axis=1)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[EpisodeStats]]:
        """Advance every env; returns (rewards_mm, dones, finished episodes)."""
        p = self.params
        clipped = np.clip(actions, p.action_low, p.action_high)
        x = p.model.input_norm.normalize(clipped)
        self.h, self.c, y = lstm_step(p.model.params, x, self.h, self.c)
        self.pos = p.model.output_norm.denormalize(y)
        dist = np.linalg.norm(self.goal - self.pos, axis=1)
        rewards = -dist
        self.step_count += 1
        dones = (dist < p.success_radius) | (self.step_count >= p.max_steps)
        self.episode_return += rewards
        self.episode_length += 1
        self.episode_start[:] = False
        stats: list[EpisodeStats] = []
        for i in np.nonzero(dones)[0]:
            stats.append(
                EpisodeStats(
                    env_index=int(i),
                    episode_return_mm=float(self.episode_return[i]),
                    terminal_distance_mm=float(dist[i]),
                    length=int(self.episode_length[i]),
                )
            )
            self.reset_count[i] += 1
            self._draw_goal(int(i), int(self.reset_count[i]))
            self.h[i] = 0.0
            self.c[i] = 0.0
            self.pos[i] = p.initial_pose
            self.step_count[i] = 0
            self.episode_return[i] = 0.0
            self.episode_length[i] = 0
            self.episode_start[i] = True
        return rewards, dones, stats


def _policy_forward_batch(params: PolicyParams, x: np.ndarray, h, c):
    """Normalized obs batch -> (mean, value, h', c')."""
    if params.kind == "recurrent":
        h, c = cell_step(params.trunk, x, h, c)
        mean = mlp_forward(params.actor, h)
        value = mlp_forward(params.critic, h)[:, 0]
    else:
        mean = mlp_forward(params.actor, x)
        value = mlp_forward(params.critic, x)[:, 0]
    return mean, value, h, c


def collect_rollout(
    params: PolicyParams,
    task: _VecTask,
    pol_h: np.ndarray | None,
    pol_c: np.ndarray | None,
    cfg: PpoConfig,
    sample_rng: np.random.Generator,
) -> tuple[RolloutBatch, np.ndarray | None, np.ndarray | None, list[EpisodeStats]]:
    """Gather one on-policy batch, updating task and policy hidden in place."""
    T, N, V = cfg.rollout_length, task.n, params.n_actions
    H = params.hidden_size
    batch = RolloutBatch(
        obs=np.empty((T, N, 6)),
        u=np.empty((T, N, V)),
        log_probs=np.empty((T, N)),
        values=np.empty((T + 1, N)),
        rewards=np.empty((T, N)),
        dones=np.empty((T, N)),
        resets=np.empty((T, N)),
        h0=pol_h.copy() if pol_h is not None else None,
        c0=pol_c.copy() if pol_c is not None else None,
    )
    all_stats: list[EpisodeStats] = []
    for t in range(T):
        starts = task.episode_start.astype(np.float64)
        batch.resets[t] = starts
        if params.kind == "recurrent":
            keep = (1.0 - starts)[:, None]
            pol_h *= keep
            pol_c *= keep
        obs = task.observations()
        batch.obs[t] = obs
        x = params.normalize_obs(obs)
        mean, value, pol_h, pol_c = _policy_forward_batch(params, x, pol_h, pol_c)
        u = mean + np.exp(params.log_std) * sample_rng.standard_normal((N, V))
        batch.u[t] = u
        batch.log_probs[t] = action_log_prob(
            u, mean, params.log_std, params.action_low, params.action_high
        )
        batch.values[t] = value
        actions = squash(u, params.action_low, params.action_high)
        rewards_mm, dones, stats = task.step(actions)
        batch.rewards[t] = rewards_mm * cfg.reward_scale
        batch.dones[t] = dones
        all_stats.extend(stats)
    # bootstrap value at the post-rollout observation (masked by dones in GAE)
    if params.kind == "recurrent":
        keep = (1.0 - task.episode_start.astype(np.float64))[:, None]
        boot_h = pol_h * keep
        boot_c = pol_c * keep
        _, value, _, _ = _policy_forward_batch(
            params, params.normalize_obs(task.observations()), boot_h, boot_c
        )
    else:
        _, value, _, _ = _policy_forward_batch(
            params, params.normalize_obs(task.observations()), None, None
        )
    batch.values[T] = value
    return batch, pol_h, pol_c, all_stats


# ---------------------------------------------------------------------------
# the update


def _minibatch_losses_and_grads(
    params: PolicyParams,
    cfg: PpoConfig,
    obs_n: np.ndarray,
    u: np.ndarray,
    logp_old: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    resets: np.ndarray | None,
    h0: np.ndarray | None,
    c0: np.ndarray | None,
) -> tuple[Tree, dict]:
    """Losses and gradients for one minibatch.

    Feedforward: obs_n/u/... are flat (M, .) transition batches and
    resets/h0/c0 are None. Recurrent: obs_n is (T, B, 6) time-major for a
    group of whole env sequences with their stored initial hidden state.
    """
    recurrent = params.kind == "recurrent"
    if recurrent:
        T, B = obs_n.shape[:2]
        M = T * B
        hs_seq, _, _, cache = cell_apply(
            params.trunk, obs_n, h0, c0, resets, want_cache=True, check_finite=False
        )
        feat = hs_seq.reshape(M, -1)
    else:
        M = obs_n.shape[0]
        feat = obs_n
    u_f = u.reshape(M, -1)
    logp_old_f = logp_old.reshape(M)
    adv_f = advantages.reshape(M)
    ret_f = returns.reshape(M)

    adv_f = (adv_f - adv_f.mean()) / (adv_f.std() + 1e-8)

    mean, actor_cache = mlp_forward(params.actor, feat, want_cache=True)
    values, critic_cache = mlp_forward(params.critic, feat, want_cache=True)
    values = values[:, 0]

    sigma = np.exp(params.log_std)
    z = (u_f - mean) / sigma
    logp_new = action_log_prob(u_f, mean, params.log_std, params.action_low, params.action_high)
    log_ratio = logp_new - logp_old_f
    ratio = np.exp(log_ratio)

    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    unclipped_term = ratio * adv_f
    clipped_term = clipped * adv_f
    policy_loss = -float(np.mean(np.minimum(unclipped_term, clipped_term)))
    value_err = values - ret_f
    value_loss = 0.5 * float(np.mean(value_err * value_err))
    entropy = gaussian_entropy(params.log_std)

    # d(total)/d(logp_new): gradient flows only where min picks the
    # unclipped branch (ties included); the clipped branch is flat in ratio.
    active = (unclipped_term <= clipped_term).astype(np.float64)
    dlogp = -(active * ratio * adv_f) / M

    # logp_new depends on mean through the Gaussian term only; the tanh
    # correction is a function of the stored u alone.
    dmean = dlogp[:, None] * z / sigma
    dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)
    dlog_std -= cfg.entropy_coef  # entropy bonus, d(entropy)/d(log_std_j) = 1

    dvalues = cfg.value_coef * value_err / M

    actor_grads, dfeat_actor = mlp_backward(params.actor, actor_cache, dmean)
    critic_grads, dfeat_critic = mlp_backward(params.critic, critic_cache, dvalues[:, None])

    grads: Tree = {f"actor.{k}": v for k, v in actor_grads.items()}
    grads.update({f"critic.{k}": v for k, v in critic_grads.items()})
    grads["log_std"] = dlog_std
    if recurrent:
        dhs = (dfeat_actor + dfeat_critic).reshape(T, B, -1)
        trunk_grads, _, _ = cell_backward(params.trunk, cache, dhs)
        grads.update({f"trunk.{k}": v for k, v in trunk_grads.items()})

    with np.errstate(over="ignore"):
        approx_kl = float(np.mean(ratio - 1.0 - log_ratio))
    diag = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "approx_kl": approx_kl,
        "max_ratio_dev": float(np.max(np.abs(ratio - 1.0))),
        "total_loss": policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy,
    }
    return grads, diag


def ppo_update(
    params: PolicyParams,
    batch: RolloutBatch,
    cfg: PpoConfig,
    adam_state,
    update_index: int,
) -> tuple[PolicyParams, object, dict]:
    """One full PPO update (epochs x minibatches) over a rollout batch."""
    T, N = batch.rewards.shape
    advantages, returns = compute_gae(
        batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.gae_lambda
    )
    obs_n = params.normalize_obs(batch.obs)
    recurrent = params.kind == "recurrent"
    first_diag: dict | None = None
    diag_acc: dict[str, float] = {}
    n_batches = 0
    for epoch in range(cfg.epochs_per_update):
        perm_rng = stream(cfg.seed, _KEY_MINIBATCH, update_index, epoch)
        if recurrent:
            env_perm = perm_rng.permutation(N)
            groups = np.array_split(env_perm, cfg.minibatches)
            splits = [g for g in groups if g.size > 0]
        else:
            flat_perm = perm_rng.permutation(T * N)
            splits = [s for s in np.array_split(flat_perm, cfg.minibatches) if s.size > 0]
        for split in splits:
            if recurrent:
                mb = dict(
                    obs_n=obs_n[:, split],
                    u=batch.u[:, split],
                    logp_old=batch.log_probs[:, split],
                    advantages=advantages[:, split],
                    returns=returns[:, split],
                    resets=batch.resets[:, split],
                    h0=batch.h0[split],
                    c0=batch.c0[split],
                )
            else:
                obs_f = obs_n.reshape(T * N, -1)
                mb = dict(
                    obs_n=obs_f[split],
                    u=batch.u.reshape(T * N, -1)[split],
                    logp_old=batch.log_probs.reshape(T * N)[split],
                    advantages=advantages.reshape(T * N)[split],
                    returns=returns.reshape(T * N)[split],
                    resets=None,
                    h0=None,
                    c0=None,
                )
            grads, diag = _minibatch_losses_and_grads(params, cfg, **mb)
            if not math.isfinite(diag["total_loss"]):
                raise TrainingDiverged(
                    f"non-finite loss at update {update_index}, epoch {epoch}", report=diag
                )
            if first_diag is None:
                first_diag = dict(diag)
            grads, _ = clip_by_global_norm(grads, cfg.max_grad_norm)
            tree, adam_state = adam_update(params.to_tree(), grads, adam_state)
            params = params.with_tree(tree)
            for k, v in diag.items():
                diag_acc[k] = diag_acc.get(k, 0.0) + v
            n_batches += 1
    diag_mean = {k: v / n_batches for k, v in diag_acc.items()}
    # ratio deviation before any parameter change this update: a replay
    # consistency check, exactly from the first minibatch of epoch 0
    diag_mean["pre_update_max_ratio_dev"] = first_diag["max_ratio_dev"]
    return params, adam_state, diag_mean


# ---------------------------------------------------------------------------
# training curve


@dataclass
class TrainingCurve:
    """Per-update training statistics for one seed.

    mean_return is the mean episodic return (sum of per-step rewards, in mm
    units) over episodes completed during the update's rollout; std_return
    is the standard deviation across envs of each env's mean completed
    return. Updates in which an env completed no episode contribute NaN.
    """

    mean_return: np.ndarray
    std_return: np.ndarray
    env_steps: np.ndarray
    mean_terminal_dist_mm: np.ndarray
    seed: int

    CSV_HEADER = ["update", "mean_return", "std_return", "env_steps", "mean_terminal_dist_mm"]

    def __post_init__(self):
        self.mean_return = np.asarray(self.mean_return, dtype=np.float64)
        self.std_return = np.asarray(self.std_return, dtype=np.float64)
        self.env_steps = np.asarray(self.env_steps, dtype=np.int64)
        self.mean_terminal_dist_mm = np.asarray(self.mean_terminal_dist_mm, dtype=np.float64)
        n = self.mean_return.shape[0]
        require(
            self.std_return.shape == (n,)
            and self.env_steps.shape == (n,)
            and self.mean_terminal_dist_mm.shape == (n,),
            "curve columns must have equal length",
        )

    @property
    def n_updates(self) -> int:
        return self.mean_return.shape[0]

    def smoothed_return(self, factor: float = 0.025) -> np.ndarray:
        return _ema_skip_gaps(self.mean_return, factor)

    def smoothed_terminal_dist(self, factor: float = 0.025) -> np.ndarray:
        return _ema_skip_gaps(self.mean_terminal_dist_mm, factor)

    def to_csv(self, path) -> None:
        rows = [
            [u, self.mean_return[u], self.std_return[u], int(self.env_steps[u]), self.mean_terminal_dist_mm[u]]
            for u in range(self.n_updates)
        ]
        write_csv(path, self.CSV_HEADER, rows)

    @classmethod
    def from_csv(cls, path, seed: int = -1) -> "TrainingCurve":
        _, table = read_table(path, expected_header=cls.CSV_HEADER)
        if table.size == 0:
            table = table.reshape(0, len(cls.CSV_HEADER))
        return cls(
            mean_return=table[:, 1],
            std_return=table[:, 2],
            env_steps=table[:, 3].astype(np.int64),
            mean_terminal_dist_mm=table[:, 4],
            seed=seed,
        )


def _ema_skip_gaps(values: np.ndarray, factor: float) -> np.ndarray:
    """EMA (s_0 = v_0) that carries the average across NaN entries.

    Update windows in which no episode completed log NaN; the smoothed
    series holds its value through those gaps instead of poisoning every
    later entry. Entries before the first finite value stay NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    out = np.full(values.shape, math.nan)
    acc = math.nan
    for k, v in enumerate(values):
        if math.isfinite(v):
            acc = v if math.isnan(acc) else (1.0 - factor) * acc + factor * v
        out[k] = acc
    return out


def _window_stats(stats: list[EpisodeStats]) -> tuple[float, float, float]:
    """(mean_return, std_return_across_envs, mean_terminal_dist) for one update."""
    if not stats:
        return math.nan, math.nan, math.nan
    returns = np.array([s.episode_return_mm for s in stats])
    dists = np.array([s.terminal_distance_mm for s in stats])
    per_env: dict[int, list[float]] = {}
    for s in stats:
        per_env.setdefault(s.env_index, []).append(s.episode_return_mm)
    env_means = np.array([np.mean(v) for v in per_env.values()])
    return float(returns.mean()), float(env_means.std()), float(dists.mean())


# ---------------------------------------------------------------------------
# the training loop


_EMA_FACTOR = 0.025


def train_policy(env_params: EnvParams, cfg: PpoConfig) -> tuple[PolicyParams, TrainingCurve]:
    """Train a reaching policy inside the learned environment.

    Alternates one batched rollout (n_envs x rollout_length) with one PPO
    update for total_updates rounds. Deterministic per config: the same
    (env_params, cfg) reproduce the same weights and curve bit for bit.
    With stop_on_convergence set, training ends early once the smoothed
    mean terminal distance has stayed below the success radius for
    convergence_patience consecutive updates.
    """
    env_params.validate()
    cfg.validate()
    params = init_policy(env_params, cfg)
    empty = np.empty(0)
    if cfg.total_updates == 0:
        curve = TrainingCurve(empty, empty, empty.astype(np.int64), empty, seed=cfg.seed)
        return params, curve

    task = _VecTask(env_params, cfg.n_envs)
    if cfg.policy_kind == "recurrent":
        pol_h = np.zeros((cfg.n_envs, RECURRENT_HIDDEN))
        pol_c = np.zeros((cfg.n_envs, RECURRENT_HIDDEN))
    else:
        pol_h = pol_c = None
    sample_rng = stream(cfg.seed, _KEY_SAMPLE)
    adam_state = adam_init(params.to_tree(), AdamConfig(lr=cfg.lr))

    mean_returns: list[float] = []
    std_returns: list[float] = []
    env_steps: list[int] = []
    terminal_dists: list[float] = []
    dist_ema: float | None = None
    converged_streak = 0
    for update in range(cfg.total_updates):
        batch, pol_h, pol_c, stats = collect_rollout(params, task, pol_h, pol_c, cfg, sample_rng)
        params, adam_state, _ = ppo_update(params, batch, cfg, adam_state, update)
        mean_ret, std_ret, mean_dist = _window_stats(stats)
        mean_returns.append(mean_ret)
        std_returns.append(std_ret)
        env_steps.append((update + 1) * cfg.n_envs * cfg.rollout_length)
        terminal_dists.append(mean_dist)
        if math.isfinite(mean_dist):
            dist_ema = mean_dist if dist_ema is None else (1.0 - _EMA_FACTOR) * dist_ema + _EMA_FACTOR * mean_dist
            converged_streak = converged_streak + 1 if dist_ema < env_params.success_radius else 0
        if cfg.stop_on_convergence and converged_streak >= cfg.convergence_patience:
            break

    curve = TrainingCurve(
        mean_return=np.array(mean_returns),
        std_return=np.array(std_returns),
        env_steps=np.array(env_steps, dtype=np.int64),
        mean_terminal_dist_mm=np.array(terminal_dists),
        seed=cfg.seed,
    )
    return params, curve


# ---------------------------------------------------------------------------
# evaluation


def evaluate_policy(
    env_params: EnvParams,
    params: PolicyParams,
    n_episodes: int = 50,
    deterministic: bool = True,
    eval_seed: int = 10_000,
) -> dict:
    """Roll complete episodes through the public environment API.

    Episodes use goals drawn under eval_seed, independent of any goals seen
    in training. Returns summary statistics in mm.
    """
    require(n_episodes >= 1, "n_episodes must be >= 1")
    eval_params = replace(env_params, seed=eval_seed)
    terminal, returns, lengths, successes = [], [], [], []
    for episode in range(n_episodes):
        state, _ = reset(eval_params, env_index=episode)
        hidden = policy_initial_hidden(params)
        rng = None if deterministic else stream(eval_seed, episode)
        ep_return = 0.0
        while True:
            action, _, _, hidden = act(params, observe(state), hidden, rng, deterministic=deterministic)
            state, _, reward, done = env_step(state, action, eval_params)
            ep_return += reward
            if done:
                break
        dist = float(np.linalg.norm(state.goal - state.position))
        terminal.append(dist)
        returns.append(ep_return)
        lengths.append(state.step_count)
        successes.append(dist < eval_params.success_radius)
    return {
        "n_episodes": n_episodes,
        "mean_terminal_dist_mm": float(np.mean(terminal)),
        "std_terminal_dist_mm": float(np.std(terminal)),
        "mean_return_mm": float(np.mean(returns)),
        "mean_episode_length": float(np.mean(lengths)),
        "success_rate": float(np.mean(successes)),
    }


# ---------------------------------------------------------------------------
# multi-seed protocol


def aggregate_curves(curves: list[TrainingCurve], smooth: bool = True) -> dict:
    """Mean +/- one-std band across seeds, per update.

    Curves are truncated to the shortest length (early convergence stops can
    shorten a run). With smooth set, per-seed returns are EMA-smoothed
    (factor 0.025) before aggregation, which is also how single curves are
    reported.
    """
    require(len(curves) >= 2, "need at least two curves to aggregate")
    n = min(c.n_updates for c in curves)
    require(n >= 1, "curves must be non-empty")
    rows = []
    for c in curves:
        series = c.smoothed_return() if smooth else c.mean_return
        rows.append(series[:n])
    stacked = np.vstack(rows)
    dists = np.vstack(
        [(c.smoothed_terminal_dist() if smooth else c.mean_terminal_dist_mm)[:n] for c in curves]
    )
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    return {
        "update": np.arange(n),
        "n_seeds": len(curves),
        "mean_return": mean,
        "std_return": std,
        "band_low": mean - std,
        "band_high": mean + std,
        "mean_terminal_dist_mm": dists.mean(axis=0),
    }


def _train_one_seed(args: tuple[EnvParams, PpoConfig]) -> tuple[PolicyParams, TrainingCurve]:
    return train_policy(*args)


def run_seeds(
    env_params: EnvParams,
    cfg: PpoConfig,
    seeds: list[int],
    jobs: int = 1,
) -> list[tuple[PolicyParams, TrainingCurve]]:
    """Train one policy per seed; seeds are independent, so results do not
    depend on jobs."""
    require(len(seeds) >= 1, "seeds must be non-empty")
    tasks = [(env_params, replace(cfg, seed=s)) for s in seeds]
    if jobs <= 1 or len(seeds) == 1:
        return [_train_one_seed(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
        return list(pool.map(_train_one_seed, tasks))


# ---------------------------------------------------------------------------
# estimator facade


class PpoTrainer(BaseEstimator):
    """Estimator-style wrapper: fit(env_params) trains a policy.

    After fit, params_ holds the trained PolicyParams and curve_ the
    TrainingCurve. predict maps observations to deterministic actions;
    score returns the negated mean terminal distance (higher is better).
    """

    def __init__(self, config: PpoConfig = PpoConfig()):
        self.config = config

    def fit(self, env_params: EnvParams, y=None) -> "PpoTrainer":
        self.params_, self.curve_ = train_policy(env_params, self.config)
        self.env_params_ = env_params
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("this PpoTrainer has not been fitted")

    def predict(self, observations: np.ndarray) -> np.ndarray:
        """Deterministic actions for a batch of observations, shape (M, 6).

        Recurrent policies treat each row as the first step of an episode.
        """
        self._check_fitted()
        obs = as_float_array(observations, "observations")
        if obs.ndim == 1:
            action, _, _, _ = act(self.params_, obs, deterministic=True)
            return action
        require(obs.ndim == 2, "observations must be (M, 6)")
        return np.stack(
            [act(self.params_, row, deterministic=True)[0] for row in obs]
        )

    def score(self, env_params: EnvParams | None = None, y=None) -> float:
        self._check_fitted()
        report = evaluate_policy(
            env_params if env_params is not None else self.env_params_, self.params_
        )
        return -report["mean_terminal_dist_mm"]
