"""Synthetic distracting environments and a labelled replay buffer.

An observation is a fixed random linear mixing of task features and a
distractor vector, plus isotropic noise. The distractor is a bounded random
walk that never influences the task state or the reward.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, fields

import numpy as np

from .mdp import random_mdp

PENDULUM_DT = 0.1
PENDULUM_GRAVITY = 1.0
PENDULUM_TORQUE = 1.0
PENDULUM_DAMPING = 0.05
PENDULUM_MAX_SPEED = 3.0
PENDULUM_BINS = (4, 4)  # angle bins x velocity bins -> 16 task states


@dataclass
class DistractedEnvConfig:
    task: str = "pendulum"          # "pendulum" or "mdp"
    n_task_states: int = 16         # "mdp" task only
    task_seed: int = 0
    n_actions: int = 3
    distractor_dim: int = 8
    distractor_scale: float = 1.0
    distractor_step: float = 0.5
    resample_on_reset: bool = True
    obs_dim: int = 24
    mixing_seed: int = 0
    noise_scale: float = 0.01
    episode_length: int = 100
    frame_stack: int = 1
    return_discount: float = 0.9

    def validate(self):
        if self.task not in ("pendulum", "mdp"):
            raise ValueError(f"task: unknown task {self.task!r}")
        if self.task == "pendulum" and self.n_actions != 3:
            raise ValueError("n_actions: the pendulum task has exactly 3 actions")
        for name in ("n_task_states", "n_actions", "obs_dim", "episode_length", "frame_stack"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        for name in ("distractor_dim",):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be >= 0")
        for name in ("distractor_scale", "distractor_step", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be nonnegative")
        if not 0.0 <= self.return_discount < 1.0:
            raise ValueError("return_discount: must lie in [0, 1)")
        if self.obs_dim < self.task_feature_dim + self.distractor_dim:
            raise ValueError("obs_dim: too small for a full-column-rank mixing matrix")

    @property
    def task_feature_dim(self) -> int:
        return 3

    @property
    def physical_dim(self) -> int:
        """Width of the continuous state used for clustering evaluation."""
        return 2 if self.task == "pendulum" else self.task_feature_dim

    @property
    def stacked_obs_dim(self) -> int:
        return self.obs_dim * self.frame_stack


class DistractedEnv:
    """Task dynamics plus an independent distractor, observed through a mixing matrix."""

    def __init__(self, config: DistractedEnvConfig | None = None, seed: int = 0):
        self.config = config or DistractedEnvConfig()
        self.config.validate()
        cfg = self.config
        n_cols = cfg.task_feature_dim + cfg.distractor_dim
        mix_rng = np.random.default_rng(cfg.mixing_seed)
        self.mixing = mix_rng.normal(size=(cfg.obs_dim, n_cols)) / np.sqrt(n_cols)
        if cfg.task == "mdp":
            task_rng = np.random.default_rng(cfg.task_seed)
            self.mdp = random_mdp(cfg.task_seed, cfg.n_task_states, cfg.n_actions)
            self.state_features = task_rng.normal(size=(cfg.n_task_states, cfg.task_feature_dim))
        else:
            self.mdp = None
        self.distractor = np.zeros(cfg.distractor_dim)
        self.distractor_label = -1
        self._draws = 0
        self._frames = deque(maxlen=cfg.frame_stack)
        self.reset(seed)

    # -- task ---------------------------------------------------------------

    def _task_reset(self):
        if self.mdp is None:
            self.theta = self._task_rng.uniform(0.0, np.pi)
            self.omega = self._task_rng.uniform(-1.0, 1.0)
        else:
            self.mdp_state = int(self._task_rng.integers(self.config.n_task_states))

    def _task_step(self, action):
        if self.mdp is None:
            torque = PENDULUM_TORQUE * (action - 1)
            accel = -PENDULUM_GRAVITY * np.sin(self.theta) + torque - PENDULUM_DAMPING * self.omega
            self.omega = float(np.clip(self.omega + PENDULUM_DT * accel,
                                       -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED))
            theta = self.theta + PENDULUM_DT * self.omega
            # elastic walls at the bottom (0) and at upright (pi)
            if theta < 0.0 or theta > np.pi:
                theta = -theta if theta < 0.0 else 2.0 * np.pi - theta
                self.omega = -self.omega
            self.theta = float(theta)
        else:
            probs = self.mdp.transition[self.mdp_state, action]
            self.mdp_state = int(self._task_rng.choice(len(probs), p=probs))

    def task_reward(self, action) -> float:
        if self.mdp is None:
            # 0 hanging down (theta = 0), 1 upright (theta = pi)
            return float(np.clip(0.5 * (1.0 - np.cos(self.theta)), 0.0, 1.0))
        return float(self.mdp.reward[self.mdp_state, action])

    def task_features(self) -> np.ndarray:
        if self.mdp is None:
            return np.array([np.cos(self.theta), np.sin(self.theta),
                             self.omega / PENDULUM_MAX_SPEED])
        return self.state_features[self.mdp_state]

    @property
    def physical_state(self) -> np.ndarray:
        """Continuous coordinates used for clustering evaluation."""
        if self.mdp is None:
            return np.array([self.theta, self.omega])
        return self.state_features[self.mdp_state].copy()

    @property
    def task_label(self) -> int:
        if self.mdp is None:
            n_theta, n_omega = PENDULUM_BINS
            i = min(int(self.theta / np.pi * n_theta), n_theta - 1)
            j = min(int((self.omega + PENDULUM_MAX_SPEED) / (2 * PENDULUM_MAX_SPEED) * n_omega),
                    n_omega - 1)
            return i * n_omega + j
        return self.mdp_state

    # -- distractor ---------------------------------------------------------

    def _draw_distractor(self):
        self.distractor = self._distractor_rng.uniform(-1.0, 1.0, size=self.config.distractor_dim)
        self.distractor_label = self._draws
        self._draws += 1

    def _distractor_step(self):
        step = self.config.distractor_step
        if step > 0 and self.config.distractor_dim:
            walk = self.distractor + step * self._distractor_rng.normal(size=self.config.distractor_dim)
            # reflect at the box boundary
            walk = np.where(walk > 1.0, 2.0 - walk, walk)
            walk = np.where(walk < -1.0, -2.0 - walk, walk)
            self.distractor = np.clip(walk, -1.0, 1.0)

    # -- interface ------------------------------------------------------------

    def _frame(self) -> np.ndarray:
        latent = np.concatenate([self.task_features(),
                                 self.config.distractor_scale * self.distractor])
        frame = self.mixing @ latent
        if self.config.noise_scale > 0:
            frame = frame + self.config.noise_scale * self._noise_rng.normal(size=frame.shape)
        return frame

    def _observation(self) -> np.ndarray:
        return np.concatenate(list(self._frames))

    def reset(self, seed=None, distractor_seed=None) -> np.ndarray:
        """Start an episode.

        ``seed`` reseeds the task, distractor and noise streams; the distractor
        stream can be reseeded separately with ``distractor_seed``.
        """
        if seed is not None:
            self._task_rng = np.random.default_rng([seed, 0])
            self._distractor_rng = np.random.default_rng([seed, 1])
            self._noise_rng = np.random.default_rng([seed, 2])
        if distractor_seed is not None:
            self._distractor_rng = np.random.default_rng([distractor_seed, 1])
        self._task_reset()
        if self.config.resample_on_reset or self.distractor_label < 0:
            self._draw_distractor()
        self.t = 0
        frame = self._frame()
        for _ in range(self.config.frame_stack):
            self._frames.append(frame)
        return self._observation()

    def step(self, action):
        """Advance one step; returns ``(observation, reward, done)``."""
        if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)):
            raise ValueError(f"invalid action {action!r}")
        if not 0 <= action < self.config.n_actions:
            raise ValueError(f"invalid action {action}")
        reward = self.task_reward(int(action))
        self._task_step(int(action))
        self._distractor_step()
        self.t += 1
        self._frames.append(self._frame())
        return self._observation(), reward, self.t >= self.config.episode_length


@dataclass
class TransitionBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray

    def __post_init__(self):
        n = len(self.obs)
        if not (len(self.actions) == len(self.rewards) == len(self.next_obs) == n):
            raise ValueError("inconsistent batch length across fields")

    def __len__(self):
        return len(self.obs)


class ReplayBuffer:
    """Ring buffer of transitions with evaluation-only ground-truth labels."""

    _FIELDS = ("obs", "actions", "rewards", "next_obs", "task_labels",
               "distractor_labels", "physical", "returns")

    def __init__(self, capacity: int, obs_dim: int, physical_dim: int = 2):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.task_labels = np.zeros(capacity, dtype=np.int64)
        self.distractor_labels = np.zeros(capacity, dtype=np.int64)
        self.physical = np.zeros((capacity, physical_dim))
        self.returns = np.zeros(capacity)
        self.ptr = 0
        self.size = 0
        self.total_added = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, task_label=0, distractor_label=0,
            physical=None) -> int:
        i = self.ptr
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.task_labels[i] = task_label
        self.distractor_labels[i] = distractor_label
        self.physical[i] = 0.0 if physical is None else physical
        self.returns[i] = 0.0
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1
        return i

    def sample(self, batch_size: int, seed=None) -> TransitionBatch:
        """Uniform sample without replacement; labels are not included."""
        idx = self.sample_indices(batch_size, seed)
        return TransitionBatch(self.obs[idx].copy(), self.actions[idx].copy(),
                               self.rewards[idx].copy(), self.next_obs[idx].copy())

    def sample_indices(self, batch_size: int, seed=None) -> np.ndarray:
        if batch_size > self.size:
            raise ValueError(f"buffer holds {self.size} transitions, cannot sample {batch_size}")
        rng = np.random.default_rng(seed)
        return rng.choice(self.size, size=batch_size, replace=False)

    def to_arrays(self) -> dict:
        return {name: getattr(self, name)[:self.size].astype(np.float64) for name in self._FIELDS}

    def meta(self) -> dict:
        return {"capacity": self.capacity, "ptr": self.ptr, "size": self.size,
                "total_added": self.total_added}

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> ReplayBuffer:
        buf = cls(int(meta["capacity"]), arrays["obs"].shape[1], arrays["physical"].shape[1])
        n = int(meta["size"])
        for name in cls._FIELDS:
            dst = getattr(buf, name)
            dst[:n] = arrays[name].astype(dst.dtype)
        buf.ptr, buf.size, buf.total_added = int(meta["ptr"]), n, int(meta["total_added"])
        return buf


class Collector:
    """Runs a uniform-random behaviour policy and records labelled transitions.

    Keeps the episode in progress between calls so collection can be
    interleaved with training.
    """

    def __init__(self, env: DistractedEnv, buffer: ReplayBuffer, seed: int = 0):
        self.env = env
        self.buffer = buffer
        self.rng = np.random.default_rng([seed, 3])
        self._episodes = 0
        self._seed = seed
        self._start_episode()

    def _start_episode(self):
        self.obs = self.env.reset(seed=self._seed * 1_000_003 + self._episodes)
        self._episodes += 1
        self._slots = []
        self._rewards = []

    def _close_episode(self):
        # discounted return-to-go within the episode, truncated at its end
        gamma = self.env.config.return_discount
        running = 0.0
        for slot, r in zip(reversed(self._slots), reversed(self._rewards)):
            running = r + gamma * running
            self.buffer.returns[slot] = running

    def step(self):
        env = self.env
        action = int(self.rng.integers(env.config.n_actions))
        task_label, distractor_label = env.task_label, env.distractor_label
        physical = env.physical_state
        next_obs, reward, done = env.step(action)
        slot = self.buffer.add(self.obs, action, reward, next_obs, task_label,
                               distractor_label, physical)
        self._slots.append(slot)
        self._rewards.append(reward)
        self.obs = next_obs
        if done:
            self._close_episode()
            self._start_episode()

    def run(self, n_steps: int):
        for _ in range(n_steps):
            self.step()
        return self.buffer

    def flush(self):
        """Write truncated returns for the episode in progress."""
        self._close_episode()


def collect(env: DistractedEnv, buffer: ReplayBuffer, n_steps: int, seed: int = 0) -> ReplayBuffer:
    """Fill ``buffer`` with ``n_steps`` uniform-random transitions from ``env``."""
    collector = Collector(env, buffer, seed)
    collector.run(n_steps)
    collector.flush()
    return buffer


def env_config_fields() -> dict:
    return {f.name: f.type for f in fields(DistractedEnvConfig)}
