"""Uniform ring-buffer replay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class Batch:
    obs: np.ndarray        # (B, h, w, c) float64
    actions: np.ndarray    # (B,) int64
    rewards: np.ndarray    # (B,) float64
    next_obs: np.ndarray
    dones: np.ndarray      # (B,) float64, 1.0 for terminal

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Fixed-capacity store that overwrites the oldest transition first.

    ``obs`` and ``next_obs`` are stored side by side per slot, so a sampled
    index always yields a consistent pair.
    """

    def __init__(self, capacity: int, obs_shape, n_actions: int, min_replay_history: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.n_actions = n_actions
        self.min_replay_history = min_replay_history
        self.obs = np.zeros((capacity, *obs_shape), dtype=np.float32)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=np.float64)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} outside [0, {self.n_actions})")
        if not np.isfinite(reward):
            raise ValueError("reward must be finite")
        i = self.inserted % self.capacity
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self.inserted += 1

    def can_sample(self) -> bool:
        return self.inserted >= max(self.min_replay_history, 1)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self.can_sample():
            raise RuntimeError(
                f"replay holds {self.inserted} transitions, needs {self.min_replay_history}")
        return rng.integers(0, len(self), size=batch_size)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx].astype(np.float64), self.actions[idx].copy(),
                     self.rewards[idx].copy(), self.next_obs[idx].astype(np.float64),
                     self.dones[idx].copy())

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        return self.gather(self.sample_indices(batch_size, rng))
