from __future__ import annotations

import numpy as np


class EpisodeOver(RuntimeError):
    """step() called on a finished episode before reset()."""


class PixelEnv:
    env_id: str = ""
    obs_shape: tuple[int, int, int] = (10, 10, 1)
    n_actions: int = 1

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.done = True
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.done = False
        self.t = 0
        self._reset()
        return self.observation()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeOver("episode finished; call reset()")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action}")
        self.t += 1
        reward, done = self._step(action)
        self.done = done
        return self.observation(), reward, done

    def _reset(self) -> None:
        raise NotImplementedError

    def _step(self, action: int) -> tuple[float, bool]:
        raise NotImplementedError

    def observation(self) -> np.ndarray:
        raise NotImplementedError

    def optimal_action(self) -> int:
        raise NotImplementedError
