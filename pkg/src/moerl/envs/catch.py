from __future__ import annotations

import numpy as np

from .base import PixelEnv

LEFT, STAY, RIGHT = 0, 1, 2


class Catch(PixelEnv):
    """A ball falls one row per step; move the bottom-row paddle under it.

    Ball pixels are 1.0, the paddle 0.5. The episode ends when the ball
    reaches the bottom row (height - 1 steps) with reward +1 for a catch
    and -1 for a miss.
    """

    env_id = "catch"
    n_actions = 3

    def __init__(self, seed: int | None = None, rows: int = 10, columns: int = 10):
        super().__init__(seed)
        self.rows, self.columns = rows, columns
        self.obs_shape = (rows, columns, 1)
        self.ball_row = self.ball_col = self.paddle_col = 0

    def reset(self, seed: int | None = None, ball_col: int | None = None,
              paddle_col: int | None = None) -> np.ndarray:
        obs = super().reset(seed)
        if ball_col is not None:
            self.ball_col = int(ball_col)
        if paddle_col is not None:
            self.paddle_col = int(paddle_col)
        return self.observation()

    def _reset(self) -> None:
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(self.columns))
        self.paddle_col = self.columns // 2

    def _step(self, action: int) -> tuple[float, bool]:
        self.paddle_col = int(np.clip(self.paddle_col + action - 1, 0, self.columns - 1))
        self.ball_row += 1
        if self.ball_row == self.rows - 1:
            return (1.0 if self.ball_col == self.paddle_col else -1.0), True
        return 0.0, False

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.obs_shape)
        obs[self.rows - 1, self.paddle_col, 0] = 0.5
        obs[self.ball_row, self.ball_col, 0] = 1.0
        return obs

    def optimal_action(self) -> int:
        return int(np.sign(self.ball_col - self.paddle_col)) + 1
