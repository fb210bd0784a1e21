from __future__ import annotations

from collections import deque

import numpy as np

from .base import PixelEnv

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

LAYOUT = (
    "..........",
    ".####.###.",
    ".#......#.",
    ".#.####.#.",
    "...#..#...",
    ".#.#..#.#.",
    ".#.##.#.#.",
    ".#......#.",
    ".###.####.",
    "..........",
)

STEP_COST = 0.01
GOAL_REWARD = 1.0
MAX_STEPS = 100


def wall_grid(layout=LAYOUT) -> np.ndarray:
    return np.array([[ch == "#" for ch in row] for row in layout])


def shortest_path_length(walls: np.ndarray, start, goal) -> int | None:
    """Breadth-first search over the 4-connected free cells."""
    start, goal = tuple(start), tuple(goal)
    if start == goal:
        return 0
    h, w = walls.shape
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        (r, c), dist = frontier.popleft()
        for dr, dc in MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not walls[nr, nc] and (nr, nc) not in seen:
                if (nr, nc) == goal:
                    return dist + 1
                seen.add((nr, nc))
                frontier.append(((nr, nc), dist + 1))
    return None


class Treasure(PixelEnv):
    """Fixed maze, fixed start in the top-left corner, goal resampled each episode.

    Observation channel 0 shows walls (0.5) and the agent (1.0); channel 1
    shows the goal (1.0). Every step costs 0.01; reaching the goal adds +1
    and ends the episode, which is otherwise capped at 100 steps.
    """

    env_id = "treasure"
    n_actions = 4
    obs_shape = (10, 10, 2)
    start = (0, 0)

    def __init__(self, seed: int | None = None):
        super().__init__(seed)
        self.walls = wall_grid()
        self.free = [tuple(map(int, rc)) for rc in np.argwhere(~self.walls)]
        self.pos = self.start
        self.goal = self.start

    def reset(self, seed: int | None = None, goal: tuple[int, int] | None = None) -> np.ndarray:
        super().reset(seed)
        if goal is not None:
            if self.walls[goal] or tuple(goal) == self.start:
                raise ValueError(f"goal {goal} must be a free cell other than the start")
            self.goal = tuple(goal)
        return self.observation()

    def _reset(self) -> None:
        self.pos = self.start
        choices = [rc for rc in self.free if rc != self.start]
        self.goal = choices[int(self.rng.integers(len(choices)))]

    def _step(self, action: int) -> tuple[float, bool]:
        dr, dc = MOVES[action]
        r, c = self.pos[0] + dr, self.pos[1] + dc
        h, w = self.walls.shape
        if 0 <= r < h and 0 <= c < w and not self.walls[r, c]:
            self.pos = (r, c)
        reward = -STEP_COST
        if self.pos == self.goal:
            return reward + GOAL_REWARD, True
        return reward, self.t >= MAX_STEPS

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.obs_shape)
        obs[..., 0] = self.walls * 0.5
        obs[self.pos[0], self.pos[1], 0] = 1.0
        obs[self.goal[0], self.goal[1], 1] = 1.0
        return obs

    def optimal_return(self) -> float:
        """Return of the shortest path from the current position to the goal."""
        length = shortest_path_length(self.walls, self.pos, self.goal)
        if length is None or length > MAX_STEPS:
            return -STEP_COST * MAX_STEPS
        return GOAL_REWARD - STEP_COST * length

    def optimal_action(self) -> int:
        best, best_len = 0, None
        h, w = self.walls.shape
        for a, (dr, dc) in enumerate(MOVES):
            r, c = self.pos[0] + dr, self.pos[1] + dc
            if not (0 <= r < h and 0 <= c < w) or self.walls[r, c]:
                continue
            n = shortest_path_length(self.walls, (r, c), self.goal)
            if n is not None and (best_len is None or n < best_len):
                best, best_len = a, n
        return best
