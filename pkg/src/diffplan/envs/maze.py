"""Point-mass maze: a double integrator moving through a wall grid.

States are [x, y, vx, vy] with positions in world units (a grid cell is
``CELL`` wide; cell (i, j) covers [i*CELL, (i+1)*CELL) x [j*CELL, (j+1)*CELL)).
Actions are accelerations clipped to [-1, 1]. The env is stateless: ``step``
maps a batch of states and actions to the next batch.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

CELL = 0.5
DT = 0.1
VMAX = 1.0
RADIUS = 0.05  # half-width of the agent's collision box
GOAL_RADIUS = 0.2

LAYOUTS = {
    "umaze": [
        "#####",
        "#S..#",
        "###.#",
        "#G..#",
        "#####",
    ],
    "medium": [
        "########",
        "#S.##..#",
        "#..#...#",
        "##...###",
        "#..#...#",
        "#.#..#.#",
        "#...#.G#",
        "########",
    ],
    "large": [
        "############",
        "#S...#.....#",
        "#.##.#.#.#.#",
        "#......#...#",
        "#.####.###.#",
        "#..#.#.....#",
        "##.#.#.#.###",
        "#..#...#..G#",
        "############",
    ],
}
MAX_STEPS = {"umaze": 100, "medium": 160, "large": 220}
REWARD_MODES = ("sparse", "shaped")


@dataclass
class PointMaze:
    layout: str = "umaze"
    reward_mode: str = "sparse"
    max_steps: int | None = None
    walls: np.ndarray = field(init=False, repr=False)
    start_cell: tuple[int, int] = field(init=False)
    goal_cell: tuple[int, int] = field(init=False)

    state_dim = 4
    action_dim = 2

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown maze layout {self.layout!r}; choose from {sorted(LAYOUTS)}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward mode must be one of {REWARD_MODES}")
        rows = LAYOUTS[self.layout]
        self.walls = np.array([[c == "#" for c in row] for row in rows])
        for i, row in enumerate(rows):
            for j, c in enumerate(row):
                if c == "S":
                    self.start_cell = (i, j)
                elif c == "G":
                    self.goal_cell = (i, j)
        if self.max_steps is None:
            self.max_steps = MAX_STEPS[self.layout]
        self._next = self._bfs_next()

    @property
    def env_id(self) -> str:
        return f"pointmaze-{self.layout}"

    @property
    def goal(self) -> np.ndarray:
        return self.center(self.goal_cell)

    @staticmethod
    def center(cell) -> np.ndarray:
        return (np.asarray(cell, dtype=float) + 0.5) * CELL

    def free_cells(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(~self.walls))]

    def cell_of(self, pos: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(pos) / CELL).astype(np.int64)

    def _bfs_next(self) -> dict[tuple[int, int], tuple[int, int]]:
        """For every free cell, the neighbour one step closer to the goal."""
        nxt, dist = {self.goal_cell: self.goal_cell}, {self.goal_cell: 0}
        q = deque([self.goal_cell])
        while q:
            c = q.popleft()
            for d in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                n = (c[0] + d[0], c[1] + d[1])
                if not self.walls[n] and n not in dist:
                    dist[n] = dist[c] + 1
                    nxt[n] = c
                    q.append(n)
        self.distance = dist
        return nxt

    def shortest_path(self, cell) -> list[tuple[int, int]]:
        path = [tuple(cell)]
        while path[-1] != self.goal_cell:
            path.append(self._next[path[-1]])
        return path

    def next_cell(self, cell) -> tuple[int, int]:
        return self._next[tuple(int(c) for c in cell)]

    # -- dynamics ---------------------------------------------------------

    def blocked(self, pos: np.ndarray) -> np.ndarray:
        """True where the agent's box at ``pos`` ([B, 2]) overlaps a wall cell."""
        lo = np.floor((pos - RADIUS) / CELL).astype(np.int64)
        hi = np.floor((pos + RADIUS) / CELL).astype(np.int64)
        hit = np.zeros(len(pos), dtype=bool)
        for ci in (lo[:, 0], hi[:, 0]):
            for cj in (lo[:, 1], hi[:, 1]):
                hit |= self.walls[ci, cj]
        return hit

    def reset(self, rng: np.random.Generator, n: int = 1, random_start: bool = False) -> np.ndarray:
        """Start states: the layout's start cell (or a random free non-goal cell), jittered, at rest."""
        cells = [c for c in self.free_cells() if c != self.goal_cell]
        out = np.zeros((n, 4))
        for k in range(n):
            cell = cells[rng.integers(len(cells))] if random_start else self.start_cell
            out[k, :2] = self.center(cell) + rng.uniform(-0.25, 0.25, 2) * CELL
        return out

    def step(self, state: np.ndarray, action: np.ndarray):
        """Semi-implicit Euler: v' = clip(v + dt a), p' = p + dt v', one axis at a time against walls."""
        state = np.atleast_2d(np.asarray(state, dtype=float))
        a = np.clip(np.atleast_2d(np.asarray(action, dtype=float)), -1.0, 1.0)
        pos, vel = state[:, :2].copy(), state[:, 2:].copy()
        vel = np.clip(vel + DT * a, -VMAX, VMAX)
        for ax in range(2):
            trial = pos.copy()
            trial[:, ax] += DT * vel[:, ax]
            hit = self.blocked(trial)
            pos[~hit, ax] = trial[~hit, ax]
            vel[hit, ax] = 0.0
        nxt = np.concatenate([pos, vel], axis=1)
        dist = np.linalg.norm(pos - self.goal, axis=1)
        done = dist < GOAL_RADIUS
        if self.reward_mode == "sparse":
            reward = done.astype(float)
        else:
            reward = -dist / CELL
        return nxt, reward, done

    def success(self, state: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(state)[:, :2] - self.goal, axis=1) < GOAL_RADIUS

    # -- scripted expert --------------------------------------------------

    def expert_action(self, state: np.ndarray, kp: float = 6.0, kd: float = 4.0) -> np.ndarray:
        """PD control toward the next cell centre on the BFS shortest path."""
        state = np.atleast_2d(state)
        pos, vel = state[:, :2], state[:, 2:]
        cells = self.cell_of(pos)
        target = np.empty_like(pos)
        for k, c in enumerate(cells):
            c = tuple(int(v) for v in c)
            if self.walls[c]:
                target[k] = pos[k]
                continue
            nxt = self._next[c]
            # look one further ahead once the agent is near the next centre's line
            if nxt != self.goal_cell and np.linalg.norm(self.center(nxt) - pos[k]) < 0.6 * CELL:
                nxt = self._next[nxt]
            target[k] = self.center(nxt)
        return np.clip(kp * (target - pos) - kd * vel, -1.0, 1.0)
