"""Sequential multi-stage reaching task.

State is [x, y, z, p1, p2, p3]: an end-effector position in [-1, 1]^3 and
one completion flag per stage. Actions are velocity commands in [-1, 1]^3.
Stage k completes when the effector comes within ``RADIUS`` of goal k while
all earlier stages are complete; each completion pays +1, and finishing the
last stage ends the episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DT = 0.1
SPEED = 1.0
RADIUS = 0.15
GOALS = np.array([[0.6, 0.6, 0.6], [-0.6, 0.6, -0.6], [0.0, -0.7, 0.3]])


@dataclass
class StageTask:
    max_steps: int = 120
    reward_mode: str = "sparse"

    state_dim = 6
    action_dim = 3
    stages = len(GOALS)
    env_id = "stagetask"

    def __post_init__(self):
        if self.reward_mode not in ("sparse", "shaped"):
            raise ValueError("reward mode must be 'sparse' or 'shaped'")

    def reset(self, rng: np.random.Generator, n: int = 1, random_start: bool = False) -> np.ndarray:
        out = np.zeros((n, 6))
        out[:, :3] = rng.uniform(-0.3, 0.3, (n, 3))
        if random_start:
            # start some episodes part-way through the task for coverage
            done = rng.integers(0, self.stages, n)
            for k in range(n):
                out[k, 3 : 3 + done[k]] = 1.0
                out[k, :3] = rng.uniform(-1.0, 1.0, 3)
        return out

    def current_stage(self, state: np.ndarray) -> np.ndarray:
        return np.atleast_2d(state)[:, 3:].sum(axis=1).round().astype(np.int64)

    def step(self, state: np.ndarray, action: np.ndarray):
        state = np.atleast_2d(np.asarray(state, dtype=float))
        a = np.clip(np.atleast_2d(np.asarray(action, dtype=float)), -1.0, 1.0)
        nxt = state.copy()
        nxt[:, :3] = np.clip(state[:, :3] + DT * SPEED * a, -1.0, 1.0)
        k = self.current_stage(state)
        live = k < self.stages
        goal = GOALS[np.minimum(k, self.stages - 1)]
        hit = live & (np.linalg.norm(nxt[:, :3] - goal, axis=1) < RADIUS)
        nxt[np.nonzero(hit)[0], 3 + k[hit]] = 1.0
        reward = hit.astype(float)
        if self.reward_mode == "shaped":
            reward = reward - DT * np.linalg.norm(nxt[:, :3] - goal, axis=1) * live
        done = self.current_stage(nxt) >= self.stages
        return nxt, reward, done

    def success(self, state: np.ndarray) -> np.ndarray:
        return self.current_stage(state) >= self.stages

    def expert_action(self, state: np.ndarray, gain: float = 4.0) -> np.ndarray:
        state = np.atleast_2d(state)
        k = np.minimum(self.current_stage(state), self.stages - 1)
        return np.clip(gain * (GOALS[k] - state[:, :3]), -1.0, 1.0)
