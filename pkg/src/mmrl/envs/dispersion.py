from __future__ import annotations

from dataclasses import replace
from typing import Any

import numpy as np

from .core import GOAL_RADIUS, PomgState, Task, TaskConfig, reached, register

SPAWN_JITTER = 0.02
GOAL_SPREAD = 0.9


@register
class Dispersion(Task):
    """Agents start together in the centre and must visit every goal between them."""

    name = "dispersion"
    preset = {"agents": 2, "goals": 2, "horizon": 200, "completion_bonus": 5.0}

    def flag_width(self, config: TaskConfig) -> int:
        return config.goals

    def spawn(self, config: TaskConfig, rng: np.random.Generator) -> dict[str, Any]:
        return {
            "positions": rng.uniform(-SPAWN_JITTER, SPAWN_JITTER, size=(config.agents, 2)),
            "goals": rng.uniform(-GOAL_SPREAD, GOAL_SPREAD, size=(config.goals, 2)),
        }

    def flags(self, config: TaskConfig, state: PomgState) -> np.ndarray:
        return state.visited.astype(np.float64)

    def advance(
        self, config: TaskConfig, prev: PomgState, nxt: PomgState, actions: np.ndarray
    ) -> tuple[PomgState, float]:
        visited = nxt.visited.copy()
        for g, goal in enumerate(nxt.goals):
            if reached(nxt, goal, GOAL_RADIUS).any():
                visited[g] = True
        reward = config.goal_reward * float(np.sum(visited & ~prev.visited))
        completed = bool(visited.all())
        if completed and not prev.completed:
            reward += config.completion_bonus
        return replace(nxt, visited=visited, completed=completed), reward
