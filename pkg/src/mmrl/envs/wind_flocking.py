"""Two agents of different size fly upwind to a waypoint; the larger one can
shield the smaller from the wind by flying just upwind of it."""
from __future__ import annotations

import math
from dataclasses import replace
from typing import Any

import numpy as np

from .core import PomgState, Task, TaskConfig, reached, register

GOAL = np.array([0.0, 0.8])
GOAL_RADIUS = 0.1
SPAWN_CENTRE = np.array([0.0, -0.6])
SPAWN_SPREAD = 0.1


def shield_mask(config: TaskConfig, state: PomgState) -> np.ndarray:
    """Agents sitting in the downwind cone of a larger live agent."""
    wind = state.wind
    strength = np.linalg.norm(wind)
    shielded = np.zeros(state.team_size, dtype=bool)
    if strength == 0.0:
        return shielded
    downwind = wind / strength
    cos_limit = math.cos(math.radians(config.shield_half_angle))
    for i in range(state.team_size):
        if not state.live[i]:
            continue
        for j in range(state.team_size):
            if j == i or not state.live[j] or state.capability[j] <= state.capability[i]:
                continue
            offset = state.positions[i] - state.positions[j]
            dist = np.linalg.norm(offset)
            if 0.0 < dist <= config.shield_range and offset @ downwind >= cos_limit * dist:
                shielded[i] = True
                break
    return shielded


@register
class WindFlocking(Task):
    name = "wind_flocking"
    preset = {
        "agents": 2,
        "goals": 1,
        "horizon": 200,
        "capabilities": (1.0, 0.6),
        "completion_bonus": 5.0,
    }

    def goal_count(self, config: TaskConfig) -> int:
        return 1

    def flag_width(self, config: TaskConfig) -> int:
        return 2

    def spawn(self, config: TaskConfig, rng: np.random.Generator) -> dict[str, Any]:
        offsets = rng.uniform(-SPAWN_SPREAD, SPAWN_SPREAD, size=(config.agents, 2))
        return {
            "positions": SPAWN_CENTRE + offsets,
            "goals": GOAL[None].copy(),
            "wind": np.array([0.0, -config.wind]),
        }

    def flags(self, config: TaskConfig, state: PomgState) -> np.ndarray:
        scale = config.wind if config.wind > 0 else 1.0
        return state.wind / scale

    def external_velocity(self, config: TaskConfig, state: PomgState) -> np.ndarray:
        factor = np.where(shield_mask(config, state), config.shield_factor, 1.0)
        push = factor[:, None] * state.wind[None, :]
        push[~state.live] = 0.0
        return push

    def advance(
        self, config: TaskConfig, prev: PomgState, nxt: PomgState, actions: np.ndarray
    ) -> tuple[PomgState, float]:
        live = nxt.live
        before = np.linalg.norm(prev.positions[live] - GOAL, axis=1).mean()
        after = np.linalg.norm(nxt.positions[live] - GOAL, axis=1).mean()
        reward = config.progress_weight * float(before - after)

        pos = nxt.positions[live]
        if len(pos) > 1:
            gaps = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
            reward -= config.cohesion_weight * float(gaps[np.triu_indices(len(pos), 1)].mean())

        strength = np.linalg.norm(nxt.wind)
        if strength > 0:
            against = np.maximum(0.0, -(actions[live] @ (nxt.wind / strength)))
            reward -= config.energy_weight * float(np.sum(against**2))

        inside = reached(nxt, GOAL, GOAL_RADIUS)
        visited = nxt.visited.copy()
        if inside.any():
            visited[0] = True
        completed = bool(inside[live].all())
        if completed and not prev.completed:
            reward += config.completion_bonus
        return replace(nxt, visited=visited, completed=completed), reward
