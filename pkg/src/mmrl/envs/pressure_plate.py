"""Three agents, a wall with a door at y = 0, and two plates that hold the door open.

Plate 1 sits on the start side and plate 2 on the far side; the door is open
while any live agent stands on either plate. The team finishes when every live
agent is across and one of them reaches the exit.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Any

import numpy as np

from .core import (
    AGENT_RADIUS,
    GOAL_RADIUS,
    PLATE_RADIUS,
    PomgState,
    Task,
    TaskConfig,
    reached,
    register,
)

PLATE_1 = np.array([-0.6, -0.5])
PLATE_2 = np.array([0.6, 0.5])
EXIT = np.array([0.0, 0.8])
DOOR = np.array([0.0, 0.0])
SPAWN_CENTRE = np.array([0.0, -0.6])
SPAWN_SPREAD = 0.15


def far_side(state: PomgState) -> np.ndarray:
    return state.positions[:, 1] > AGENT_RADIUS


def on_plate(state: PomgState, plate: np.ndarray) -> np.ndarray:
    return reached(state, plate, PLATE_RADIUS)


def _push_out_of_wall(
    positions: np.ndarray, sides: np.ndarray, blocked: np.ndarray
) -> np.ndarray:
    out = positions.copy()
    inside = blocked & (np.abs(out[:, 1]) < AGENT_RADIUS)
    out[inside, 1] = sides[inside] * AGENT_RADIUS
    return out


@register
class PressurePlate(Task):
    name = "pressure_plate"
    preset = {"agents": 3, "goals": 3, "horizon": 300, "completion_bonus": 10.0}

    def goal_count(self, config: TaskConfig) -> int:
        return 3

    def flag_width(self, config: TaskConfig) -> int:
        return 3

    def spawn(self, config: TaskConfig, rng: np.random.Generator) -> dict[str, Any]:
        offsets = rng.uniform(-SPAWN_SPREAD, SPAWN_SPREAD, size=(config.agents, 2))
        return {
            "positions": SPAWN_CENTRE + offsets,
            "goals": np.stack([PLATE_1, PLATE_2, EXIT]),
        }

    def flags(self, config: TaskConfig, state: PomgState) -> np.ndarray:
        return np.array([*state.plates.astype(np.float64), float(state.door_open)])

    def constrain(
        self, config: TaskConfig, state: PomgState, prev: np.ndarray, proposed: np.ndarray
    ) -> np.ndarray:
        """Project wall crossings back onto the agent's own side of the wall."""
        sides = np.where(prev[:, 1] >= 0.0, 1.0, -1.0)
        in_door = np.abs(proposed[:, 0]) <= config.door_half_width
        blocked = ~(state.door_open & in_door)
        crossed = np.sign(proposed[:, 1]) != sides
        out = proposed.copy()
        snap = blocked & crossed
        out[snap, 1] = sides[snap] * AGENT_RADIUS
        return _push_out_of_wall(out, sides, blocked)

    def advance(
        self, config: TaskConfig, prev: PomgState, nxt: PomgState, actions: np.ndarray
    ) -> tuple[PomgState, float]:
        plates = np.array([on_plate(nxt, PLATE_1).any(), on_plate(nxt, PLATE_2).any()])
        door_open = bool(plates.any())
        positions = nxt.positions
        if not door_open:
            # a closing door pushes anyone standing in the doorway back to their side
            sides = np.where(prev.positions[:, 1] >= 0.0, 1.0, -1.0)
            positions = _push_out_of_wall(positions, sides, np.ones(len(positions), dtype=bool))
        visited = nxt.visited.copy()
        nxt = replace(nxt, positions=positions, plates=plates, door_open=door_open)
        if reached(nxt, EXIT, GOAL_RADIUS).any():
            visited[2] = True
        live = nxt.live
        completed = bool(visited[2] and far_side(nxt)[live].all())
        nxt = replace(nxt, visited=visited, completed=completed)

        reward = -config.distance_weight * self.objective_distance(config, nxt)
        if completed and not prev.completed:
            reward += config.completion_bonus
        return nxt, reward

    def objective_distance(self, config: TaskConfig, state: PomgState) -> float:
        """Distance still to cover: someone to a plate while the door is shut,
        start-side agents to the doorway while it is open, and the nearest agent to the exit."""
        live = state.live
        pos = state.positions[live]
        total = float(np.min(np.linalg.norm(pos - EXIT, axis=1)))
        if not state.door_open:
            to_plate = np.minimum(
                np.linalg.norm(pos - PLATE_1, axis=1), np.linalg.norm(pos - PLATE_2, axis=1)
            )
            total += float(np.min(to_plate))
        else:
            holding = (on_plate(state, PLATE_1) | on_plate(state, PLATE_2))[live]
            waiting = ~far_side(state)[live] & ~holding
            if waiting.any():
                total += float(np.mean(np.linalg.norm(pos[waiting] - DOOR, axis=1)))
        return total
