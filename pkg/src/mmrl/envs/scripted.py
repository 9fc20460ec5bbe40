"""Hand-written reference controllers used to check the tasks are solvable."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PomgState
from .pressure_plate import EXIT, PLATE_1, PLATE_2

KP = 5.0
KD = 2.0
ARRIVAL_TOL = 0.08

BELOW_DOOR = np.array([0.0, -0.2])
ABOVE_DOOR = np.array([0.0, 0.2])
HOLDER_REST = np.array([-0.3, 0.5])


def pd_action(position: np.ndarray, velocity: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Steer towards `target`, damped by the current velocity; clipped to the unit box."""
    return np.clip(KP * (target - position) - KD * velocity, -1.0, 1.0)


@dataclass
class WaypointRoute:
    points: list[np.ndarray]
    index: int = 0

    def target(self, position: np.ndarray) -> np.ndarray:
        while (
            self.index < len(self.points) - 1
            and np.linalg.norm(self.points[self.index] - position) < ARRIVAL_TOL
        ):
            self.index += 1
        return self.points[self.index]


@dataclass
class PressurePlateScript:
    """Slot 0 holds plate 1, slot 1 crosses and takes over on plate 2, slot 2 crosses to
    the exit. Slot 0 leaves plate 1 once plate 2 is held, and crosses last. Crossers
    wait against the wall until the door opens."""

    routes: dict[int, WaypointRoute] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.routes = {
            0: WaypointRoute([PLATE_1, BELOW_DOOR, ABOVE_DOOR, HOLDER_REST]),
            1: WaypointRoute([BELOW_DOOR, ABOVE_DOOR, PLATE_2]),
            2: WaypointRoute([BELOW_DOOR, ABOVE_DOOR, EXIT]),
        }

    def __call__(self, state: PomgState) -> np.ndarray:
        actions = []
        for slot in state.live_slots:
            pos, vel = state.positions[slot], state.velocities[slot]
            route = self.routes.get(slot)
            if route is None:
                actions.append(pd_action(pos, vel, pos))
                continue
            target = route.target(pos)
            if slot == 0 and route.index == 1 and not state.plates[1]:
                target = PLATE_1
            actions.append(pd_action(pos, vel, target))
        return np.asarray(actions)


def goal_seeking(state: PomgState) -> np.ndarray:
    """Each live agent drives to its nearest unvisited goal (falls back to the nearest goal)."""
    actions = []
    for slot in state.live_slots:
        pos, vel = state.positions[slot], state.velocities[slot]
        open_goals = state.goals[~state.visited] if (~state.visited).any() else state.goals
        target = open_goals[np.argmin(np.linalg.norm(open_goals - pos, axis=1))]
        actions.append(pd_action(pos, vel, target))
    return np.asarray(actions)
