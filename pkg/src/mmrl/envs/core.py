"""Event-augmented multi-agent engine: kinematics, observations, event detection.

Agents are discs in the square arena [-1, 1]^2. Each task plugs in its own
spawn layout, observation flags, external forces, walls and reward.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, ClassVar

import numpy as np

from ..errors import ConfigurationError, UsageError
from ..events import EventRecord, Signal, pick_event

DT = 0.1
AGENT_RADIUS = 0.03
GOAL_RADIUS = 0.05
PLATE_RADIUS = 0.08
ARENA = 1.0


@dataclass(frozen=True)
class TaskConfig:
    task: str = "dispersion"
    agents: int = 2
    goals: int = 2
    horizon: int = 200
    max_speed: float = 0.05
    drag: float = 0.95
    wind: float = 0.02
    capabilities: tuple[float, ...] = ()
    goal_reward: float = 1.0
    completion_bonus: float = 5.0
    distance_weight: float = 0.1
    progress_weight: float = 10.0
    cohesion_weight: float = 0.1
    energy_weight: float = 0.01
    door_half_width: float = 0.15
    shield_factor: float = 0.2
    shield_range: float = 0.2
    shield_half_angle: float = 30.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.agents < 1:
            raise ConfigurationError("a task needs at least one agent", key="task.agents")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be positive", key="task.horizon")
        if not 0.0 <= self.shield_factor < 1.0:
            raise ConfigurationError("shield factor must lie in [0, 1)", key="task.shield_factor")
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task '{self.task}'", key="task.task")

    def capability(self) -> np.ndarray:
        caps = list(self.capabilities[: self.agents])
        caps += [1.0] * (self.agents - len(caps))
        return np.asarray(caps, dtype=np.float64)


@dataclass(frozen=True)
class PomgState:
    positions: np.ndarray
    velocities: np.ndarray
    capability: np.ndarray
    live: np.ndarray
    goals: np.ndarray
    visited: np.ndarray
    plates: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=bool))
    door_open: bool = False
    wind: np.ndarray = field(default_factory=lambda: np.zeros(2))
    nmd_des: float = 0.0
    t: int = 0
    fired: frozenset[int] = frozenset()
    completed: bool = False

    @property
    def live_slots(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.live)]

    @property
    def team_size(self) -> int:
        return int(self.live.size)


@dataclass(frozen=True)
class StepResult:
    state: PomgState
    observations: np.ndarray
    reward: float
    event: EventRecord
    done: bool


class Task:
    """Per-task hooks. Subclasses register themselves in TASKS."""

    name: ClassVar[str] = ""
    preset: ClassVar[dict[str, Any]] = {}

    def goal_count(self, config: TaskConfig) -> int:
        return config.goals

    def flag_width(self, config: TaskConfig) -> int:
        raise NotImplementedError

    def spawn(self, config: TaskConfig, rng: np.random.Generator) -> dict[str, Any]:
        raise NotImplementedError

    def flags(self, config: TaskConfig, state: PomgState) -> np.ndarray:
        raise NotImplementedError

    def external_velocity(self, config: TaskConfig, state: PomgState) -> np.ndarray:
        return np.zeros_like(state.velocities)

    def constrain(
        self, config: TaskConfig, state: PomgState, prev: np.ndarray, proposed: np.ndarray
    ) -> np.ndarray:
        return proposed

    def advance(
        self, config: TaskConfig, prev: PomgState, nxt: PomgState, actions: np.ndarray
    ) -> tuple[PomgState, float]:
        raise NotImplementedError


TASKS: dict[str, Task] = {}


def register(task_cls: type[Task]) -> type[Task]:
    TASKS[task_cls.name] = task_cls()
    return task_cls


def task_for(config: TaskConfig) -> Task:
    return TASKS[config.task]


def obs_width(config: TaskConfig) -> int:
    task = task_for(config)
    return 5 + 2 * task.goal_count(config) + task.flag_width(config)


def observe(config: TaskConfig, state: PomgState) -> np.ndarray:
    """Rows per slot: velocity (2), position (2), capability (1), goal offsets (2M), flags."""
    flags = task_for(config).flags(config, state)
    rows = []
    for i in range(state.team_size):
        rel = (state.goals - state.positions[i]).reshape(-1)
        rows.append(
            np.concatenate(
                [state.velocities[i], state.positions[i], [state.capability[i]], rel, flags]
            )
        )
    return np.asarray(rows)


def reset(
    config: TaskConfig, seed: int | None = None, nmd_des: float = 0.0
) -> tuple[PomgState, np.ndarray]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    task = task_for(config)
    layout = task.spawn(config, rng)
    n = config.agents
    state = PomgState(
        positions=layout["positions"],
        velocities=np.zeros((n, 2)),
        capability=layout.get("capability", config.capability()),
        live=np.ones(n, dtype=bool),
        goals=layout["goals"],
        visited=np.zeros(len(layout["goals"]), dtype=bool),
        wind=layout.get("wind", np.zeros(2)),
        nmd_des=float(nmd_des),
    )
    return state, observe(config, state)


def step(config: TaskConfig, state: PomgState, actions: Any) -> StepResult:
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    live = state.live
    if actions.shape[0] != int(live.sum()):
        raise UsageError(f"expected {int(live.sum())} actions, got {actions.shape[0]}")
    task = task_for(config)

    applied = np.zeros_like(state.velocities)
    applied[live] = np.clip(actions, -1.0, 1.0)
    vmax = config.max_speed * state.capability / DT
    vel = config.drag * state.velocities + (1.0 - config.drag) * applied * vmax[:, None]
    vel = vel + task.external_velocity(config, state)
    speed = np.linalg.norm(vel, axis=1)
    too_fast = speed > vmax
    vel[too_fast] *= (vmax[too_fast] / speed[too_fast])[:, None]
    vel[~live] = 0.0

    bound = ARENA - AGENT_RADIUS
    proposed = np.clip(state.positions + DT * vel, -bound, bound)
    positions = task.constrain(config, state, state.positions, proposed)
    positions[~live] = state.positions[~live]

    moved = replace(state, positions=positions, velocities=vel, t=state.t + 1)
    nxt, reward = task.advance(config, state, moved, applied)
    event = detect_events(state, nxt)
    done = nxt.completed or nxt.t >= config.horizon
    return StepResult(nxt, observe(config, nxt), float(reward), event, done)


def detect_events(prev: PomgState, curr: PomgState) -> EventRecord:
    """Map what changed between two consecutive states to the highest-priority event."""
    t = curr.t
    candidates: list[EventRecord] = []
    lost = np.flatnonzero(prev.live & ~curr.live)
    if lost.size:
        candidates.append(EventRecord.agent_removed(int(lost[0]), t))
    changed = np.flatnonzero(curr.live & (prev.capability != curr.capability))
    if changed.size:
        i = int(changed[0])
        candidates.append(EventRecord.capability_changed(i, float(curr.capability[i]), t))
    if prev.nmd_des != curr.nmd_des:
        candidates.append(EventRecord.target_changed(curr.nmd_des, t))
    if prev.door_open != curr.door_open:
        sig = Signal.DOOR_OPEN if curr.door_open else Signal.DOOR_CLOSED
        candidates.append(EventRecord.env_signal(sig, t))
    for plate, (on, off) in enumerate(
        ((Signal.PLATE_1_ON, Signal.PLATE_1_OFF), (Signal.PLATE_2_ON, Signal.PLATE_2_OFF))
    ):
        if prev.plates[plate] != curr.plates[plate]:
            candidates.append(EventRecord.env_signal(on if curr.plates[plate] else off, t))
    if np.any(curr.visited & ~prev.visited):
        candidates.append(EventRecord.env_signal(Signal.GOAL_REACHED, t))
    return pick_event(candidates, t)


def reached(state: PomgState, point: np.ndarray, radius: float) -> np.ndarray:
    """Per-slot mask of live agents within `radius` of `point`."""
    return state.live & (np.linalg.norm(state.positions - point, axis=1) <= radius)


def env_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
