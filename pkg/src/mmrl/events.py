"""Typed task events and their fixed-width encoding for the hypernetwork."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigurationError

MAX_TEAM_SIZE = 8


class EventKind(IntEnum):
    NULL = 0
    AGENT_REMOVED = 1
    CAPABILITY_CHANGED = 2
    DIVERSITY_TARGET_CHANGED = 3
    ENV_SIGNAL = 4


class Signal(IntEnum):
    PLATE_1_ON = 0
    PLATE_1_OFF = 1
    PLATE_2_ON = 2
    PLATE_2_OFF = 3
    DOOR_OPEN = 4
    DOOR_CLOSED = 5
    GOAL_REACHED = 6


DOOR_SIGNALS = frozenset({Signal.DOOR_OPEN, Signal.DOOR_CLOSED})
PLATE_SIGNALS = frozenset(
    {Signal.PLATE_1_ON, Signal.PLATE_1_OFF, Signal.PLATE_2_ON, Signal.PLATE_2_OFF}
)

KIND_COUNT = len(EventKind)
PAYLOAD_WIDTH = len(Signal)
EVENT_WIDTH = KIND_COUNT + PAYLOAD_WIDTH


@dataclass(frozen=True)
class EventRecord:
    kind: EventKind = EventKind.NULL
    payload: tuple[float, ...] = field(default_factory=tuple)
    timestep: int = 0

    def __post_init__(self) -> None:
        if self.kind == EventKind.NULL and any(self.payload):
            raise ConfigurationError("Null event carries no payload")
        if len(self.payload) > PAYLOAD_WIDTH or not all(np.isfinite(self.payload)):
            raise ConfigurationError(f"bad event payload {self.payload}")

    @property
    def is_null(self) -> bool:
        return self.kind == EventKind.NULL

    @property
    def signal(self) -> Signal | None:
        if self.kind != EventKind.ENV_SIGNAL:
            return None
        return Signal(int(np.argmax(self.payload)))

    @property
    def agent(self) -> int | None:
        if self.kind not in (EventKind.AGENT_REMOVED, EventKind.CAPABILITY_CHANGED):
            return None
        return int(round(self.payload[0] * MAX_TEAM_SIZE))

    @property
    def label(self) -> str:
        sig = self.signal
        return sig.name.lower() if sig is not None else self.kind.name.lower()

    def at(self, timestep: int) -> "EventRecord":
        return EventRecord(self.kind, self.payload, timestep)

    # constructors

    @classmethod
    def null(cls, timestep: int = 0) -> "EventRecord":
        return cls(EventKind.NULL, (), timestep)

    @classmethod
    def agent_removed(cls, agent: int, timestep: int = 0) -> "EventRecord":
        return cls(EventKind.AGENT_REMOVED, (agent / MAX_TEAM_SIZE,), timestep)

    @classmethod
    def capability_changed(cls, agent: int, value: float, timestep: int = 0) -> "EventRecord":
        return cls(EventKind.CAPABILITY_CHANGED, (agent / MAX_TEAM_SIZE, float(value)), timestep)

    @classmethod
    def target_changed(cls, value: float, timestep: int = 0) -> "EventRecord":
        return cls(EventKind.DIVERSITY_TARGET_CHANGED, (float(value),), timestep)

    @classmethod
    def env_signal(cls, signal: Signal, timestep: int = 0) -> "EventRecord":
        onehot = [0.0] * PAYLOAD_WIDTH
        onehot[int(signal)] = 1.0
        return cls(EventKind.ENV_SIGNAL, tuple(onehot), timestep)


def priority(ev: EventRecord) -> int:
    """Higher wins when several predicates flip in one step."""
    if ev.kind == EventKind.ENV_SIGNAL:
        sig = ev.signal
        if sig in DOOR_SIGNALS:
            return 3
        if sig in PLATE_SIGNALS:
            return 2
        return 1
    return {
        EventKind.AGENT_REMOVED: 6,
        EventKind.CAPABILITY_CHANGED: 5,
        EventKind.DIVERSITY_TARGET_CHANGED: 4,
    }.get(ev.kind, 0)


def pick_event(candidates: list[EventRecord], timestep: int = 0) -> EventRecord:
    live = [ev for ev in candidates if not ev.is_null]
    if not live:
        return EventRecord.null(timestep)
    # max keeps the first of equal priorities
    return max(live, key=priority)


def encode_event(ev: EventRecord) -> np.ndarray:
    vec = np.zeros(EVENT_WIDTH)
    if ev.is_null:
        return vec
    vec[int(ev.kind)] = 1.0
    vec[KIND_COUNT : KIND_COUNT + len(ev.payload)] = ev.payload
    return vec
