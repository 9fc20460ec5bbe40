"""Evaluation-time perturbations and their flag syntax.

    remove:<agent>@<t>              drop agent <agent> at step t
    remove:first_on_plate2[@<t>]    drop the first agent found on plate 2 (armed from step t)
    target:<value>@<t>              change the diversity target
    capability:<agent>=<value>@<t>  change one agent's capability

Entries are comma-separated. Each entry fires at most once per episode.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from ..errors import PerturbationSpecError, UsageError
from ..events import EventRecord
from .core import PomgState, detect_events
from .pressure_plate import PLATE_2, on_plate

FIRST_ON_PLATE_2 = "first_on_plate2"

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_PATTERNS = {
    "remove": re.compile(
        rf"^remove:(?P<who>\d+|{FIRST_ON_PLATE_2})(?:@(?P<at>\d+|{FIRST_ON_PLATE_2}))?$"
    ),
    "target": re.compile(rf"^target:(?P<value>{_NUMBER})@(?P<at>\d+)$"),
    "capability": re.compile(rf"^capability:(?P<who>\d+)=(?P<value>{_NUMBER})@(?P<at>\d+)$"),
}


@dataclass(frozen=True)
class Perturbation:
    kind: Literal["remove", "target", "capability"]
    at: int
    agent: int | None = None
    value: float | None = None
    conditional: bool = False

    def due(self, state: PomgState, t: int) -> bool:
        if t < self.at:
            return False
        if self.conditional:
            return bool(on_plate(state, PLATE_2).any())
        # fixed-time entries fire at their step; a late start still fires once
        return True


@dataclass(frozen=True)
class PerturbationPlan:
    entries: tuple[Perturbation, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.entries)

    def validate(self, horizon: int, team_size: int) -> "PerturbationPlan":
        for p in self.entries:
            if p.at >= horizon:
                raise PerturbationSpecError(
                    f"perturbation at step {p.at} is beyond horizon {horizon}"
                )
            if p.agent is not None and p.agent >= team_size:
                raise PerturbationSpecError(
                    f"agent {p.agent} does not exist in a team of {team_size}"
                )
        return self


def parse_perturbations(spec: str | None) -> PerturbationPlan:
    if not spec or not spec.strip():
        return PerturbationPlan()
    entries = []
    for raw in spec.split(","):
        text = raw.strip()
        kind = text.split(":", 1)[0]
        pattern = _PATTERNS.get(kind)
        match = pattern.match(text) if pattern else None
        if match is None:
            raise PerturbationSpecError(f"cannot parse perturbation '{text}'")
        fields = match.groupdict()
        if kind == "remove":
            who, at_text = fields["who"], fields["at"]
            if who == FIRST_ON_PLATE_2:
                at = 0 if at_text in (None, FIRST_ON_PLATE_2) else int(at_text)
                entries.append(Perturbation(kind="remove", at=at, conditional=True))
                continue
            if at_text is None or at_text == FIRST_ON_PLATE_2:
                raise PerturbationSpecError(f"'{text}' needs a step: remove:<agent>@<t>")
            entries.append(Perturbation(kind="remove", at=int(at_text), agent=int(who)))
        elif kind == "target":
            value = float(fields["value"])
            if value < 0:
                raise PerturbationSpecError(f"'{text}': diversity target must be non-negative")
            entries.append(Perturbation(kind="target", at=int(fields["at"]), value=value))
        else:
            value = float(fields["value"])
            if value <= 0:
                raise PerturbationSpecError(f"'{text}': capability must be positive")
            entries.append(
                Perturbation(
                    kind="capability", at=int(fields["at"]), agent=int(fields["who"]), value=value
                )
            )
    return PerturbationPlan(tuple(entries))


def _apply_one(state: PomgState, p: Perturbation) -> PomgState:
    if p.kind == "remove":
        if p.conditional:
            candidates = np.flatnonzero(on_plate(state, PLATE_2))
            agent = int(candidates[0])
        else:
            agent = int(p.agent)
        if not state.live[agent]:
            return state
        if int(state.live.sum()) <= 1:
            raise UsageError("cannot remove the last live agent")
        live = state.live.copy()
        live[agent] = False
        velocities = state.velocities.copy()
        velocities[agent] = 0.0
        return replace(state, live=live, velocities=velocities)
    if p.kind == "target":
        return replace(state, nmd_des=float(p.value))
    capability = state.capability.copy()
    capability[int(p.agent)] = float(p.value)
    return replace(state, capability=capability)


def apply_perturbation(
    state: PomgState, plan: PerturbationPlan, t: int
) -> tuple[PomgState, EventRecord]:
    """Apply every due entry that has not fired yet; emit the highest-priority resulting event."""
    fired = set(state.fired)
    current = state
    for index, p in enumerate(plan.entries):
        if index in fired or not p.due(current, t):
            continue
        current = _apply_one(current, p)
        fired.add(index)
    if len(fired) == len(state.fired):
        return state, EventRecord.null(t)
    current = replace(current, fired=frozenset(fired))
    return current, detect_events(replace(state, t=t), replace(current, t=t))
