from __future__ import annotations

import asyncio
from typing import Any, Sequence

from .. import config as settings
from ..errors import UsageError
from .core import PomgState, StepResult, TaskConfig, step


async def _step_all(
    config: TaskConfig,
    states: Sequence[PomgState],
    actions: Sequence[Any],
    workers: int,
) -> list[StepResult]:
    sem = asyncio.Semaphore(workers)

    async def run(state: PomgState, act: Any) -> StepResult:
        async with sem:
            return await asyncio.to_thread(step, config, state, act)

    return list(await asyncio.gather(*(run(s, a) for s, a in zip(states, actions))))


def step_batch(
    config: TaskConfig,
    states: Sequence[PomgState],
    actions: Sequence[Any],
    workers: int | None = None,
) -> list[StepResult]:
    """Step independent environments; results come back in input order whatever the pool size."""
    if len(states) != len(actions):
        raise UsageError("one action set per environment")
    workers = workers or settings.MMRL_THREADS
    if workers <= 1 or len(states) <= 1:
        return [step(config, s, a) for s, a in zip(states, actions)]
    return asyncio.run(_step_all(config, states, actions, workers))
