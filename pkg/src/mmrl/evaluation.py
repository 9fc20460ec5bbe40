from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np

from .checkpoint import Checkpoint
from .envs import PerturbationPlan, PomgState, TaskConfig, reset, step
from .events import EventKind
from .rollout import AlphaSettings, RolloutBatch, collect
from .utils import append_jsonl, ensure_dir

logger = logging.getLogger(__name__)

Controller = Callable[[PomgState], np.ndarray]


@dataclass(frozen=True)
class EvalSummary:
    episodes: int
    completion_rate: float
    mean_reward: float
    mean_length: float
    queries_per_episode: float
    removals: int
    nmd_target: float
    nmd_realized_mean: float
    fallback_steps: int

    def lines(self) -> list[str]:
        return [
            f"episodes:            {self.episodes}",
            f"completion rate:     {self.completion_rate:.3f}",
            f"mean reward:         {self.mean_reward:.3f}",
            f"mean episode length: {self.mean_length:.1f}",
            f"queries per episode: {self.queries_per_episode:.2f}",
            f"agents removed:      {self.removals}",
            f"nmd target/realised: {self.nmd_target:.4g} / {self.nmd_realized_mean:.4g}",
        ]


def eval_task(checkpoint: Checkpoint, agents: int | None = None) -> TaskConfig:
    task = checkpoint.run.task
    if agents is not None and agents != task.agents:
        task = dataclasses.replace(task, agents=agents)
    return task


def alpha_settings(checkpoint: Checkpoint) -> AlphaSettings:
    train = checkpoint.run.train
    return AlphaSettings(
        probe_obs=train.alpha_probe_obs,
        floor=train.alpha_floor,
        cap=train.alpha_cap,
        fallback=checkpoint.alpha_ema,
    )


def episodes(
    checkpoint: Checkpoint,
    *,
    count: int,
    seed: int,
    nmd_des: float,
    plan: PerturbationPlan | None = None,
    agents: int | None = None,
    trajectory: list[dict[str, Any]] | None = None,
    keep_pairs: bool = False,
) -> Iterator[RolloutBatch]:
    """One deterministic single-environment rollout per episode, seeded seed, seed + 1, ..."""
    task = eval_task(checkpoint, agents)
    if plan:
        plan.validate(task.horizon, task.agents)
    alpha = alpha_settings(checkpoint)
    for i in range(count):
        yield collect(
            checkpoint.model,
            task,
            seeds=[seed + i],
            targets=[nmd_des],
            alpha=alpha,
            deterministic=True,
            plan=plan,
            with_values=False,
            keep_pairs=keep_pairs,
            trajectory=trajectory,
            episode_offset=i,
        )


def evaluate(
    checkpoint: Checkpoint,
    *,
    count: int,
    seed: int,
    nmd_des: float,
    plan: PerturbationPlan | None = None,
    agents: int | None = None,
    traj_out: Path | None = None,
) -> EvalSummary:
    trajectory: list[dict[str, Any]] | None = [] if traj_out is not None else None
    returns, lengths, completed, queries, realized = [], [], [], [], []
    removals = fallback_steps = 0
    for batch in episodes(
        checkpoint,
        count=count,
        seed=seed,
        nmd_des=nmd_des,
        plan=plan,
        agents=agents,
        trajectory=trajectory,
    ):
        returns.append(float(batch.returns[0]))
        lengths.append(int(batch.lengths[0]))
        completed.append(bool(batch.completed[0]))
        queries.append(int(batch.query_counts[0]))
        active = batch.active[:, 0]
        realized.extend(batch.realized[active, 0].tolist())
        fallback_steps += int(batch.fallback[active, 0].sum())
        removals += sum(
            1
            for row in batch.events
            if row[0] is not None and row[0].kind == EventKind.AGENT_REMOVED
        )

    if fallback_steps:
        logger.warning(
            "diversity was unmeasurable on %d steps; alpha used the stored average there "
            "and realised NMD may miss the target",
            fallback_steps,
        )
    if traj_out is not None:
        ensure_dir(Path(traj_out).parent)
        Path(traj_out).unlink(missing_ok=True)
        append_jsonl(Path(traj_out), trajectory or [])

    return EvalSummary(
        episodes=count,
        completion_rate=float(np.mean(completed)) if completed else 0.0,
        mean_reward=float(np.mean(returns)) if returns else 0.0,
        mean_length=float(np.mean(lengths)) if lengths else 0.0,
        queries_per_episode=float(np.mean(queries)) if queries else 0.0,
        removals=removals,
        nmd_target=float(nmd_des),
        nmd_realized_mean=float(np.mean(realized)) if realized else 0.0,
        fallback_steps=fallback_steps,
    )


def run_controller(
    task: TaskConfig, controller: Controller, seed: int
) -> tuple[float, int, bool]:
    """Return, length and completion of one episode driven by a hand-written controller."""
    state, _ = reset(task, seed)
    total = 0.0
    while True:
        result = step(task, state, controller(state))
        total += result.reward
        state = result.state
        if result.done:
            return total, state.t, bool(state.completed)


def random_policy_baseline(task: TaskConfig, count: int, seed: int) -> float:
    """Mean episode return under uniform random actions in [-1, 1]."""
    rng = np.random.default_rng(seed)

    def uniform(state: PomgState) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(len(state.live_slots), 2))

    returns = [run_controller(task, uniform, seed + i)[0] for i in range(count)]
    return float(np.mean(returns))


def export_behaviours(
    checkpoint: Checkpoint,
    *,
    count: int,
    seed: int,
    nmd_des: float,
    agents: int | None = None,
) -> Iterator[dict[str, Any]]:
    """One record per agent per hypernetwork query: the flattened adapter pair
    followed by the deviation it produces at the query observation."""
    runs = episodes(
        checkpoint, count=count, seed=seed, nmd_des=nmd_des, agents=agents, keep_pairs=True
    )
    for episode, batch in enumerate(runs):
        for query in batch.queries:
            for row, slot in enumerate(query.slots):
                yield {
                    "episode": episode,
                    "t": query.t,
                    "event_kind": query.event.kind.name,
                    "event_payload": list(query.event.payload),
                    "agent_slot": slot,
                    "nmd_target": query.target,
                    "vector": np.concatenate([query.pairs[row], query.deviations[row]]),
                }
