"""Episode driver shared by training, evaluation and behaviour export.

Every step it applies due perturbations, lets events re-query the
hypernetwork, measures the batch's diversity to set alpha, acts, and steps
all unfinished environments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .diversity import (
    ALPHA_CAP,
    ALPHA_FLOOR,
    DeviationSet,
    compute_alpha,
    euler_residuals,
    pairwise_nmd,
)
from .errors import DegenerateConfiguration, TrainingDivergence
from .events import EventRecord, encode_event, pick_event
from .envs import (
    PerturbationPlan,
    TaskConfig,
    apply_perturbation,
    obs_width,
    observe,
    reset,
    step_batch,
)
from .hypernet import BehaviorAssignment, generate, maybe_requery
from .model import AgentModel, critic_input, critic_value
from .policy import act, batch_deviations, features, sample_deviations, shared_term

logger = logging.getLogger(__name__)

EULER_AUDIT_BEHAVIOURS = 8


@dataclass(frozen=True)
class AlphaSettings:
    """`fallback` is alpha per unit of target, used when diversity cannot be measured."""

    probe_obs: int = 16
    floor: float = ALPHA_FLOOR
    cap: float = ALPHA_CAP
    fallback: float = 1.0


@dataclass
class QueryRecord:
    env: int
    t: int
    event: EventRecord
    slots: tuple[int, ...]
    obs: np.ndarray
    event_vec: np.ndarray
    target: float
    pairs: np.ndarray | None = None
    deviations: np.ndarray | None = None


@dataclass
class RolloutBatch:
    """Per (step, env[, slot]) arrays. Steps after an episode ends are padding:
    inactive, zero reward and value, done = 1."""

    obs: np.ndarray
    alive: np.ndarray
    pre_tanh: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    active: np.ndarray
    targets: np.ndarray
    alphas: np.ndarray
    realized: np.ndarray
    fallback: np.ndarray
    pair_ids: np.ndarray
    probe_obs: list[np.ndarray]
    behaviour_ids: list[np.ndarray]
    pair_refs: np.ndarray
    queries: list[QueryRecord]
    events: list[list[EventRecord | None]]
    returns: np.ndarray
    lengths: np.ndarray
    completed: np.ndarray
    query_counts: np.ndarray
    euler: list[float] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def env_count(self) -> int:
        return int(self.rewards.shape[1])

    @property
    def env_steps(self) -> int:
        return int(self.lengths.sum())

    @property
    def steps_used(self) -> int:
        """Timesteps at which at least one environment was still running."""
        return int(self.active.any(axis=1).sum())


def _query_pairs(record: QueryRecord, model: AgentModel) -> list:
    pairs = generate(model.hypernet, record.obs, record.event_vec, record.target)
    for p in pairs:
        if not (np.all(np.isfinite(p.c)) and np.all(np.isfinite(p.d_up))):
            raise TrainingDivergence(f"hypernetwork emitted non-finite adapters at t={record.t}")
    return pairs


def collect(
    model: AgentModel,
    task: TaskConfig,
    *,
    seeds: Sequence[int],
    targets: Sequence[float],
    alpha: AlphaSettings = AlphaSettings(),
    deterministic: bool = False,
    single_query: bool = False,
    plan: PerturbationPlan | None = None,
    with_values: bool = True,
    keep_pairs: bool = False,
    trajectory: list[dict[str, Any]] | None = None,
    episode_offset: int = 0,
    workers: int | None = None,
) -> RolloutBatch:
    E, A, H = len(seeds), task.agents, task.horizon
    od, d_a = obs_width(task), model.backbone.action_dim
    backbone = model.backbone
    log_std = np.asarray(backbone.shared_log_std, dtype=np.float64)

    obs_arr = np.zeros((H, E, A, od))
    alive = np.zeros((H, E, A), dtype=bool)
    pre_tanh = np.zeros((H, E, A, d_a))
    log_probs = np.zeros((H, E, A))
    rewards = np.zeros((H, E))
    values = np.zeros((H, E))
    dones = np.ones((H, E))
    active_mask = np.zeros((H, E), dtype=bool)
    target_arr = np.zeros((H, E))
    alpha_arr = np.zeros((H, E))
    realized = np.zeros((H, E))
    fallback = np.zeros((H, E), dtype=bool)
    pair_ids = np.full((H, E, A), -1, dtype=np.int64)
    probe_obs: list[np.ndarray] = []
    behaviour_ids: list[np.ndarray] = []
    events: list[list[EventRecord | None]] = [[None] * E for _ in range(H)]
    euler: list[float] = []

    queries: list[QueryRecord] = []
    pair_refs: list[tuple[int, int]] = []
    slot_pair: list[dict[int, int]] = [{} for _ in range(E)]
    query_counts = np.zeros(E, dtype=np.int64)

    states = []
    for s, target in zip(seeds, targets):
        state, _ = reset(task, int(s), nmd_des=float(target))
        states.append(state)
    rngs = [np.random.default_rng([int(s), 1]) for s in seeds]
    assignments: list[BehaviorAssignment | None] = [None] * E
    pending = [EventRecord.null(0) for _ in range(E)]
    finished = [False] * E
    returns = np.zeros(E)
    lengths = np.zeros(E, dtype=np.int64)
    completed = np.zeros(E, dtype=bool)
    warned_fallback = False

    for t in range(H):
        running = [e for e in range(E) if not finished[e]]
        if not running:
            break

        # perturbations and event-driven queries
        current_obs = {}
        for e in running:
            state = states[e]
            pert_event = EventRecord.null(t)
            if plan:
                state, pert_event = apply_perturbation(state, plan, t)
            ev = pick_event([pert_event, pending[e]], t)
            observations = observe(task, state)
            calls: list[QueryRecord] = []

            def recording_generator(params, rows, event_vec, nmd_des, e=e, ev=ev, calls=calls):
                record = QueryRecord(
                    env=e,
                    t=t,
                    event=ev,
                    slots=(),
                    obs=np.asarray(rows, dtype=np.float64),
                    event_vec=np.asarray(event_vec, dtype=np.float64),
                    target=float(nmd_des),
                )
                calls.append(record)
                return _query_pairs(record, model)

            assignment = maybe_requery(
                assignments[e],
                ev,
                t,
                params=model.hypernet,
                observations=observations,
                live_slots=state.live_slots,
                nmd_des=state.nmd_des,
                event_driven=not single_query,
                generator=recording_generator,
            )
            if calls:
                record = calls[0]
                record.slots = assignment.slots
                qid = len(queries)
                if keep_pairs:
                    record.pairs = np.stack([p.flatten() for p in assignment.pairs])
                    phi = features(backbone, record.obs)
                    c = np.stack([p.c for p in assignment.pairs])
                    d = np.stack([p.d_up for p in assignment.pairs])
                    record.deviations = np.asarray(sample_deviations(phi, c, d))
                queries.append(record)
                query_counts[e] += 1
                slot_pair[e] = {}
                for row, slot in enumerate(assignment.slots):
                    slot_pair[e][slot] = len(pair_refs)
                    pair_refs.append((qid, row))
            assignments[e] = assignment
            states[e] = state
            current_obs[e] = observations
            events[t][e] = ev

        # diversity over every live behaviour in the batch
        rows, owners, c_rows, d_rows, ids = [], [], [], [], []
        for e in running:
            assignment = assignments[e]
            for slot, pair in zip(assignment.slots, assignment.pairs):
                rows.append(current_obs[e][slot])
                owners.append((e, slot))
                c_rows.append(pair.c)
                d_rows.append(pair.d_up)
                ids.append(slot_pair[e][slot])
        obs_rows = np.asarray(rows)
        phi = features(backbone, obs_rows)
        c_stack, d_stack = np.stack(c_rows), np.stack(d_rows)
        probe = min(alpha.probe_obs, len(rows))
        devs = batch_deviations(phi[:probe], c_stack, d_stack)
        behaviours = len(rows)
        measured = float(pairwise_nmd(devs)) if behaviours >= 2 else 0.0
        usable = behaviours >= 2 and measured > alpha.floor
        probe_obs.append(obs_rows[:probe].copy())
        behaviour_ids.append(np.asarray(ids, dtype=np.int64))

        env_alpha = {}
        for e in running:
            target = float(states[e].nmd_des)
            env_alpha[e] = (
                compute_alpha(target, measured, alpha.floor, alpha.cap)
                if usable
                else min(alpha.fallback * target, alpha.cap)
            )
            target_arr[t, e] = target
            alpha_arr[t, e] = env_alpha[e]
            fallback[t, e] = not usable
        if not usable and not warned_fallback:
            logger.debug(
                "diversity unmeasurable at t=%d; using stored alpha %.4g per unit target",
                t,
                alpha.fallback,
            )
            warned_fallback = True

        shared_probe = np.asarray(shared_term(backbone, phi[:probe]))
        if behaviours >= 2:
            for value in sorted(set(env_alpha.values())):
                means = shared_probe[:, None, :] + value * devs
                nmd = float(pairwise_nmd(means))
                for e in running:
                    if env_alpha[e] == value:
                        realized[t, e] = nmd
            if usable:
                try:
                    euler.append(
                        float(np.mean(euler_residuals(DeviationSet(devs), EULER_AUDIT_BEHAVIOURS)))
                    )
                except DegenerateConfiguration:
                    pass

        # act
        u = np.asarray(sample_deviations(phi, c_stack, d_stack))
        scale = np.array([env_alpha[e] for e, _ in owners])
        means = np.asarray(shared_term(backbone, phi)) + scale[:, None] * u
        if not np.all(np.isfinite(means)):
            raise TrainingDivergence(f"policy produced non-finite actions at t={t}")

        actions, cursor = [], 0
        for e in running:
            n = len(assignments[e].slots)
            slots = list(assignments[e].slots)
            sample = act(means[cursor : cursor + n], log_std, rngs[e], deterministic)
            cursor += n
            obs_arr[t, e] = current_obs[e]
            alive[t, e] = states[e].live
            active_mask[t, e] = True
            pre_tanh[t, e, slots] = sample.pre_tanh
            log_probs[t, e, slots] = sample.log_prob
            pair_ids[t, e, slots] = [slot_pair[e][s] for s in slots]
            actions.append(sample.action)

        if with_values:
            x = np.stack(
                [critic_input(current_obs[e], states[e].live, states[e].nmd_des) for e in running]
            )
            v = np.asarray(critic_value(model.critic, x))
            if not np.all(np.isfinite(v)):
                raise TrainingDivergence(f"critic produced non-finite values at t={t}")
            values[t, running] = v

        results = step_batch(task, [states[e] for e in running], actions, workers)
        for e, result in zip(running, results):
            if trajectory is not None:
                ev = events[t][e]
                trajectory.append(
                    {
                        "episode": episode_offset + e,
                        "t": t,
                        "positions": states[e].positions,
                        "velocities": states[e].velocities,
                        "live_mask": states[e].live,
                        "reward": result.reward,
                        "event_kind": ev.kind.name,
                        "event_payload": list(ev.payload),
                        "done": result.done,
                        "alpha": alpha_arr[t, e],
                        "nmd_target": target_arr[t, e],
                        "nmd_realized": realized[t, e],
                    }
                )
            rewards[t, e] = result.reward
            dones[t, e] = float(result.done)
            states[e] = result.state
            pending[e] = result.event
            returns[e] += result.reward
            lengths[e] = t + 1
            if result.done:
                finished[e] = True
                completed[e] = result.state.completed

    return RolloutBatch(
        obs=obs_arr,
        alive=alive,
        pre_tanh=pre_tanh,
        log_probs=log_probs,
        rewards=rewards,
        values=values,
        dones=dones,
        active=active_mask,
        targets=target_arr,
        alphas=alpha_arr,
        realized=realized,
        fallback=fallback,
        pair_ids=pair_ids,
        probe_obs=probe_obs,
        behaviour_ids=behaviour_ids,
        pair_refs=np.asarray(pair_refs, dtype=np.int64).reshape(-1, 2),
        queries=queries,
        events=events,
        returns=returns,
        lengths=lengths,
        completed=completed,
        query_counts=query_counts,
        euler=euler,
    )
