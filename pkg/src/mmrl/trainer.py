"""On-policy training: rollouts, GAE, and clipped policy-gradient updates.

Gradients reach the hypernetwork through both the adapters it emits and
alpha, which is recomputed on the tape from the same batch of deviations.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .diversity import alpha_expression, pairwise_nmd
from .envs import env_seed
from .errors import TrainingDivergence, UsageError
from .hypernet import generate_batch
from .model import AgentModel, critic_input, critic_value, init_model
from .numeric import tape as T
from .numeric.optim import AdamState, adam_step, clip_grad_norm
from .numeric.tree import tree_flatten, tree_unflatten, watch_tree
from .policy import (
    batch_deviations,
    features,
    gaussian_entropy,
    sample_deviations,
    shared_term,
    squashed_log_prob,
)
from .rollout import AlphaSettings, RolloutBatch, collect
from .utils import append_jsonl, ensure_dir, write_json

logger = logging.getLogger(__name__)

# keeps the sqrt gradient finite when two behaviours coincide on a probe observation
NMD_STABILIZER = 1e-24


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    last_values: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns over a (T, ...) rollout.

    `last_values` bootstraps the step after the final one; episodes that end
    inside the rollout are cut by `dones`.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise UsageError("rewards, values and dones must share one shape")
    adv = np.zeros_like(rewards)
    gae = np.zeros(rewards.shape[1:])
    next_value = np.zeros(rewards.shape[1:]) if last_values is None else np.asarray(last_values)
    for t in reversed(range(rewards.shape[0])):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * mask - values[t]
        gae = delta + gamma * lam * mask * gae
        adv[t] = gae
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    centred = adv - adv.mean()
    std = centred.std()
    return centred / std if std > 1e-8 else centred


def sample_targets(rng: np.random.Generator, count: int, low: float, high: float) -> np.ndarray:
    """Log-uniform diversity targets in [low, high]."""
    return np.exp(rng.uniform(np.log(low), np.log(high), size=count))


@dataclass
class _PairTable:
    c: Any
    d: Any
    first_row: dict[int, int]
    refs: np.ndarray

    def rows(self, pair_ids: np.ndarray) -> np.ndarray:
        refs = self.refs[np.asarray(pair_ids, dtype=np.int64)]
        return np.array([self.first_row[int(q)] + int(r) for q, r in refs], dtype=np.int64)


def _regenerate(hypernet: Any, batch: RolloutBatch, pair_ids: np.ndarray) -> _PairTable:
    """Re-run every query that produced one of `pair_ids`, batched by team size."""
    qids = np.unique(batch.pair_refs[pair_ids, 0])
    groups: dict[int, list[int]] = defaultdict(list)
    for q in qids:
        groups[len(batch.queries[q].slots)].append(int(q))

    c_parts, d_parts, first_row, offset = [], [], {}, 0
    for n, qs in sorted(groups.items()):
        obs = np.stack([batch.queries[q].obs for q in qs])
        events = np.stack([batch.queries[q].event_vec for q in qs])
        targets = np.array([batch.queries[q].target for q in qs])
        c, d = generate_batch(hypernet, obs, events, targets)
        rows = len(qs) * n
        c_parts.append(T.reshape(c, (rows, *c.shape[2:])))
        d_parts.append(T.reshape(d, (rows, *d.shape[2:])))
        for i, q in enumerate(qs):
            first_row[q] = offset + i * n
        offset += rows
    return _PairTable(
        c=T.concat(c_parts, axis=0),
        d=T.concat(d_parts, axis=0),
        first_row=first_row,
        refs=batch.pair_refs,
    )


def ppo_loss(
    model: AgentModel,
    batch: RolloutBatch,
    timesteps: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Any, dict[str, float]]:
    """Clipped surrogate + value loss - entropy bonus over the given timesteps.

    Works on a plain or a watched model; with a watched one the result is
    recorded on its tape.
    """
    timesteps = np.sort(np.asarray(timesteps, dtype=np.int64))
    live = batch.alive[timesteps] & batch.active[timesteps][..., None]
    ti, es, ss = np.nonzero(live)
    ts = timesteps[ti]
    if ts.size == 0:
        raise UsageError("minibatch holds no live samples")

    needed = [batch.pair_ids[ts, es, ss]]
    recompute = [] if cfg.freeze_alpha else [t for t in timesteps if not batch.fallback[t].any()]
    needed += [batch.behaviour_ids[t] for t in recompute]
    table = _regenerate(model.hypernet, batch, np.unique(np.concatenate(needed)))

    backbone = model.backbone
    recompute_set = set(int(t) for t in recompute)
    alpha_parts = []
    for t in timesteps:
        block = es[ts == t]
        if block.size == 0:
            continue
        if int(t) not in recompute_set:
            alpha_parts.append(batch.alphas[t, block])
            continue
        rows = table.rows(batch.behaviour_ids[t])
        probe = features(backbone, batch.probe_obs[t])
        devs = batch_deviations(probe, T.take(table.c, rows), T.take(table.d, rows))
        measured = pairwise_nmd(devs, stabilizer=NMD_STABILIZER)
        alpha_parts.append(
            alpha_expression(batch.targets[t, block], measured, cfg.alpha_floor, cfg.alpha_cap)
        )
    alpha = T.concat(alpha_parts, axis=0)

    rows = table.rows(batch.pair_ids[ts, es, ss])
    phi = features(backbone, batch.obs[ts, es, ss])
    u = sample_deviations(phi, T.take(table.c, rows), T.take(table.d, rows))
    mean = shared_term(backbone, phi) + T.reshape(alpha, (ts.size, 1)) * u
    log_prob = squashed_log_prob(batch.pre_tanh[ts, es, ss], mean, backbone.shared_log_std)

    adv = normalize_advantages(advantages[ts, es])
    ratio = T.exp(log_prob - batch.log_probs[ts, es, ss])
    surrogate = T.minimum(ratio * adv, T.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv)
    policy_loss = -T.reduce_mean(surrogate)

    vt, ve = np.nonzero(batch.active[timesteps])
    vt = timesteps[vt]
    x = critic_input(batch.obs[vt, ve], batch.alive[vt, ve], batch.targets[vt, ve])
    err = critic_value(model.critic, x) - returns[vt, ve]
    value_loss = 0.5 * T.reduce_mean(err * err)

    entropy = gaussian_entropy(backbone.shared_log_std)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    stats = {
        "policy_loss": float(T.value_of(policy_loss)),
        "value_loss": float(T.value_of(value_loss)),
        "entropy": float(T.value_of(entropy)),
    }
    return loss, stats


def ppo_update(
    model: AgentModel,
    batch: RolloutBatch,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: TrainConfig,
    state: AdamState,
    rng: np.random.Generator,
) -> tuple[AgentModel, AdamState, dict[str, float]]:
    steps = np.flatnonzero(batch.active.any(axis=1))
    totals: dict[str, list[float]] = defaultdict(list)
    for _ in range(cfg.epochs):
        order = rng.permutation(steps)
        for chunk in np.array_split(order, min(cfg.minibatches, len(order))):
            if not batch.alive[chunk].any():
                continue
            tape = T.Tape()
            watched = watch_tree(tape, model)
            loss, stats = ppo_loss(watched, batch, chunk, advantages, returns, cfg)
            if not np.isfinite(T.value_of(loss)):
                raise TrainingDivergence(f"non-finite loss {float(T.value_of(loss))}")
            by_var = T.grad_backward(tape, loss)
            leaves = tree_flatten(watched)
            grads = {
                name: by_var.get(var, np.zeros_like(var.value)) for name, var in leaves.items()
            }
            grads, norm = clip_grad_norm(grads, cfg.max_grad_norm)
            params = {name: var.value for name, var in leaves.items()}
            updated, state = adam_step(
                params,
                grads,
                state,
                lr=cfg.lr,
                beta1=cfg.adam_beta1,
                beta2=cfg.adam_beta2,
                eps=cfg.adam_eps,
            )
            model = tree_unflatten(model, updated)
            for key, value in stats.items():
                totals[key].append(value)
            totals["grad_norm"].append(norm)
    return model, state, {k: float(np.mean(v)) for k, v in totals.items()}


def _masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
    return float(values[mask].mean()) if mask.any() else 0.0


def update_metrics(batch: RolloutBatch) -> dict[str, float]:
    active = batch.active
    measured = active & ~batch.fallback
    return {
        "mean_reward": float(batch.returns.mean()),
        "completion_rate": float(batch.completed.mean()),
        "episode_len_mean": float(batch.lengths.mean()),
        "nmd_target_mean": _masked_mean(batch.targets, active),
        "nmd_realized_mean": _masked_mean(batch.realized, active),
        "alpha_mean": _masked_mean(batch.alphas, active),
        "alpha_unit_mean": _masked_mean(
            batch.alphas / np.maximum(batch.targets, 1e-12), measured
        ),
        "euler_residual_mean": float(np.mean(batch.euler)) if batch.euler else 0.0,
    }


@dataclass
class TrainResult:
    model: AgentModel
    checkpoint: Path
    metrics: list[dict[str, Any]]
    env_steps: int
    alpha_ema: float


def train(
    run: RunConfig,
    out_dir: Path,
    *,
    seed: int | None = None,
    steps: int | None = None,
    single_query: bool | None = None,
    workers: int | None = None,
) -> TrainResult:
    overrides = {
        k: v
        for k, v in {"seed": seed, "total_steps": steps, "single_query": single_query}.items()
        if v is not None
    }
    cfg = dataclasses.replace(run.train, **overrides)
    run = dataclasses.replace(run, train=cfg)
    out_dir = ensure_dir(out_dir)
    write_json(
        out_dir / "run.json",
        {
            "config": run.to_dict(),
            "seed": cfg.seed,
            "ablation": cfg.single_query,
            "version": __version__,
        },
    )
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)

    rng = np.random.default_rng(cfg.seed)
    model = init_model(rng, run.task, run.model)
    adam = AdamState()
    alpha_ema, env_steps, update = 1.0, 0, 0
    metrics: list[dict[str, Any]] = []

    def meta() -> dict[str, Any]:
        return {
            "seed": cfg.seed,
            "env_steps": env_steps,
            "alpha_ema": alpha_ema,
            "nmd_des_range": [cfg.nmd_des_min, cfg.nmd_des_max],
            "single_query": cfg.single_query,
        }

    logger.info(
        "training %s for %d steps (%d envs, seed %d%s)",
        run.task.task,
        cfg.total_steps,
        cfg.envs,
        cfg.seed,
        ", single query" if cfg.single_query else "",
    )
    while env_steps < cfg.total_steps:
        started = time.perf_counter()
        seeds = [env_seed(cfg.seed, update * cfg.envs + e) for e in range(cfg.envs)]
        targets = sample_targets(rng, cfg.envs, cfg.nmd_des_min, cfg.nmd_des_max)
        alpha = AlphaSettings(cfg.alpha_probe_obs, cfg.alpha_floor, cfg.alpha_cap, alpha_ema)
        try:
            batch = collect(
                model,
                run.task,
                seeds=seeds,
                targets=targets,
                alpha=alpha,
                single_query=cfg.single_query,
                workers=workers,
            )
            advantages, returns = compute_gae(
                batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.gae_lambda
            )
            model, adam, stats = ppo_update(model, batch, advantages, returns, cfg, adam, rng)
        except TrainingDivergence as exc:
            dump = save_checkpoint(out_dir / "divergence.mmrl", model, run, **meta())
            logger.error(
                "training diverged at update %d: %s (state saved to %s)", update, exc, dump
            )
            raise

        summary = update_metrics(batch)
        if (~batch.fallback & batch.active).any():
            decay = cfg.alpha_ema_decay
            alpha_ema = decay * alpha_ema + (1.0 - decay) * summary["alpha_unit_mean"]
        env_steps += batch.env_steps
        record = {
            "update": update,
            "env_steps": env_steps,
            **{k: v for k, v in summary.items() if k != "alpha_unit_mean"},
            "policy_loss": stats.get("policy_loss", 0.0),
            "value_loss": stats.get("value_loss", 0.0),
            "entropy": stats.get("entropy", 0.0),
            "grad_norm": stats.get("grad_norm", 0.0),
            "seconds": time.perf_counter() - started,
        }
        append_jsonl(metrics_path, [record])
        metrics.append(record)
        logger.info(
            "update %d: steps=%d reward=%.3f completion=%.2f nmd %.3f/%.3f alpha=%.3g",
            update,
            env_steps,
            record["mean_reward"],
            record["completion_rate"],
            record["nmd_realized_mean"],
            record["nmd_target_mean"],
            record["alpha_mean"],
        )
        if batch.euler:
            logger.info(
                "update %d: mean Euler residual %.4f", update, record["euler_residual_mean"]
            )
        update += 1

    path = save_checkpoint(out_dir / "checkpoint.mmrl", model, run, **meta())
    logger.info("saved %s after %d updates", path, update)
    return TrainResult(
        model=model, checkpoint=path, metrics=metrics, env_steps=env_steps, alpha_ema=alpha_ema
    )
