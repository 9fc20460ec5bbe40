"""Event-driven hypernetwork emitting one adapter pair per live agent.

The attention sequence holds one token per agent plus an event token and a
diversity-target token. There are no positional terms: an agent's adapter
depends on what it observes, not on its slot.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .events import EVENT_WIDTH, EventRecord, encode_event
from .numeric import tape as T
from .numeric.layers import AttentionBlockParams, attention_forward, init_attention_block
from .policy import LoraPair

logger = logging.getLogger(__name__)

HEAD_INIT = 1e-2


@dataclass
class HypernetParams:
    w_token: Any
    b_token: Any
    w_event: Any
    b_event: Any
    w_target: Any
    b_target: Any
    blocks: list[AttentionBlockParams]
    ln_gain: Any
    ln_offset: Any
    w_head: Any
    b_head: Any
    rank: int
    feature_dim: int
    action_dim: int

    def __post_init__(self) -> None:
        width = self.rank * self.feature_dim + self.action_dim * self.rank
        if self.w_head.shape[1] != width:
            raise ConfigurationError(
                f"output head emits {self.w_head.shape[1]} values, adapters need {width}"
            )
        if self.w_event.shape[0] != EVENT_WIDTH:
            raise ConfigurationError(f"event embedding expects width {EVENT_WIDTH}")
        if not 1 <= self.rank <= self.feature_dim:
            raise ConfigurationError(
                f"adapter rank {self.rank} must lie in [1, {self.feature_dim}]"
            )

    @property
    def obs_dim(self) -> int:
        return int(self.w_token.shape[0])

    @property
    def embed(self) -> int:
        return int(self.w_token.shape[1])


def init_hypernet(
    rng: np.random.Generator,
    obs_dim: int,
    rank: int,
    feature_dim: int,
    action_dim: int,
    *,
    embed: int = 64,
    heads: int = 2,
    depth: int = 2,
    ff_width: int = 256,
) -> HypernetParams:
    def dense(fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    width = rank * feature_dim + action_dim * rank
    return HypernetParams(
        w_token=dense(obs_dim, embed),
        b_token=np.zeros(embed),
        w_event=dense(EVENT_WIDTH, embed),
        b_event=np.zeros(embed),
        w_target=dense(1, embed),
        b_target=np.zeros(embed),
        blocks=[init_attention_block(rng, embed, heads, ff_width) for _ in range(depth)],
        ln_gain=np.ones(embed),
        ln_offset=np.zeros(embed),
        w_head=rng.uniform(-HEAD_INIT, HEAD_INIT, size=(embed, width)),
        b_head=np.zeros(width),
        rank=rank,
        feature_dim=feature_dim,
        action_dim=action_dim,
    )


def generate_batch(
    params: HypernetParams, observations: Any, event_vecs: Any, targets: Any
) -> tuple[Any, Any]:
    """Q queries with N agents each.

    observations (Q, N, obs_dim), event_vecs (Q, EVENT_WIDTH), targets (Q,)
    -> C (Q, N, r, d) and D (Q, N, d_a, r). Works on plain or traced params.
    """
    obs = observations if isinstance(observations, T.Var) else np.asarray(observations, float)
    if len(obs.shape) != 3 or obs.shape[1] < 1:
        raise ConfigurationError(f"expected (queries, agents, width) observations, got {obs.shape}")
    queries, agents, width = obs.shape
    if width != params.obs_dim:
        raise ConfigurationError(
            f"hypernetwork expects observation width {params.obs_dim}, got {width}"
        )
    embed = params.embed
    agent_tokens = obs @ params.w_token + params.b_token
    event_token = T.reshape(
        np.asarray(event_vecs, float).reshape(queries, EVENT_WIDTH) @ params.w_event
        + params.b_event,
        (queries, 1, embed),
    )
    target_col = T.reshape(targets, (queries, 1)) if isinstance(targets, T.Var) else (
        np.asarray(targets, float).reshape(queries, 1)
    )
    target_token = T.reshape(target_col @ params.w_target + params.b_target, (queries, 1, embed))

    x = T.concat([agent_tokens, event_token, target_token], axis=1)
    for block in params.blocks:
        x = attention_forward(block, x)
    h = T.layer_norm(x[:, :agents], params.ln_gain, params.ln_offset)
    out = h @ params.w_head + params.b_head

    r, d, d_a = params.rank, params.feature_dim, params.action_dim
    c = T.reshape(out[:, :, : r * d], (queries, agents, r, d))
    d_up = T.reshape(out[:, :, r * d :], (queries, agents, d_a, r))
    return c, d_up


def generate(
    params: HypernetParams, observations: Sequence[Any], event_vec: Any, nmd_des: float
) -> list[LoraPair]:
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise ConfigurationError("generate needs at least one observation row")
    c, d_up = generate_batch(
        params, obs[None], np.asarray(event_vec, float)[None], np.array([nmd_des], float)
    )
    return [LoraPair(c=c[0, i], d_up=d_up[0, i]) for i in range(obs.shape[0])]


@dataclass(frozen=True)
class BehaviorAssignment:
    """Adapters held by the live agents until the next query; `slots[i]` owns `pairs[i]`."""

    pairs: tuple[LoraPair, ...]
    slots: tuple[int, ...]
    generated_at: int
    event: EventRecord = field(default_factory=EventRecord.null)

    def __post_init__(self) -> None:
        if len(self.pairs) != len(self.slots):
            raise ConfigurationError("one adapter pair per live agent")

    def pair_for(self, slot: int) -> LoraPair:
        return self.pairs[self.slots.index(slot)]

    def restrict(self, live_slots: Sequence[int]) -> "BehaviorAssignment":
        live = set(live_slots)
        keep = [i for i, s in enumerate(self.slots) if s in live]
        if len(keep) == len(self.slots):
            return self
        return BehaviorAssignment(
            pairs=tuple(self.pairs[i] for i in keep),
            slots=tuple(self.slots[i] for i in keep),
            generated_at=self.generated_at,
            event=self.event,
        )


PairGenerator = Callable[[HypernetParams, Sequence[Any], Any, float], list]


def maybe_requery(
    assignment: BehaviorAssignment | None,
    ev: EventRecord,
    t: int,
    *,
    params: HypernetParams,
    observations: Sequence[Any],
    live_slots: Sequence[int],
    nmd_des: float,
    event_driven: bool = True,
    generator: PairGenerator = generate,
) -> BehaviorAssignment:
    """Query at t = 0 and whenever an event fires; otherwise hand back `assignment` itself.

    With `event_driven` off only the initial query happens; agents that leave
    simply drop their pair.
    """
    if assignment is not None and t > 0:
        if ev.is_null:
            return assignment
        if not event_driven:
            return assignment.restrict(live_slots)
    slots = tuple(int(s) for s in live_slots)
    rows = [observations[s] for s in slots]
    pairs = generator(params, rows, encode_event(ev), nmd_des)
    logger.debug("hypernetwork query at t=%d for %s (%d agents)", t, ev.label, len(slots))
    return BehaviorAssignment(pairs=tuple(pairs), slots=slots, generated_at=t, event=ev)
