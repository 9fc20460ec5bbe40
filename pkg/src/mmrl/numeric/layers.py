from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..errors import ConfigurationError
from . import tape as T

ACTIVATIONS = {
    "tanh": T.tanh,
    "relu": T.relu,
    "identity": lambda x: x,
}


def _as_input(x: Any) -> Any:
    return x if isinstance(x, T.Var) else np.asarray(x, dtype=np.float64)


@dataclass
class MlpParams:
    """Dense layers applied as act(h @ W.T + b); W is (out, in)."""

    weights: list[Any]
    biases: list[Any]
    activations: list[str]

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ConfigurationError("MLP needs one weight, bias and activation per layer")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"layer {i}: unknown activation '{act}'")
            if len(w.shape) != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {i}: input width {w.shape[1]} does not chain "
                    f"onto previous width {self.weights[i - 1].shape[0]}"
                )

    @property
    def in_width(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def out_width(self) -> int:
        return int(self.weights[-1].shape[0])


def init_mlp(
    rng: np.random.Generator,
    sizes: list[int],
    activations: list[str],
    *,
    scale: float | None = None,
) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; `scale` overrides the bound."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = scale if scale is not None else 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases, activations=list(activations))


def mlp_forward(params: MlpParams, x: Any) -> Any:
    x = _as_input(x)
    if x.shape[-1] != params.in_width:
        raise ConfigurationError(
            f"MLP expects input width {params.in_width}, got {x.shape[-1]}"
        )
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = ACTIVATIONS[act](h @ T.transpose(w) + b)
    return h


@dataclass
class AttentionBlockParams:
    """Pre-norm transformer block. Projections are stored per head: (heads, embed, head_dim)."""

    wq: Any
    wk: Any
    wv: Any
    wo: Any
    ff_w1: Any
    ff_b1: Any
    ff_w2: Any
    ff_b2: Any
    ln1_gain: Any
    ln1_offset: Any
    ln2_gain: Any
    ln2_offset: Any

    def __post_init__(self) -> None:
        heads, embed, head_dim = self.wq.shape
        if heads * head_dim != embed:
            raise ConfigurationError(f"embedding width {embed} is not divisible into {heads} heads")
        if self.wk.shape != self.wq.shape or self.wv.shape != self.wq.shape:
            raise ConfigurationError("query/key/value projections must share a shape")
        if self.wo.shape != (embed, embed):
            raise ConfigurationError(f"output projection must be ({embed}, {embed})")
        if self.ff_w1.shape[0] != embed or self.ff_w2.shape != (self.ff_w1.shape[1], embed):
            raise ConfigurationError("feed-forward sublayer does not match the embedding width")

    @property
    def heads(self) -> int:
        return int(self.wq.shape[0])

    @property
    def embed(self) -> int:
        return int(self.wq.shape[1])


def init_attention_block(
    rng: np.random.Generator, embed: int, heads: int, ff_width: int
) -> AttentionBlockParams:
    if embed % heads:
        raise ConfigurationError(f"embedding width {embed} is not divisible by {heads} heads")
    head_dim = embed // heads
    bound = 1.0 / math.sqrt(embed)

    def proj() -> np.ndarray:
        return rng.uniform(-bound, bound, size=(heads, embed, head_dim))

    return AttentionBlockParams(
        wq=proj(),
        wk=proj(),
        wv=proj(),
        wo=rng.uniform(-bound, bound, size=(embed, embed)),
        ff_w1=rng.uniform(-bound, bound, size=(embed, ff_width)),
        ff_b1=np.zeros(ff_width),
        ff_w2=rng.uniform(
            -1.0 / math.sqrt(ff_width), 1.0 / math.sqrt(ff_width), size=(ff_width, embed)
        ),
        ff_b2=np.zeros(embed),
        ln1_gain=np.ones(embed),
        ln1_offset=np.zeros(embed),
        ln2_gain=np.ones(embed),
        ln2_offset=np.zeros(embed),
    )


def attention_forward(params: AttentionBlockParams, x: Any) -> Any:
    """x: (tokens, embed) or (batch, tokens, embed). No positional terms, so the
    block is equivariant to token permutations."""
    x = _as_input(x)
    single = len(x.shape) == 2
    if single:
        x = T.reshape(x, (1,) + tuple(x.shape))
    batch, tokens, embed = x.shape
    if embed != params.embed:
        raise ConfigurationError(f"attention block expects width {params.embed}, got {embed}")
    head_dim = embed // params.heads

    h = T.layer_norm(x, params.ln1_gain, params.ln1_offset)
    q = T.einsum("bte,hed->bhtd", h, params.wq)
    k = T.einsum("bte,hed->bhtd", h, params.wk)
    v = T.einsum("bte,hed->bhtd", h, params.wv)
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) / math.sqrt(head_dim)
    context = T.softmax(scores, axis=-1) @ v
    merged = T.reshape(T.transpose(context, (0, 2, 1, 3)), (batch, tokens, embed))
    x = x + merged @ params.wo

    h = T.layer_norm(x, params.ln2_gain, params.ln2_offset)
    x = x + T.relu(h @ params.ff_w1 + params.ff_b1) @ params.ff_w2 + params.ff_b2
    if single:
        x = T.reshape(x, (tokens, embed))
    return x
