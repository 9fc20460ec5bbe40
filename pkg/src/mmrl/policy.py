"""Shared-backbone policy with a low-rank adapter on its final linear layer.

z = W_shared phi(o) + alpha * D C phi(o), and actions are tanh(z + noise).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .diversity import DeviationSet, GaussianPolicyOutput, nmd_hat, nmd_hat_deviations
from .errors import ConfigurationError
from .numeric import tape as T
from .numeric.layers import MlpParams, init_mlp, mlp_forward

LOG_STD_INIT = math.log(0.5)
SQUASH_EPS = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PolicyBackbone:
    feature_net: MlpParams
    w_shared: Any
    shared_log_std: Any

    def __post_init__(self) -> None:
        d_a, d = self.w_shared.shape
        if d != self.feature_net.out_width:
            raise ConfigurationError(
                f"shared head expects {d} features, feature net emits {self.feature_net.out_width}"
            )
        if tuple(self.shared_log_std.shape) != (d_a,):
            raise ConfigurationError("shared log-std must have one entry per action dimension")

    @property
    def feature_dim(self) -> int:
        return int(self.w_shared.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.w_shared.shape[0])

    @property
    def obs_dim(self) -> int:
        return self.feature_net.in_width


@dataclass
class LoraPair:
    c: Any
    d_up: Any

    def __post_init__(self) -> None:
        if len(self.c.shape) != 2 or len(self.d_up.shape) != 2:
            raise ConfigurationError("adapter factors must be matrices")
        r, d = self.c.shape
        if self.d_up.shape[1] != r:
            raise ConfigurationError(
                f"adapter factors disagree on rank: {r} vs {self.d_up.shape[1]}"
            )
        if not 1 <= r <= d:
            raise ConfigurationError(f"adapter rank {r} must lie in [1, {d}]")

    @property
    def rank(self) -> int:
        return int(self.c.shape[0])

    def flatten(self) -> np.ndarray:
        return np.concatenate([T.value_of(self.c).ravel(), T.value_of(self.d_up).ravel()])


@dataclass(frozen=True)
class ActionSample:
    pre_tanh: np.ndarray
    action: np.ndarray
    log_prob: Any


def init_backbone(
    rng: np.random.Generator,
    obs_dim: int,
    action_dim: int,
    hidden: Sequence[int] = (128, 128),
) -> PolicyBackbone:
    sizes = [obs_dim, *hidden]
    feature_net = init_mlp(rng, sizes, ["tanh"] * len(hidden))
    bound = 1.0 / math.sqrt(sizes[-1])
    return PolicyBackbone(
        feature_net=feature_net,
        w_shared=rng.uniform(-bound, bound, size=(action_dim, sizes[-1])),
        shared_log_std=np.full(action_dim, LOG_STD_INIT),
    )


def _check_pair(backbone: PolicyBackbone, lora: LoraPair) -> None:
    if lora.c.shape[1] != backbone.feature_dim or lora.d_up.shape[0] != backbone.action_dim:
        raise ConfigurationError(
            f"adapter shapes {tuple(lora.c.shape)}/{tuple(lora.d_up.shape)} do not fit "
            f"features {backbone.feature_dim} and actions {backbone.action_dim}"
        )


def features(backbone: PolicyBackbone, obs: Any) -> Any:
    return mlp_forward(backbone.feature_net, obs)


def shared_term(backbone: PolicyBackbone, phi: Any) -> Any:
    return phi @ T.transpose(backbone.w_shared)


def deviation(backbone: PolicyBackbone, lora: LoraPair, obs: Any) -> Any:
    _check_pair(backbone, lora)
    phi = features(backbone, obs)
    return (phi @ T.transpose(lora.c)) @ T.transpose(lora.d_up)


def preactivation(backbone: PolicyBackbone, lora: LoraPair, alpha: Any, obs: Any) -> Any:
    _check_pair(backbone, lora)
    phi = features(backbone, obs)
    u = (phi @ T.transpose(lora.c)) @ T.transpose(lora.d_up)
    return shared_term(backbone, phi) + alpha * u


def policy_output(
    backbone: PolicyBackbone, lora: LoraPair, alpha: float, obs: Any
) -> GaussianPolicyOutput:
    return GaussianPolicyOutput(
        mean=np.asarray(preactivation(backbone, lora, alpha, obs)),
        log_std=np.asarray(backbone.shared_log_std, dtype=np.float64),
    )


def batch_deviations(phi: Any, c_stack: Any, d_stack: Any) -> Any:
    """Every behaviour at every observation.

    phi (K, d), C (B, r, d), D (B, d_a, r) -> (K, B, d_a).
    """
    projected = T.einsum("brd,kd->kbr", c_stack, phi)
    return T.einsum("bar,kbr->kba", d_stack, projected)


def sample_deviations(phi: Any, c_rows: Any, d_rows: Any) -> Any:
    """One behaviour per sample: phi (S, d), C (S, r, d), D (S, d_a, r) -> (S, d_a)."""
    projected = T.einsum("srd,sd->sr", c_rows, phi)
    return T.einsum("sar,sr->sa", d_rows, projected)


# action head


def gaussian_log_prob(z: Any, mean: Any, log_std: Any) -> Any:
    scaled = (z - mean) * T.exp(-log_std)
    per_dim = -0.5 * scaled * scaled - log_std - 0.5 * _LOG_2PI
    return T.reduce_sum(per_dim, axis=-1)


def squash_correction(z: Any) -> np.ndarray:
    squashed = np.tanh(np.asarray(z))
    return -np.sum(np.log(1.0 - squashed * squashed + SQUASH_EPS), axis=-1)


def squashed_log_prob(z: Any, mean: Any, log_std: Any) -> Any:
    """log density of a = tanh(z) under z ~ N(mean, exp(log_std)^2)."""
    return gaussian_log_prob(z, mean, log_std) + squash_correction(z)


def gaussian_entropy(log_std: Any) -> Any:
    return T.reduce_sum(log_std + 0.5 * (_LOG_2PI + 1.0), axis=-1)


def act(
    mean: Any, log_std: Any, rng: np.random.Generator | int | None, deterministic: bool = False
) -> ActionSample:
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.broadcast_to(np.asarray(log_std, dtype=np.float64), mean.shape)
    if deterministic:
        z = mean.copy()
    else:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        z = mean + np.exp(log_std) * gen.standard_normal(mean.shape)
    log_prob = np.asarray(squashed_log_prob(z, mean, log_std))
    if log_prob.ndim == 0:
        log_prob = float(log_prob)
    return ActionSample(pre_tanh=z, action=np.tanh(z), log_prob=log_prob)


def squash_jacobian(z: Any) -> np.ndarray:
    """d tanh(z) / dz = diag(sech^2 z); every entry lies in (0, 1]."""
    t = np.tanh(np.ravel(z))
    return np.diag(1.0 - t * t)


@dataclass(frozen=True)
class SquashingGap:
    action_space: float
    pre_activation: float


def squashing_gap(mean_a: Any, mean_b: Any) -> SquashingGap:
    """Mean distance between two behaviours before and after tanh, over rows of (K, d_a)."""
    a, b = np.atleast_2d(mean_a), np.atleast_2d(mean_b)
    return SquashingGap(
        action_space=float(np.mean(np.linalg.norm(np.tanh(a) - np.tanh(b), axis=-1))),
        pre_activation=float(np.mean(np.linalg.norm(a - b, axis=-1))),
    )


# team diversity


def team_deviations(
    backbone: PolicyBackbone, loras: Sequence[LoraPair], obs_set: Sequence[Any]
) -> DeviationSet:
    obs = np.asarray(obs_set, dtype=np.float64)
    for lora in loras:
        _check_pair(backbone, lora)
    c_stack = np.stack([T.value_of(p.c) for p in loras])
    d_stack = np.stack([T.value_of(p.d_up) for p in loras])
    return DeviationSet(batch_deviations(features(backbone, obs), c_stack, d_stack))


def unscaled_team_nmd(
    backbone: PolicyBackbone, loras: Sequence[LoraPair], obs_set: Sequence[Any]
) -> float:
    return nmd_hat_deviations(team_deviations(backbone, loras, obs_set))


def realized_team_nmd(
    backbone: PolicyBackbone, loras: Sequence[LoraPair], alpha: float, obs_set: Sequence[Any]
) -> float:
    """NMD of the alpha-scaled behaviours, measured on their pre-activation means."""
    policies = [
        (lambda o, lora=lora: policy_output(backbone, lora, alpha, o)) for lora in loras
    ]
    return nmd_hat(policies, obs_set)
