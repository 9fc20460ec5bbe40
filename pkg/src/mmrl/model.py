from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .config import ModelConfig
from .envs.core import TaskConfig, obs_width
from .hypernet import HypernetParams, init_hypernet
from .numeric import tape as T
from .numeric.layers import MlpParams, init_mlp, mlp_forward
from .policy import PolicyBackbone, init_backbone

ACTION_DIM = 2


@dataclass
class CriticParams:
    """Centralised value net over every slot's observation, the alive mask and the target."""

    net: MlpParams
    max_agents: int
    obs_dim: int

    @property
    def in_width(self) -> int:
        return self.max_agents * self.obs_dim + self.max_agents + 1


@dataclass
class AgentModel:
    backbone: PolicyBackbone
    hypernet: HypernetParams
    critic: CriticParams


def init_critic(
    rng: np.random.Generator, max_agents: int, obs_dim: int, hidden: tuple[int, ...]
) -> CriticParams:
    width = max_agents * obs_dim + max_agents + 1
    sizes = [width, *hidden, 1]
    net = init_mlp(rng, sizes, ["tanh"] * len(hidden) + ["identity"])
    return CriticParams(net=net, max_agents=max_agents, obs_dim=obs_dim)


def init_model(rng: np.random.Generator, task: TaskConfig, model: ModelConfig) -> AgentModel:
    obs_dim = obs_width(task)
    backbone = init_backbone(rng, obs_dim, ACTION_DIM, model.feature_hidden)
    hypernet = init_hypernet(
        rng,
        obs_dim,
        model.lora_rank,
        backbone.feature_dim,
        ACTION_DIM,
        embed=model.embed,
        heads=model.heads,
        depth=model.blocks,
        ff_width=model.ff_width,
    )
    critic = init_critic(rng, task.agents, obs_dim, model.critic_hidden)
    return AgentModel(backbone=backbone, hypernet=hypernet, critic=critic)


def critic_input(obs: np.ndarray, alive: np.ndarray, nmd_des: Any) -> np.ndarray:
    """obs (..., A, obs_dim), alive (..., A), nmd_des (...) -> (..., A*obs_dim + A + 1).

    Dead slots are zeroed so the critic only sees them through the mask.
    """
    obs = np.asarray(obs, dtype=np.float64) * np.asarray(alive, dtype=np.float64)[..., None]
    lead = obs.shape[:-2]
    return np.concatenate(
        [
            obs.reshape(*lead, -1),
            np.asarray(alive, dtype=np.float64),
            np.asarray(nmd_des, dtype=np.float64).reshape(*lead, 1),
        ],
        axis=-1,
    )


def critic_value(critic: CriticParams, x: Any) -> Any:
    out = mlp_forward(critic.net, x)
    return T.reshape(out, tuple(out.shape[:-1]))
