from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global norm is at most `max_norm`; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    *,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-5,
) -> tuple[dict[str, np.ndarray], AdamState]:
    step = state.step + 1
    first, second, updated = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.first.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.second.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        updated[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        first[name], second[name] = m, v
    return updated, AdamState(step=step, first=first, second=second)
