"""Wasserstein behaviour distances, the NMD estimator and diversity control.

Behaviours are diagonal Gaussians sharing one covariance, so the 2-Wasserstein
distance between two of them is the Euclidean distance between their means.
Everything here works in pre-activation (pre-tanh) space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import AssumptionViolation, DegenerateConfiguration, UsageError
from .numeric import tape as T

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-6
ALPHA_CAP = 1e3
COINCIDENCE_TOL = 1e-12


def _vec(x: Any, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise UsageError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


def w2_shared_cov(mean_a: Any, mean_b: Any) -> float:
    a, b = _vec(mean_a, "mean_a"), _vec(mean_b, "mean_b")
    if a.shape != b.shape:
        raise UsageError(f"mean lengths differ: {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b))


def w2_bures_diag(mean_a: Any, std_a: Any, mean_b: Any, std_b: Any) -> float:
    """Closed-form W2 between diagonal Gaussians: sqrt(|mu_a - mu_b|^2 + sum (s_a - s_b)^2)."""
    ma, sa = _vec(mean_a, "mean_a"), _vec(std_a, "std_a")
    mb, sb = _vec(mean_b, "mean_b"), _vec(std_b, "std_b")
    if not (ma.shape == sa.shape == mb.shape == sb.shape):
        raise UsageError("means and stds must share one length")
    if np.any(sa <= 0) or np.any(sb <= 0):
        raise UsageError("standard deviations must be positive")
    return float(np.sqrt(np.sum((ma - mb) ** 2) + np.sum((sa - sb) ** 2)))


def empirical_w2_1d(xs: Any, ys: Any) -> float:
    """Quantile-coupled W2 between two equally sized 1-D samples."""
    xs, ys = np.sort(np.ravel(xs)), np.sort(np.ravel(ys))
    if xs.size != ys.size or xs.size == 0:
        raise UsageError("samples must be non-empty and equally sized")
    return float(np.sqrt(np.mean((xs - ys) ** 2)))


@dataclass(frozen=True)
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != self.log_std.shape:
            raise UsageError("mean and log_std lengths differ")
        if not np.all(np.isfinite(self.log_std)):
            raise UsageError("log_std must be finite")


Policy = Callable[[np.ndarray], GaussianPolicyOutput]


def _shared_means(policies: Sequence[Policy], obs_set: Sequence[Any]) -> np.ndarray:
    """(K, B, d_a) means; raises if the behaviours disagree on log_std anywhere."""
    if len(obs_set) == 0:
        raise UsageError("observation set is empty")
    rows = []
    for obs in obs_set:
        outs = [p(np.asarray(obs, dtype=np.float64)) for p in policies]
        ref = outs[0].log_std
        for out in outs[1:]:
            if not np.array_equal(out.log_std, ref):
                raise AssumptionViolation("behaviours do not share their covariance")
        rows.append(np.stack([out.mean for out in outs]))
    return np.stack(rows)


def behavior_distance(policy_m: Policy, policy_n: Policy, obs_set: Sequence[Any]) -> float:
    means = _shared_means([policy_m, policy_n], obs_set)
    return float(np.mean(np.linalg.norm(means[:, 0] - means[:, 1], axis=-1)))


def nmd_hat(policies: Sequence[Policy], obs_set: Sequence[Any]) -> float:
    if len(policies) < 2:
        raise UsageError("NMD needs at least two behaviours")
    return float(pairwise_nmd(_shared_means(policies, obs_set)))


@dataclass(frozen=True)
class DeviationSet:
    """Deviations u[k, m] of B behaviours at K common observations."""

    deviations: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.deviations, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise UsageError(f"deviations must be (B, d_a) or (K, B, d_a), got {arr.shape}")
        if arr.shape[1] < 2:
            raise UsageError("a deviation set needs at least two behaviours")
        object.__setattr__(self, "deviations", arr)

    @property
    def obs_count(self) -> int:
        return int(self.deviations.shape[0])

    @property
    def behavior_count(self) -> int:
        return int(self.deviations.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.deviations.shape[2])

    def joint(self, m: int) -> np.ndarray:
        """Behaviour m's deviations over all observations, as one K*d_a vector."""
        return self.deviations[:, m].reshape(-1)

    def scaled(self, t: float, m: int | None = None) -> "DeviationSet":
        arr = self.deviations.copy()
        if m is None:
            arr *= t
        else:
            arr[:, m] *= t
        return DeviationSet(arr)


def pairwise_nmd(u: Any, obs_count: int | None = None, stabilizer: float = 0.0) -> Any:
    """2 / (B (B-1) K) * sum over observations and pairs m < n of |u_m - u_n|.

    `u` is (K, B, d_a), plain or traced. A positive `stabilizer` inside the
    square root keeps the gradient finite at coincident behaviours.
    """
    K, B = u.shape[0], u.shape[1]
    if B < 2:
        raise UsageError("NMD needs at least two behaviours")
    count = K if obs_count is None else obs_count
    left, right = np.triu_indices(B, k=1)
    diff = u[:, left] - u[:, right]
    sq = T.reduce_sum(diff * diff, axis=-1)
    if stabilizer:
        sq = sq + stabilizer
    return T.reduce_sum(T.sqrt(sq)) * (2.0 / (B * (B - 1) * count))


def nmd_hat_deviations(devs: DeviationSet, obs_count: int | None = None) -> float:
    return float(pairwise_nmd(devs.deviations, obs_count))


def nmd_coefficient(devs: DeviationSet, obs_count: int | None = None) -> float:
    count = devs.obs_count if obs_count is None else obs_count
    B = devs.behavior_count
    return 2.0 / (B * (B - 1) * count)


def nmd_grad(devs: DeviationSet, obs_count: int | None, m: int) -> np.ndarray:
    """Analytic gradient of the estimator with respect to u_m, shape (K, d_a)."""
    u = devs.deviations
    if not 0 <= m < devs.behavior_count:
        raise UsageError(f"behaviour index {m} out of range")
    diff = u[:, m : m + 1] - np.delete(u, m, axis=1)
    norms = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(norms < COINCIDENCE_TOL):
        raise DegenerateConfiguration(
            f"behaviour {m} coincides with another behaviour; perturb the deviations"
        )
    return nmd_coefficient(devs, obs_count) * np.sum(diff / norms, axis=1)


def compute_alpha(
    nmd_des: float, nmd_measured: float, floor: float = ALPHA_FLOOR, cap: float = ALPHA_CAP
) -> float:
    if nmd_des < 0 or nmd_measured < 0:
        raise UsageError("diversity values must be non-negative")
    if floor <= 0 or cap <= 0:
        raise UsageError("alpha floor and cap must be positive")
    alpha = nmd_des / max(nmd_measured, floor)
    if alpha > cap:
        logger.debug("alpha %.3g clamped to %.3g (measured NMD %.3g)", alpha, cap, nmd_measured)
    return float(min(alpha, cap))


def alpha_expression(
    nmd_des: Any, nmd_measured: Any, floor: float = ALPHA_FLOOR, cap: float = ALPHA_CAP
) -> Any:
    """compute_alpha written with tape ops so alpha's dependence on the deviations is traced."""
    return T.minimum(T.div(nmd_des, T.maximum(nmd_measured, floor)), cap)


@dataclass(frozen=True)
class DiversityState:
    nmd_des: float
    nmd_measured: float
    alpha: float
    epsilon_floor: float = ALPHA_FLOOR
    alpha_cap: float = ALPHA_CAP

    @classmethod
    def measure(
        cls,
        nmd_des: float,
        devs: DeviationSet,
        floor: float = ALPHA_FLOOR,
        cap: float = ALPHA_CAP,
    ) -> "DiversityState":
        measured = nmd_hat_deviations(devs)
        return cls(nmd_des, measured, compute_alpha(nmd_des, measured, floor, cap), floor, cap)

    @property
    def above_floor(self) -> bool:
        return self.nmd_measured > self.epsilon_floor


# projection diagnostics


def projection_matrix(u_m: Any, grad: Any, nmd_value: float) -> np.ndarray:
    """P = I - u grad^T / N."""
    u, g = np.ravel(u_m).astype(np.float64), np.ravel(grad).astype(np.float64)
    if u.shape != g.shape:
        raise UsageError("deviation and gradient lengths differ")
    if nmd_value <= 0:
        raise UsageError("projection needs a positive NMD value")
    return np.eye(u.size) - np.outer(u, g) / nmd_value


@dataclass(frozen=True)
class ProjectionDefect:
    k: float
    idempotency_gap: float
    identity_residual: float


def projection_defect(u_m: Any, grad: Any, nmd_value: float) -> ProjectionDefect:
    """P^2 - P equals (k - 1) u grad^T / N exactly, with k = u.grad / N.

    P is idempotent only when k = 1.
    """
    u, g = np.ravel(u_m), np.ravel(grad)
    P = projection_matrix(u, g, nmd_value)
    k = float(u @ g / nmd_value)
    gap = P @ P - P
    predicted = (k - 1.0) * np.outer(u, g) / nmd_value
    return ProjectionDefect(
        k=k,
        idempotency_gap=float(np.linalg.norm(gap)),
        identity_residual=float(np.linalg.norm(gap - predicted)),
    )


@dataclass(frozen=True)
class ProjectionLimitRow:
    scale: float
    k: float
    distance_to_identity: float
    distance_to_orthogonal: float


def projection_limits_report(
    devs: DeviationSet, m: int, scales: Sequence[float]
) -> list[ProjectionLimitRow]:
    """Scale behaviour m by each t with the others fixed and compare P(t) with
    I (vanishing deviation) and I - u_hat u_hat^T (dominant deviation)."""
    base = devs.joint(m)
    norm = np.linalg.norm(base)
    if norm == 0:
        raise UsageError("behaviour m has zero deviation")
    unit = base / norm
    orthogonal = np.eye(base.size) - np.outer(unit, unit)
    rows = []
    for t in scales:
        scaled = devs.scaled(t, m)
        value = nmd_hat_deviations(scaled)
        grad = nmd_grad(scaled, None, m).reshape(-1)
        u = scaled.joint(m)
        P = projection_matrix(u, grad, value)
        rows.append(
            ProjectionLimitRow(
                scale=float(t),
                k=float(u @ grad / value),
                distance_to_identity=float(np.linalg.norm(P - np.eye(u.size))),
                distance_to_orthogonal=float(np.linalg.norm(P - orthogonal)),
            )
        )
    return rows


def euler_residuals(devs: DeviationSet, limit: int | None = None) -> np.ndarray:
    """(u_m . grad_m N - N) / N for the first `limit` behaviours (all by default).

    N is degree-1 homogeneous in all deviations jointly, not in u_m alone, so
    these are generally nonzero. Joint homogeneity makes them sum to 1 - B.
    """
    value = nmd_hat_deviations(devs)
    if value <= 0:
        raise UsageError("Euler audit needs distinct behaviours")
    count = devs.behavior_count if limit is None else min(limit, devs.behavior_count)
    out = np.empty(count)
    for m in range(count):
        grad = nmd_grad(devs, None, m).reshape(-1)
        out[m] = (devs.joint(m) @ grad - value) / value
    return out
