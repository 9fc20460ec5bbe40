"""Self-contained numerical checks, runnable without pytest via `mmrl verify`.

Each suite draws from a fixed seed and returns one CheckResult per property.
Audit rows report a measurement without asserting anything.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import diversity
from .config import ModelConfig, TrainConfig, build_run_config
from .diversity import (
    DeviationSet,
    GaussianPolicyOutput,
    alpha_expression,
    behavior_distance,
    compute_alpha,
    empirical_w2_1d,
    euler_residuals,
    nmd_hat,
    nmd_hat_deviations,
    pairwise_nmd,
    projection_defect,
    projection_limits_report,
    w2_bures_diag,
    w2_shared_cov,
)
from .envs import TaskConfig, apply_perturbation, parse_perturbations, reset, step, step_batch
from .envs.core import AGENT_RADIUS, detect_events
from .envs.scripted import PressurePlateScript
from .envs.wind_flocking import shield_mask
from .events import EVENT_WIDTH, EventKind, EventRecord, Signal, encode_event
from .hypernet import generate, init_hypernet, maybe_requery
from .model import AgentModel, init_model
from .numeric import tape as T
from .numeric.layers import init_mlp, mlp_forward
from .numeric.oracle import finite_diff_grad, relative_error
from .numeric.tree import tree_flatten, watch_tree
from .policy import (
    LoraPair,
    PolicyBackbone,
    batch_deviations,
    features,
    init_backbone,
    preactivation,
    realized_team_nmd,
    squashing_gap,
    unscaled_team_nmd,
)
from .rollout import AlphaSettings, RolloutBatch, collect
from .trainer import compute_gae, ppo_loss

logger = logging.getLogger(__name__)

SUITES: dict[str, Callable[[int], list["CheckResult"]]] = {}


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    asserted: bool = True


def _suite(name: str):
    def register(fn: Callable[[np.random.Generator], Iterable[CheckResult]]):
        SUITES[name] = lambda seed: list(fn(np.random.default_rng(seed)))
        return fn

    return register


def _check(suite: str, name: str, value: float, bound: float, label: str = "max") -> CheckResult:
    detail = f"{label} {value:.3e} (bound {bound:.0e})"
    return CheckResult(suite, name, bool(value <= bound), detail)


def _norm_rel(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


def _random_devs(rng: np.random.Generator, behaviours: int, obs: int, d_a: int = 2) -> DeviationSet:
    return DeviationSet(rng.normal(size=(obs, behaviours, d_a)))


def _linear_policy(w: np.ndarray, b: np.ndarray, log_std: np.ndarray):
    return lambda o: GaussianPolicyOutput(mean=w @ o + b, log_std=log_std)


# metric


@_suite("metric")
def metric_suite(rng: np.random.Generator) -> Iterable[CheckResult]:
    worst = 0.0
    for _ in range(20):
        while True:
            ma, mb = rng.uniform(-2, 2, size=2)
            sa, sb = rng.uniform(0.5, 2.0, size=2)
            if abs(ma - mb) + abs(sa - sb) > 0.2:
                break
        z = rng.standard_normal(100_000)
        exact = w2_bures_diag([ma], [sa], [mb], [sb])
        worst = max(worst, abs(exact - empirical_w2_1d(ma + sa * z, mb + sb * z)) / exact)
    yield _check("metric", "bures W2 vs quantile oracle", worst, 1e-2, "rel")

    worst = 0.0
    for _ in range(20):
        a, b, s = rng.normal(size=3), rng.normal(size=3), rng.uniform(0.1, 2.0, size=3)
        worst = max(worst, abs(w2_bures_diag(a, s, b, s) - w2_shared_cov(a, b)))
    yield _check("metric", "shared-std reduction", worst, 1e-12, "abs")

    obs_dim, d_a = 3, 2
    log_std = np.full(d_a, -0.5)
    symmetric, nonneg, self_zero, slack = True, True, True, np.inf
    for _ in range(1000):
        obs_set = rng.normal(size=(5, obs_dim))
        a, b, c = (
            _linear_policy(rng.normal(size=(d_a, obs_dim)), rng.normal(size=d_a), log_std)
            for _ in range(3)
        )
        ab, ba = behavior_distance(a, b, obs_set), behavior_distance(b, a, obs_set)
        bc, ac = behavior_distance(b, c, obs_set), behavior_distance(a, c, obs_set)
        symmetric &= ab == ba
        nonneg &= min(ab, bc, ac) >= 0.0
        self_zero &= behavior_distance(a, a, obs_set) == 0.0
        slack = min(slack, ab + bc - ac)
    yield CheckResult("metric", "pseudometric symmetry", bool(symmetric), "1000 triples, exact")
    yield CheckResult(
        "metric", "pseudometric nonnegativity and d(p, p) = 0", bool(nonneg and self_zero), "exact"
    )
    yield CheckResult(
        "metric", "triangle inequality", bool(slack >= -1e-9), f"min slack {slack:.3e}"
    )

    origin = np.zeros(2)
    e1 = np.array([1.0, 0.0])

    def constant(mean: np.ndarray):
        return lambda o: GaussianPolicyOutput(mean=mean.copy(), log_std=np.zeros(2))

    obs_set = rng.normal(size=(4, 3))
    cases = [
        (nmd_hat([constant(e1)] * 3, obs_set), 0.0),
        (nmd_hat([constant(origin), constant(np.array([0.6, 0.8]))], obs_set), 1.0),
        (nmd_hat([constant(origin), constant(e1), constant(2 * e1)], obs_set), 4.0 / 3.0),
    ]
    worst = max(abs(got - want) for got, want in cases)
    yield _check("metric", "estimator worked examples", worst, 1e-12, "abs")

    worst = 0.0
    for _ in range(20):
        devs = _random_devs(rng, int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        base = nmd_hat_deviations(devs)
        for t in (0.5, 2.0, 10.0):
            worst = max(worst, abs(nmd_hat_deviations(devs.scaled(t)) - t * base) / base)
    yield _check("metric", "degree-1 homogeneity", worst, 1e-12, "rel")

    devs = _random_devs(rng, 3, 2)
    same = DeviationSet(np.repeat(devs.deviations[:, :1], 3, axis=1))
    separated = nmd_hat_deviations(same) == 0.0 and nmd_hat_deviations(devs) > 0.0
    yield CheckResult("metric", "zero iff behaviours coincide", bool(separated), "exact")


# control


@_suite("control")
def control_suite(rng: np.random.Generator) -> Iterable[CheckResult]:
    worst, tried = 0.0, 0
    obs_dim, d_a = 4, 2
    for _ in range(200):
        hidden = int(rng.integers(4, 12))
        backbone = init_backbone(rng, obs_dim, d_a, (hidden,))
        rank = int(rng.integers(1, hidden + 1))
        loras = [
            LoraPair(c=rng.normal(size=(rank, hidden)), d_up=rng.normal(size=(d_a, rank)))
            for _ in range(int(rng.integers(2, 6)))
        ]
        obs_set = rng.normal(size=(6, obs_dim))
        target = float(rng.uniform(0.05, 2.0))
        measured = unscaled_team_nmd(backbone, loras, obs_set)
        if measured <= diversity.ALPHA_FLOOR:
            continue
        alpha = compute_alpha(target, measured)
        realized = realized_team_nmd(backbone, loras, alpha, obs_set)
        worst = max(worst, abs(realized - target) / target)
        tried += 1
    yield _check("control", f"realised NMD equals target ({tried} configs)", worst, 1e-10, "rel")

    cases = [
        (compute_alpha(0.5, 2.0), 0.25),
        (compute_alpha(0.7, 0.7), 1.0),
        (compute_alpha(0.5, 0.0, 1e-6, 1e3), 1e3),
    ]
    worst = max(abs(got - want) for got, want in cases)
    yield _check("control", "alpha worked examples", worst, 1e-12, "abs")

    worst = -np.inf
    for _ in range(100):
        gap = squashing_gap(rng.normal(size=(5, 2)) * 2, rng.normal(size=(5, 2)) * 2)
        worst = max(worst, gap.action_space - gap.pre_activation)
    yield CheckResult(
        "control",
        "tanh never widens behaviour distance",
        bool(worst <= 0.0),
        f"max excess {worst:.3e}",
    )


# projection


@_suite("projection")
def projection_suite(rng: np.random.Generator) -> Iterable[CheckResult]:
    worst, ks = 0.0, []
    for _ in range(100):
        devs = _random_devs(rng, int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        m = int(rng.integers(devs.behavior_count))
        grad = diversity.nmd_grad(devs, None, m).reshape(-1)
        defect = projection_defect(devs.joint(m), grad, nmd_hat_deviations(devs))
        worst = max(worst, defect.identity_residual)
        ks.append(defect.k)
    yield _check("projection", "rank-one defect identity", worst, 1e-10, "residual")
    yield CheckResult(
        "projection",
        "k statistics",
        True,
        f"k min {min(ks):.4f} median {float(np.median(ks)):.4f} max {max(ks):.4f}",
        asserted=False,
    )

    worst = 0.0
    for _ in range(20):
        arr = np.zeros((int(rng.integers(1, 4)), 2, 2))
        arr[:, 0] = rng.normal(size=(arr.shape[0], 2))
        devs = DeviationSet(arr)
        grad = diversity.nmd_grad(devs, None, 0).reshape(-1)
        defect = projection_defect(devs.joint(0), grad, nmd_hat_deviations(devs))
        worst = max(worst, defect.idempotency_gap)
    yield _check("projection", "idempotent when k = 1", worst, 1e-6, "|P^2 - P|")

    devs = _random_devs(rng, 3, 1)
    small, unit, large = projection_limits_report(devs, 0, [1e-6, 1.0, 1e6])
    yield _check(
        "projection", "vanishing-deviation limit", small.distance_to_identity, 1e-4, "|P - I|"
    )
    yield _check(
        "projection",
        "dominant-deviation limit",
        large.distance_to_orthogonal,
        1e-3,
        "|P - (I - uu^T)|",
    )
    yield CheckResult(
        "projection",
        "unit scale",
        True,
        f"k {unit.k:.4f}, |P - I| {unit.distance_to_identity:.4f}, "
        f"|P - (I - uu^T)| {unit.distance_to_orthogonal:.4f}",
        asserted=False,
    )

    worst = 0.0
    for behaviours in range(2, 7):
        residuals = []
        for _ in range(20):
            r = euler_residuals(_random_devs(rng, behaviours, int(rng.integers(1, 4))))
            residuals.append(r)
            worst = max(worst, abs(float(r.sum()) - (1 - behaviours)))
        flat = np.concatenate(residuals)
        logger.info("Euler residuals B=%d: mean %.4f std %.4f", behaviours, flat.mean(), flat.std())
        yield CheckResult(
            "projection",
            f"Euler residual audit B={behaviours}",
            True,
            f"mean {flat.mean():+.4f} std {flat.std():.4f}",
            asserted=False,
        )
    yield _check("projection", "Euler residuals sum to 1 - B", worst, 1e-9, "abs")


# gradient


def _preset_task(name: str, **overrides) -> TaskConfig:
    return dataclasses.replace(build_run_config({"task": {"task": name}}).task, **overrides)


def _tiny_batch(seed: int) -> tuple[AgentModel, RolloutBatch, TrainConfig]:
    task = _preset_task("dispersion", horizon=4)
    model_cfg = ModelConfig(
        feature_hidden=(8,),
        lora_rank=2,
        embed=8,
        heads=2,
        blocks=1,
        ff_width=16,
        critic_hidden=(8,),
    )
    # no clamp, so alpha stays differentiable in the measured diversity
    cfg = TrainConfig(envs=2, alpha_cap=1e9)
    model = init_model(np.random.default_rng(seed), task, model_cfg)
    batch = collect(
        model,
        task,
        seeds=[seed, seed + 1],
        targets=[0.5, 1.0],
        alpha=AlphaSettings(cfg.alpha_probe_obs, cfg.alpha_floor, cfg.alpha_cap),
    )
    return model, batch, cfg


def end_to_end_gradient_error(seed: int = 0, coords: int = 20) -> float:
    """Tape gradients of the full PPO loss against central differences on random
    hypernetwork parameters, over a frozen two-environment, four-step batch."""
    rng = np.random.default_rng(seed)
    model, batch, cfg = _tiny_batch(seed)
    adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.gae_lambda)
    steps = np.flatnonzero(batch.active.any(axis=1))

    tape = T.Tape()
    watched = watch_tree(tape, model)
    loss, _ = ppo_loss(watched, batch, steps, adv, ret, cfg)
    by_var = T.grad_backward(tape, loss)
    grads = {name: by_var[var] for name, var in tree_flatten(watched).items()}

    arrays = {k: v for k, v in tree_flatten(model).items() if k.startswith("hypernet.")}
    pool = [(name, i) for name, arr in arrays.items() for i in range(arr.size)]
    picks = rng.choice(len(pool), size=min(coords, len(pool)), replace=False)
    analytic, numeric = [], []
    for p in picks:
        name, i = pool[p]
        flat = arrays[name].reshape(-1)
        original = flat[i]

        def loss_at(x: np.ndarray) -> float:
            flat[i] = x[0]
            return float(ppo_loss(model, batch, steps, adv, ret, cfg)[0])

        numeric.append(finite_diff_grad(loss_at, np.array([original]))[0])
        flat[i] = original
        analytic.append(grads[name].reshape(-1)[i])
    return _norm_rel(np.array(analytic), np.array(numeric))


def _alpha_loss(
    backbone: PolicyBackbone, pairs: list[LoraPair], obs_set: np.ndarray, target: float
):
    """sum of tanh(z) over behaviours and observations, alpha set from the same deviations."""
    phi = features(backbone, obs_set)
    devs = batch_deviations(
        phi, T.stack([p.c for p in pairs]), T.stack([p.d_up for p in pairs])
    )
    alpha = alpha_expression(target, pairwise_nmd(devs))
    total = 0.0
    for pair in pairs:
        total = total + T.reduce_sum(T.tanh(preactivation(backbone, pair, alpha, obs_set)))
    return total


@_suite("gradient")
def gradient_suite(rng: np.random.Generator) -> Iterable[CheckResult]:
    worst = 0.0
    for _ in range(50):
        devs = _random_devs(rng, int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        m = int(rng.integers(devs.behavior_count))
        analytic = diversity.nmd_grad(devs, None, m)

        def value(x: np.ndarray) -> float:
            arr = devs.deviations.copy()
            arr[:, m] = x.reshape(arr[:, m].shape)
            return nmd_hat_deviations(DeviationSet(arr))

        flat = devs.deviations[:, m].reshape(-1)
        numeric = finite_diff_grad(value, flat).reshape(analytic.shape)
        worst = max(worst, relative_error(analytic, numeric, floor=1e-6))
    yield _check("gradient", "NMD gradient vs finite differences", worst, 1e-4, "rel")

    net = init_mlp(rng, [3, 5, 4, 2], ["tanh", "tanh", "identity"])
    x = rng.normal(size=(4, 3))

    def with_first(w):
        return dataclasses.replace(net, weights=[w, *net.weights[1:]])

    tape = T.Tape()
    w0 = tape.watch(net.weights[0])
    analytic = T.grad_backward(tape, T.reduce_sum(mlp_forward(with_first(w0), x)), [w0])[w0]
    numeric = finite_diff_grad(
        lambda w: float(np.sum(mlp_forward(with_first(w), x))), net.weights[0]
    )
    yield _check("gradient", "tape vs finite differences (MLP)", _norm_rel(analytic, numeric), 1e-4)

    backbone = init_backbone(rng, 3, 2, (6,))
    pairs = [LoraPair(c=rng.normal(size=(2, 6)), d_up=rng.normal(size=(2, 2))) for _ in range(3)]
    obs_set = rng.normal(size=(4, 3))

    def swapped(c0):
        return [LoraPair(c0, pairs[0].d_up), *pairs[1:]]

    tape = T.Tape()
    c0 = tape.watch(pairs[0].c)
    analytic = T.grad_backward(tape, _alpha_loss(backbone, swapped(c0), obs_set, 0.7), [c0])[c0]
    numeric = finite_diff_grad(
        lambda c: float(_alpha_loss(backbone, swapped(c), obs_set, 0.7)), pairs[0].c
    )
    yield _check("gradient", "adapter gradient through alpha", _norm_rel(analytic, numeric), 1e-4)

    error = end_to_end_gradient_error(int(rng.integers(1 << 16)))
    yield _check("gradient", "end-to-end PPO loss (20 hypernetwork params)", error, 1e-3)


# environments


def _scripted_episode(
    task: TaskConfig, seed: int, plan=None
) -> tuple[bool, list[str], list[EventRecord]]:
    state, _ = reset(task, seed)
    script = PressurePlateScript()
    problems: list[str] = []
    events: list[EventRecord] = []
    for t in range(task.horizon):
        if plan:
            state, ev = apply_perturbation(state, plan, t)
            if not ev.is_null:
                events.append(ev)
        result = step(task, state, script(state))
        state = result.state
        events.append(result.event)
        if state.door_open != bool(state.plates.any()):
            problems.append(f"t={state.t}: door state disagrees with plates")
        in_wall = (np.abs(state.positions[:, 1]) < AGENT_RADIUS - 1e-12) & (
            np.abs(state.positions[:, 0]) > task.door_half_width
        )
        if in_wall.any():
            problems.append(f"t={state.t}: agent inside the wall")
        if result.done:
            break
    return bool(state.completed), problems, events


@_suite("env")
def env_suite(rng: np.random.Generator) -> Iterable[CheckResult]:
    task = _preset_task("pressure_plate")
    wins, problems = 0, []
    for seed in range(20):
        done, issues, _ = _scripted_episode(task, seed)
        wins += done
        problems.extend(issues)
    yield CheckResult("env", "scripted pressure plate completes", wins == 20, f"{wins}/20 episodes")
    yield CheckResult(
        "env",
        "door follows plates; no agent inside the wall",
        not problems,
        problems[0] if problems else "20 episodes clean",
    )

    state, _ = reset(task, 0)
    flipped = dataclasses.replace(
        state, plates=np.array([True, False]), door_open=True, t=1
    )
    ev = detect_events(state, flipped)
    yield CheckResult(
        "env",
        "one event per step, door beats plate",
        ev.kind == EventKind.ENV_SIGNAL and ev.signal == Signal.DOOR_OPEN,
        ev.label,
    )

    wind_task = TaskConfig(task="wind_flocking", agents=2, capabilities=(1.0, 0.6), horizon=200)
    ws, _ = reset(wind_task, 0)
    big = np.array([0.0, 0.0])
    inside = dataclasses.replace(ws, positions=np.stack([big, big + [0.0, -0.1]]))
    outside = dataclasses.replace(ws, positions=np.stack([big, big + [0.15, -0.05]]))
    upwind = dataclasses.replace(ws, positions=np.stack([big, big + [0.0, 0.1]]))
    masks = [shield_mask(wind_task, s)[1] for s in (inside, outside, upwind)]
    yield CheckResult(
        "env",
        "wind shielding cone",
        masks == [True, False, False],
        f"inside/outside/upwind {masks}",
    )

    disp = TaskConfig(task="dispersion", agents=2, goals=2, horizon=200)
    states = [reset(disp, s)[0] for s in range(4)]
    actions = [rng.uniform(-1, 1, size=(2, 2)) for _ in states]
    alone = [step(disp, s, a) for s, a in zip(states, actions)]
    pooled = step_batch(disp, states, actions, workers=3)
    same = all(
        np.array_equal(x.state.positions, y.state.positions) and x.reward == y.reward
        for x, y in zip(alone, pooled)
    )
    yield CheckResult("env", "batch independence", same, "4 environments, 3 workers")

    plan = parse_perturbations("remove:first_on_plate2").validate(task.horizon, task.agents)
    counts = []
    for seed in range(5):
        _, _, events = _scripted_episode(task, seed, plan)
        counts.append(sum(ev.kind == EventKind.AGENT_REMOVED for ev in events))
    yield CheckResult("env", "removal latch fires once", counts == [1] * 5, f"removals {counts}")


# hypernetwork


@_suite("hypernet")
def hypernet_suite(rng: np.random.Generator) -> Iterable[CheckResult]:
    params = init_hypernet(rng, 9, 3, 16, 2, embed=16, heads=2, depth=2, ff_width=32)
    worst = 0.0
    for n in (2, 3, 5, 8):
        obs = rng.normal(size=(n, 9))
        ev = encode_event(EventRecord.agent_removed(1))
        perm = rng.permutation(n)
        base = generate(params, obs, ev, 0.5)
        permuted = generate(params, obs[perm], ev, 0.5)
        for i, j in enumerate(perm):
            worst = max(
                worst,
                float(np.max(np.abs(permuted[i].flatten() - base[j].flatten()))),
            )
    yield _check("hypernet", "permutation equivariance", worst, 1e-10, "abs")

    null_zero = not encode_event(EventRecord.null()).any()
    removed = encode_event(EventRecord.agent_removed(2))
    yield CheckResult(
        "hypernet",
        "event encoding",
        bool(null_zero and removed[EventKind.AGENT_REMOVED] == 1.0 and 0.25 in removed),
        f"AgentRemoved(2) payload {removed[removed != 0].tolist()}",
    )

    mismatches = 0
    for _ in range(100):
        calls = []

        def counting(p, rows, event_vec, nmd_des):
            calls.append(1)
            return generate(p, rows, event_vec, nmd_des)

        obs = rng.normal(size=(3, 9))
        assignment, fired = None, 0
        for t in range(30):
            ev = EventRecord.null(t)
            if t > 0 and rng.random() < 0.1:
                ev = EventRecord.env_signal(Signal(int(rng.integers(len(Signal)))), t)
                fired += 1
            assignment = maybe_requery(
                assignment,
                ev,
                t,
                params=params,
                observations=obs,
                live_slots=[0, 1, 2],
                nmd_des=0.5,
                generator=counting,
            )
        mismatches += len(calls) != fired + 1
    yield CheckResult(
        "hypernet", "query count = events + 1", mismatches == 0, f"{mismatches}/100 episodes off"
    )

    obs = rng.normal(size=(3, 9))

    def flat_output(target: np.ndarray) -> np.ndarray:
        adapters = generate(params, obs, np.zeros(EVENT_WIDTH), float(target[0]))
        return np.concatenate([p.flatten() for p in adapters])

    h = 1e-5
    jac = (flat_output(np.array([0.5 + h])) - flat_output(np.array([0.5 - h]))) / (2 * h)
    norm = float(np.linalg.norm(jac))
    yield CheckResult(
        "hypernet", "output depends on the target", norm > 0.0, f"|dG/dtarget| {norm:.3e}"
    )


def run_suites(names: Iterable[str], seed: int = 0) -> list[CheckResult]:
    results: list[CheckResult] = []
    for name in names:
        results.extend(SUITES[name](seed))
    return results


def suite_names(choice: str) -> list[str]:
    if choice == "all":
        return list(SUITES)
    if choice not in SUITES:
        raise KeyError(choice)
    return [choice]
