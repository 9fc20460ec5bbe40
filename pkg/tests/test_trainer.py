import dataclasses
import json

import numpy as np
import pytest
from conftest import tiny_run

from mmrl import rollout, trainer
from mmrl.checkpoint import load_checkpoint
from mmrl.envs import parse_perturbations
from mmrl.errors import TrainingDivergence, UsageError
from mmrl.events import EventKind, EventRecord, Signal
from mmrl.model import init_model
from mmrl.numeric import tape as T
from mmrl.numeric.optim import AdamState
from mmrl.numeric.tree import tree_flatten, watch_tree
from mmrl.rollout import AlphaSettings, collect
from mmrl.trainer import (
    compute_gae,
    normalize_advantages,
    ppo_loss,
    ppo_update,
    sample_targets,
    train,
)
from mmrl.utils import read_jsonl


@pytest.fixture
def tiny_batch(run_config):
    model = init_model(np.random.default_rng(1), run_config.task, run_config.model)
    batch = collect(
        model,
        run_config.task,
        seeds=[11, 12],
        targets=[0.5, 1.0],
        alpha=AlphaSettings(cap=run_config.train.alpha_cap),
    )
    return model, batch


class TestAdvantages:
    def test_hand_computed_example(self):
        adv, returns = compute_gae(
            np.ones(3), np.zeros(3), np.array([0.0, 0.0, 1.0]), gamma=0.9, lam=1.0
        )
        np.testing.assert_allclose(adv, [2.71, 1.9, 1.0])
        np.testing.assert_allclose(returns, adv)

    def test_bootstrap_from_last_values(self):
        adv, _ = compute_gae(
            np.zeros((2, 1)),
            np.zeros((2, 1)),
            np.zeros((2, 1)),
            gamma=0.5,
            lam=1.0,
            last_values=np.ones(1),
        )
        np.testing.assert_allclose(adv[:, 0], [0.25, 0.5])

    def test_lambda_zero_is_one_step_td(self, rng):
        rewards, values = rng.normal(size=4), rng.normal(size=4)
        adv, _ = compute_gae(rewards, values, np.zeros(4), gamma=0.9, lam=0.0)
        expected = rewards + 0.9 * np.append(values[1:], 0.0) - values
        np.testing.assert_allclose(adv, expected)

    def test_lambda_one_is_discounted_return_minus_value(self, rng):
        gamma = 0.9
        rewards, values = rng.normal(size=5), rng.normal(size=5)
        dones = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
        adv, returns = compute_gae(rewards, values, dones, gamma=gamma, lam=1.0)
        for t in range(5):
            discounted = sum(gamma**k * rewards[t + k] for k in range(5 - t))
            assert adv[t] == pytest.approx(discounted - values[t], abs=1e-12)
        np.testing.assert_allclose(returns, adv + values)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            compute_gae(np.ones(3), np.ones(2), np.zeros(3), 0.9, 0.95)

    def test_normalize(self, rng):
        adv = normalize_advantages(rng.normal(3.0, 5.0, size=100))
        assert adv.mean() == pytest.approx(0.0, abs=1e-12)
        assert adv.std() == pytest.approx(1.0)
        np.testing.assert_array_equal(normalize_advantages(np.full(4, 2.0)), np.zeros(4))

    def test_targets_are_log_uniform_in_range(self, rng):
        targets = sample_targets(rng, 2000, 0.05, 2.0)
        assert targets.shape == (2000,)
        assert targets.min() >= 0.05 and targets.max() <= 2.0
        # log-uniform puts the median near the geometric mean
        assert np.median(targets) == pytest.approx(np.sqrt(0.05 * 2.0), rel=0.1)


class TestCollect:
    def test_shapes_and_padding(self, run_config, tiny_batch):
        _, batch = tiny_batch
        H, od = run_config.task.horizon, 11
        assert batch.obs.shape == (H, 2, 2, od)
        assert batch.rewards.shape == (H, 2)
        assert batch.env_steps == int(batch.lengths.sum())
        padding = ~batch.active
        assert np.all(batch.dones[padding] == 1.0)
        assert np.all(batch.rewards[padding] == 0.0)
        assert np.all(batch.query_counts >= 1)
        assert len(batch.probe_obs) == len(batch.behaviour_ids) == batch.steps_used

    def test_realized_diversity_tracks_each_target(self, tiny_batch):
        _, batch = tiny_batch
        measured = batch.active & ~batch.fallback
        assert measured.any()
        np.testing.assert_allclose(batch.realized[measured], batch.targets[measured], rtol=1e-8)
        np.testing.assert_allclose(batch.targets[0], [0.5, 1.0])

    def test_seeded_rollouts_repeat(self, run_config, tiny_batch):
        model, batch = tiny_batch
        again = collect(
            model,
            run_config.task,
            seeds=[11, 12],
            targets=[0.5, 1.0],
            alpha=AlphaSettings(cap=run_config.train.alpha_cap),
        )
        np.testing.assert_array_equal(batch.pre_tanh, again.pre_tanh)
        np.testing.assert_array_equal(batch.rewards, again.rewards)

    def test_single_query_mode_queries_once(self, run_config):
        task = dataclasses.replace(run_config.task, horizon=6)
        model = init_model(np.random.default_rng(2), task, run_config.model)
        batch = collect(
            model,
            task,
            seeds=[3],
            targets=[0.5],
            single_query=True,
            alpha=AlphaSettings(cap=run_config.train.alpha_cap),
        )
        assert batch.query_counts.tolist() == [1]

    def test_event_requeries_only_its_own_environment(self, run_config, tiny_batch, monkeypatch):
        model, _ = tiny_batch
        real_step = rollout.step_batch
        calls = []

        def step_with_one_plate_press(task, states, actions, workers=None):
            t = len(calls)
            calls.append(t)
            results = [
                dataclasses.replace(r, event=EventRecord.null(t))
                for r in real_step(task, states, actions, workers)
            ]
            if t == 2:
                press = EventRecord.env_signal(Signal.PLATE_1_ON, t)
                results[0] = dataclasses.replace(results[0], event=press)
            return results

        monkeypatch.setattr(rollout, "step_batch", step_with_one_plate_press)
        batch = collect(
            model,
            run_config.task,
            seeds=[11, 12],
            targets=[0.5, 1.0],
            alpha=AlphaSettings(cap=run_config.train.alpha_cap),
        )
        assert batch.query_counts.tolist() == [2, 1]
        assert batch.events[3][0].kind == EventKind.ENV_SIGNAL
        assert batch.events[3][1].is_null
        assert [(q.env, q.t) for q in batch.queries] == [(0, 0), (1, 0), (0, 3)]

    def test_removed_agent_leaves_the_batch(self, run_config, tiny_batch):
        model, _ = tiny_batch
        batch = collect(
            model,
            run_config.task,
            seeds=[11, 12],
            targets=[0.5, 1.0],
            alpha=AlphaSettings(cap=run_config.train.alpha_cap),
            plan=parse_perturbations("remove:1@3"),
        )
        assert np.all(batch.query_counts >= 2)
        running = batch.active[3:]
        assert running.any()
        assert not batch.alive[3:, :, 1][running].any()
        assert np.all(batch.pair_ids[3:, :, 1][running] == -1)
        assert batch.alive[:3, :, 1][batch.active[:3]].all()

        # whatever sits in a removed slot never reaches the loss
        adv, returns = compute_gae(batch.rewards, batch.values, batch.dones, 0.99, 0.95)
        steps = np.flatnonzero(batch.active.any(axis=1))
        dead = batch.active[..., None] & ~batch.alive
        assert dead.any()
        garbled = dataclasses.replace(
            batch,
            pre_tanh=np.where(dead[..., None], 3.0, batch.pre_tanh),
            log_probs=np.where(dead, -40.0, batch.log_probs),
        )
        loss, _ = ppo_loss(model, batch, steps, adv, returns, run_config.train)
        loss_garbled, _ = ppo_loss(model, garbled, steps, adv, returns, run_config.train)
        assert float(loss_garbled) == float(loss)


class TestUpdate:
    def test_loss_is_finite_with_and_without_frozen_alpha(self, run_config, tiny_batch):
        model, batch = tiny_batch
        adv, returns = compute_gae(batch.rewards, batch.values, batch.dones, 0.99, 0.95)
        steps = np.flatnonzero(batch.active.any(axis=1))
        for freeze in (False, True):
            cfg = dataclasses.replace(run_config.train, freeze_alpha=freeze)
            loss, stats = ppo_loss(model, batch, steps, adv, returns, cfg)
            assert np.isfinite(float(loss))
            assert set(stats) == {"policy_loss", "value_loss", "entropy"}

    def test_minibatch_without_live_agents(self, run_config, tiny_batch):
        model, batch = tiny_batch
        adv, returns = compute_gae(batch.rewards, batch.values, batch.dones, 0.99, 0.95)
        empty = dataclasses.replace(batch, alive=np.zeros_like(batch.alive))
        with pytest.raises(UsageError, match="no live samples"):
            ppo_loss(model, empty, np.array([0, 1]), adv, returns, run_config.train)

    def test_update_moves_parameters(self, run_config, tiny_batch):
        model, batch = tiny_batch
        adv, returns = compute_gae(batch.rewards, batch.values, batch.dones, 0.99, 0.95)
        updated, state, stats = ppo_update(
            model, batch, adv, returns, run_config.train, AdamState(), np.random.default_rng(0)
        )
        before, after = tree_flatten(model), tree_flatten(updated)
        assert state.step > 0
        assert all(np.all(np.isfinite(a)) for a in after.values())
        assert not np.array_equal(before["hypernet.w_head"], after["hypernet.w_head"])
        assert stats["grad_norm"] > 0.0

    def test_zero_advantages_leave_only_entropy_and_value_terms(self, run_config, tiny_batch):
        model, batch = tiny_batch
        _, returns = compute_gae(batch.rewards, batch.values, batch.dones, 0.99, 0.95)
        zero = np.zeros_like(batch.rewards)
        cfg = run_config.train
        steps = np.flatnonzero(batch.active.any(axis=1))

        tape = T.Tape()
        watched = watch_tree(tape, model)
        loss, stats = ppo_loss(watched, batch, steps, zero, returns, cfg)
        assert stats["policy_loss"] == 0.0
        by_var = T.grad_backward(tape, loss)
        grads = {name: by_var[var] for name, var in tree_flatten(watched).items()}
        for name, grad in grads.items():
            if name.startswith("hypernet.") or name.startswith("backbone.feature_net."):
                np.testing.assert_array_equal(grad, 0.0, err_msg=name)
        np.testing.assert_array_equal(grads["backbone.w_shared"], 0.0)
        np.testing.assert_allclose(grads["backbone.shared_log_std"], -cfg.entropy_coef)
        assert any(np.any(g != 0.0) for n, g in grads.items() if n.startswith("critic."))

        updated, _, _ = ppo_update(
            model, batch, zero, returns, cfg, AdamState(), np.random.default_rng(0)
        )
        before, after = tree_flatten(model), tree_flatten(updated)
        for name in before:
            if name.startswith("hypernet.") or name.startswith("backbone.feature_net."):
                np.testing.assert_array_equal(after[name], before[name], err_msg=name)
        log_std = "backbone.shared_log_std"
        assert not np.array_equal(after[log_std], before[log_std])


class TestTrain:
    def test_writes_run_files(self, trained):
        out = trained.checkpoint.parent
        run_info = json.loads((out / "run.json").read_text())
        assert run_info["seed"] == 3
        assert run_info["ablation"] is False
        assert run_info["config"]["task"]["task"] == "dispersion"
        assert len(read_jsonl(out / "metrics.jsonl")) == len(trained.metrics) >= 1
        assert trained.env_steps >= 16
        assert load_checkpoint(trained.checkpoint).meta["env_steps"] == trained.env_steps

    def test_metrics_are_reproducible(self, trained, tmp_path):
        again = train(tiny_run(), tmp_path, seed=3)

        def stable(records):
            return [{k: v for k, v in r.items() if k != "seconds"} for r in records]

        assert stable(again.metrics) == stable(trained.metrics)

    def test_single_query_ablation_is_recorded(self, tmp_path):
        result = train(tiny_run(total_steps=8), tmp_path, seed=1, single_query=True)
        assert json.loads((tmp_path / "run.json").read_text())["ablation"] is True
        assert load_checkpoint(result.checkpoint).meta["single_query"] is True

    def test_divergence_dumps_state(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingDivergence("non-finite loss nan")

        monkeypatch.setattr(trainer, "collect", diverge)
        with pytest.raises(TrainingDivergence):
            train(tiny_run(), tmp_path, seed=0)
        assert (tmp_path / "divergence.mmrl").exists()
        assert not (tmp_path / "checkpoint.mmrl").exists()
