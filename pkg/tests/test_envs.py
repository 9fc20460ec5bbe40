import dataclasses

import numpy as np
import pytest

from mmrl.config import build_run_config
from mmrl.envs import (
    TaskConfig,
    apply_perturbation,
    obs_width,
    parse_perturbations,
    reset,
    step,
    step_batch,
)
from mmrl.envs.core import AGENT_RADIUS
from mmrl.envs.pressure_plate import PLATE_1, far_side
from mmrl.envs.scripted import PressurePlateScript
from mmrl.envs.wind_flocking import shield_mask
from mmrl.errors import ConfigurationError, PerturbationSpecError, UsageError
from mmrl.evaluation import run_controller
from mmrl.events import EventKind, Signal


def preset(name, **overrides):
    return dataclasses.replace(build_run_config({"task": {"task": name}}).task, **overrides)


@pytest.fixture
def dispersion():
    return preset("dispersion")


@pytest.fixture
def plate_task():
    return preset("pressure_plate")


class TestEngine:
    def test_reset_is_seeded(self, dispersion):
        a, obs_a = reset(dispersion, 4)
        b, obs_b = reset(dispersion, 4)
        c, _ = reset(dispersion, 5)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(obs_a, obs_b)
        assert not np.array_equal(a.positions, c.positions)
        assert obs_a.shape == (2, obs_width(dispersion)) == (2, 11)

    def test_reset_carries_the_target(self, dispersion):
        state, _ = reset(dispersion, 0, nmd_des=0.7)
        assert state.nmd_des == 0.7

    def test_wrong_action_count(self, dispersion):
        state, _ = reset(dispersion, 0)
        with pytest.raises(UsageError):
            step(dispersion, state, np.zeros((3, 2)))

    def test_unknown_task(self):
        with pytest.raises(ConfigurationError):
            TaskConfig(task="soccer")

    def test_capabilities_are_padded(self):
        config = TaskConfig(task="dispersion", agents=3, capabilities=(0.5,))
        np.testing.assert_array_equal(config.capability(), [0.5, 1.0, 1.0])

    def test_horizon_ends_the_episode(self):
        config = preset("dispersion", horizon=3)
        state, _ = reset(config, 0)
        dones = []
        for _ in range(3):
            result = step(config, state, np.zeros((2, 2)))
            state = result.state
            dones.append(result.done)
        assert dones == [False, False, True]


class TestDispersion:
    def test_goal_rewards_and_completion(self, dispersion):
        state, _ = reset(dispersion, 0)
        on_first = dataclasses.replace(state, positions=np.stack([state.goals[0]] * 2))
        result = step(dispersion, on_first, np.zeros((2, 2)))
        assert result.reward == pytest.approx(1.0)
        assert result.event.signal == Signal.GOAL_REACHED
        assert not result.done

        on_both = dataclasses.replace(state, positions=state.goals.copy())
        result = step(dispersion, on_both, np.zeros((2, 2)))
        assert result.reward == pytest.approx(2.0 + 5.0)
        assert result.state.completed and result.done


class TestPressurePlate:
    def test_standing_on_a_plate_opens_the_door(self, plate_task):
        state, _ = reset(plate_task, 0)
        positions = state.positions.copy()
        positions[0] = PLATE_1
        result = step(plate_task, dataclasses.replace(state, positions=positions), np.zeros((3, 2)))
        assert result.state.door_open
        assert result.state.plates.tolist() == [True, False]
        # door and plate flip together; only the door is reported
        assert result.event.signal == Signal.DOOR_OPEN

    def test_closed_door_blocks_the_wall(self, plate_task):
        state, _ = reset(plate_task, 0)
        positions = state.positions.copy()
        positions[0] = [0.5, -0.05]
        state = dataclasses.replace(state, positions=positions)
        push = np.array([[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
        for _ in range(20):
            state = step(plate_task, state, push).state
            assert state.positions[0, 1] <= -AGENT_RADIUS + 1e-12
        assert not state.door_open

    def test_open_door_lets_agents_through(self, plate_task):
        state, _ = reset(plate_task, 0)
        positions = state.positions.copy()
        positions[0] = PLATE_1
        positions[1] = [0.0, -0.05]
        state = dataclasses.replace(state, positions=positions)
        push = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        for _ in range(20):
            state = step(plate_task, state, push).state
        assert state.door_open
        assert far_side(state)[1]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_scripted_controller_completes(self, plate_task, seed):
        _, _, completed = run_controller(plate_task, PressurePlateScript(), seed)
        assert completed


class TestWind:
    def test_shielding_cone(self):
        task = preset("wind_flocking")
        state, _ = reset(task, 0)
        big = np.array([0.0, 0.0])

        def small_at(offset):
            moved = dataclasses.replace(state, positions=np.stack([big, big + offset]))
            return shield_mask(task, moved).tolist()

        assert small_at([0.0, -0.1]) == [False, True]
        assert small_at([0.15, -0.05]) == [False, False]
        assert small_at([0.0, 0.1]) == [False, False]

    def test_shielded_agent_feels_less_wind(self):
        task = preset("wind_flocking")
        state, _ = reset(task, 0)
        shielded = dataclasses.replace(
            state, positions=np.array([[0.0, 0.0], [0.0, -0.1]]), velocities=np.zeros((2, 2))
        )
        vel = step(task, shielded, np.zeros((2, 2))).state.velocities
        assert abs(vel[1, 1]) == pytest.approx(task.shield_factor * abs(vel[0, 1]))


class TestBatch:
    def test_pooled_steps_match_sequential_order(self, dispersion, rng):
        states = [reset(dispersion, s)[0] for s in range(5)]
        actions = [rng.uniform(-1, 1, size=(2, 2)) for _ in states]
        alone = [step(dispersion, s, a) for s, a in zip(states, actions)]
        pooled = step_batch(dispersion, states, actions, workers=3)
        for x, y in zip(alone, pooled):
            np.testing.assert_array_equal(x.state.positions, y.state.positions)
            assert x.reward == y.reward

    def test_one_action_set_per_environment(self, dispersion):
        with pytest.raises(UsageError):
            step_batch(dispersion, [reset(dispersion, 0)[0]], [], workers=2)


class TestPerturbations:
    def test_parse(self):
        plan = parse_perturbations("remove:1@3, target:0.5@10,capability:0=0.6@2")
        assert [p.kind for p in plan.entries] == ["remove", "target", "capability"]
        assert plan.entries[0].agent == 1 and plan.entries[0].at == 3
        assert plan.entries[1].value == 0.5
        assert plan.entries[2].agent == 0 and plan.entries[2].value == 0.6
        assert not parse_perturbations("")

    def test_conditional_removal(self):
        (entry,) = parse_perturbations("remove:first_on_plate2").entries
        assert entry.conditional and entry.at == 0

    @pytest.mark.parametrize(
        "spec",
        ["remove:1", "target:-1@3", "capability:0=0@3", "teleport:1@3", "target:abc@1"],
    )
    def test_bad_specs(self, spec):
        with pytest.raises(PerturbationSpecError):
            parse_perturbations(spec)

    def test_validate_against_task(self):
        with pytest.raises(PerturbationSpecError):
            parse_perturbations("remove:5@3").validate(200, 3)
        with pytest.raises(PerturbationSpecError):
            parse_perturbations("target:0.5@300").validate(200, 3)

    def test_removal_fires_once(self, plate_task):
        plan = parse_perturbations("remove:1@3")
        state, _ = reset(plate_task, 0)
        early, ev = apply_perturbation(state, plan, 2)
        assert early is state and ev.is_null
        removed, ev = apply_perturbation(state, plan, 3)
        assert ev.kind == EventKind.AGENT_REMOVED and ev.agent == 1
        assert removed.live_slots == [0, 2]
        again, ev = apply_perturbation(removed, plan, 4)
        assert again is removed and ev.is_null

    def test_target_change_updates_state(self, dispersion):
        state, _ = reset(dispersion, 0, nmd_des=0.5)
        changed, ev = apply_perturbation(state, parse_perturbations("target:1.5@0"), 0)
        assert changed.nmd_des == 1.5
        assert ev.kind == EventKind.DIVERSITY_TARGET_CHANGED

    def test_cannot_remove_the_last_agent(self, dispersion):
        state, _ = reset(dispersion, 0)
        with pytest.raises(UsageError):
            apply_perturbation(state, parse_perturbations("remove:0@0,remove:1@0"), 0)
