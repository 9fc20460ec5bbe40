import numpy as np
import pytest

from mmrl.errors import ConfigurationError
from mmrl.events import EVENT_WIDTH, EventRecord, Signal, encode_event
from mmrl.hypernet import BehaviorAssignment, generate, generate_batch, init_hypernet, maybe_requery


@pytest.fixture
def params(rng):
    return init_hypernet(rng, 5, 2, 6, 2, embed=8, heads=2, depth=1, ff_width=16)


class CountingGenerator:
    def __init__(self):
        self.calls = 0

    def __call__(self, params, rows, event_vec, nmd_des):
        self.calls += 1
        return generate(params, rows, event_vec, nmd_des)


class TestGenerate:
    def test_one_pair_per_agent_with_expected_shapes(self, params, rng):
        pairs = generate(params, rng.normal(size=(4, 5)), np.zeros(EVENT_WIDTH), 0.5)
        assert len(pairs) == 4
        assert pairs[0].c.shape == (2, 6)
        assert pairs[0].d_up.shape == (2, 2)

    def test_permuting_agents_permutes_pairs(self, params, rng):
        obs = rng.normal(size=(4, 5))
        event = encode_event(EventRecord.env_signal(Signal.PLATE_1_ON))
        perm = rng.permutation(4)
        base = generate(params, obs, event, 0.8)
        permuted = generate(params, obs[perm], event, 0.8)
        for i, j in enumerate(perm):
            np.testing.assert_allclose(permuted[i].c, base[j].c, atol=1e-12)
            np.testing.assert_allclose(permuted[i].d_up, base[j].d_up, atol=1e-12)

    def test_event_and_target_change_the_output(self, params, rng):
        obs = rng.normal(size=(3, 5))
        base = generate(params, obs, np.zeros(EVENT_WIDTH), 0.5)
        other_target = generate(params, obs, np.zeros(EVENT_WIDTH), 1.5)
        other_event = generate(params, obs, encode_event(EventRecord.agent_removed(1)), 0.5)
        assert not np.allclose(base[0].c, other_target[0].c)
        assert not np.allclose(base[0].c, other_event[0].c)

    def test_batch_matches_single_queries(self, params, rng):
        obs = rng.normal(size=(2, 3, 5))
        events = np.zeros((2, EVENT_WIDTH))
        c, d_up = generate_batch(params, obs, events, np.array([0.3, 1.2]))
        assert c.shape == (2, 3, 2, 6) and d_up.shape == (2, 3, 2, 2)
        single = generate(params, obs[1], events[1], 1.2)
        np.testing.assert_allclose(c[1, 2], single[2].c, atol=1e-12)

    def test_wrong_observation_width(self, params, rng):
        with pytest.raises(ConfigurationError):
            generate(params, rng.normal(size=(3, 4)), np.zeros(EVENT_WIDTH), 0.5)

    def test_rank_must_fit_feature_width(self, rng):
        with pytest.raises(ConfigurationError):
            init_hypernet(rng, 5, 7, 6, 2, embed=8, heads=2, depth=1, ff_width=16)


class TestRequery:
    def _query(self, params, assignment, ev, t, obs, live, **kwargs):
        return maybe_requery(
            assignment,
            ev,
            t,
            params=params,
            observations=obs,
            live_slots=live,
            nmd_des=0.5,
            **kwargs,
        )

    def test_initial_query_then_hold_on_null(self, params, rng):
        obs = rng.normal(size=(3, 5))
        gen = CountingGenerator()
        first = self._query(params, None, EventRecord.null(), 0, obs, [0, 1, 2], generator=gen)
        assert gen.calls == 1 and first.slots == (0, 1, 2)
        held = self._query(params, first, EventRecord.null(4), 4, obs, [0, 1, 2], generator=gen)
        assert held is first
        assert gen.calls == 1

    def test_event_triggers_fresh_query_for_live_agents(self, params, rng):
        obs = rng.normal(size=(3, 5))
        gen = CountingGenerator()
        first = self._query(params, None, EventRecord.null(), 0, obs, [0, 1, 2], generator=gen)
        removed = EventRecord.agent_removed(1, timestep=5)
        second = self._query(params, first, removed, 5, obs, [0, 2], generator=gen)
        assert gen.calls == 2
        assert second.slots == (0, 2)
        assert second.generated_at == 5
        assert second.event == removed

    def test_single_query_mode_only_restricts(self, params, rng):
        obs = rng.normal(size=(3, 5))
        gen = CountingGenerator()
        first = self._query(
            params, None, EventRecord.null(), 0, obs, [0, 1, 2], generator=gen, event_driven=False
        )
        later = self._query(
            params,
            first,
            EventRecord.agent_removed(1, timestep=5),
            5,
            obs,
            [0, 2],
            generator=gen,
            event_driven=False,
        )
        assert gen.calls == 1
        assert later.slots == (0, 2)
        assert later.pair_for(2) is first.pair_for(2)
        assert later.generated_at == 0

    def test_assignment_needs_one_pair_per_slot(self, params, rng):
        pairs = generate(params, rng.normal(size=(2, 5)), np.zeros(EVENT_WIDTH), 0.5)
        with pytest.raises(ConfigurationError):
            BehaviorAssignment(pairs=tuple(pairs), slots=(0, 1, 2), generated_at=0)
