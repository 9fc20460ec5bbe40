"""Behaviour distance, the NMD estimator, diversity control and the projection
diagnostics. Classes group the properties each piece must satisfy."""

import numpy as np
import pytest

from mmrl.diversity import (
    DeviationSet,
    DiversityState,
    GaussianPolicyOutput,
    alpha_expression,
    behavior_distance,
    compute_alpha,
    empirical_w2_1d,
    euler_residuals,
    nmd_coefficient,
    nmd_grad,
    nmd_hat,
    nmd_hat_deviations,
    pairwise_nmd,
    projection_defect,
    projection_limits_report,
    projection_matrix,
    w2_bures_diag,
    w2_shared_cov,
)
from mmrl.errors import AssumptionViolation, DegenerateConfiguration, UsageError
from mmrl.numeric import tape as T
from mmrl.numeric.oracle import finite_diff_grad


def constant(mean, log_std=None):
    mean = np.asarray(mean, dtype=float)
    log_std = np.zeros_like(mean) if log_std is None else np.asarray(log_std, dtype=float)
    return lambda o: GaussianPolicyOutput(mean=mean.copy(), log_std=log_std)


def linear(rng, obs_dim=3, d_a=2, log_std=-0.5):
    w, b = rng.normal(size=(d_a, obs_dim)), rng.normal(size=d_a)
    return lambda o: GaussianPolicyOutput(mean=w @ o + b, log_std=np.full(d_a, log_std))


class TestWasserstein:
    def test_shared_covariance_reduces_to_mean_distance(self, rng):
        for _ in range(20):
            a, b, s = rng.normal(size=3), rng.normal(size=3), rng.uniform(0.1, 2, size=3)
            assert w2_bures_diag(a, s, b, s) == pytest.approx(w2_shared_cov(a, b), abs=1e-12)

    def test_bures_matches_quantile_coupling(self, rng):
        z = rng.standard_normal(100_000)
        exact = w2_bures_diag([0.3], [1.5], [-0.4], [0.7])
        sampled = empirical_w2_1d(0.3 + 1.5 * z, -0.4 + 0.7 * z)
        assert abs(sampled - exact) / exact < 1e-2

    def test_known_value(self):
        assert w2_shared_cov([0.0, 0.0], [3.0, 4.0]) == 5.0
        assert w2_bures_diag([0.0], [1.0], [0.0], [2.0]) == pytest.approx(1.0)

    def test_input_validation(self):
        with pytest.raises(UsageError):
            w2_shared_cov([0.0, 1.0], [0.0])
        with pytest.raises(UsageError):
            w2_bures_diag([0.0], [0.0], [0.0], [1.0])
        with pytest.raises(UsageError):
            empirical_w2_1d([1.0, 2.0], [1.0])


class TestPseudometric:
    def test_symmetry_nonnegativity_and_triangle(self, rng):
        for _ in range(200):
            obs_set = rng.normal(size=(5, 3))
            a, b, c = linear(rng), linear(rng), linear(rng)
            ab = behavior_distance(a, b, obs_set)
            assert ab == behavior_distance(b, a, obs_set)
            assert ab >= 0.0
            assert behavior_distance(a, a, obs_set) == 0.0
            slack = ab + behavior_distance(b, c, obs_set) - behavior_distance(a, c, obs_set)
            assert slack >= -1e-9

    def test_covariance_mismatch_raises(self, rng):
        obs_set = rng.normal(size=(2, 3))
        with pytest.raises(AssumptionViolation):
            behavior_distance(linear(rng, log_std=-0.5), linear(rng, log_std=0.0), obs_set)

    def test_empty_observation_set_raises(self, rng):
        with pytest.raises(UsageError):
            behavior_distance(linear(rng), linear(rng), [])


class TestEstimator:
    def test_worked_examples(self, rng):
        obs_set = rng.normal(size=(4, 3))
        e1 = np.array([1.0, 0.0])
        assert nmd_hat([constant(e1)] * 3, obs_set) == 0.0
        assert nmd_hat([constant([0.0, 0.0]), constant([0.6, 0.8])], obs_set) == pytest.approx(
            1.0, abs=1e-12
        )
        three = [constant([0.0, 0.0]), constant(e1), constant(2 * e1)]
        assert nmd_hat(three, obs_set) == pytest.approx(4.0 / 3.0, abs=1e-12)

    def test_single_behaviour_rejected(self, rng):
        with pytest.raises(UsageError):
            nmd_hat([constant([0.0, 0.0])], rng.normal(size=(2, 3)))
        with pytest.raises(UsageError):
            DeviationSet(np.zeros((3, 1, 2)))

    @pytest.mark.parametrize("t", [0.5, 2.0, 10.0])
    def test_degree_one_homogeneity(self, rng, t):
        devs = DeviationSet(rng.normal(size=(3, 4, 2)))
        base = nmd_hat_deviations(devs)
        assert abs(nmd_hat_deviations(devs.scaled(t)) - t * base) / base <= 1e-12

    def test_zero_iff_behaviours_coincide(self, rng):
        row = rng.normal(size=(2, 1, 2))
        assert nmd_hat_deviations(DeviationSet(np.repeat(row, 3, axis=1))) == 0.0
        moved = np.repeat(row, 3, axis=1)
        moved[1, 2] += 1e-3
        assert nmd_hat_deviations(DeviationSet(moved)) > 0.0

    def test_two_dimensional_input_is_one_observation(self):
        devs = DeviationSet(np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert devs.obs_count == 1
        assert nmd_hat_deviations(devs) == pytest.approx(5.0)

    def test_explicit_observation_count_rescales(self, rng):
        devs = DeviationSet(rng.normal(size=(2, 3, 2)))
        assert nmd_hat_deviations(devs, obs_count=4) == pytest.approx(
            nmd_hat_deviations(devs) / 2.0
        )
        assert nmd_coefficient(devs) == pytest.approx(2.0 / (3 * 2 * 2))

    def test_traced_estimator_matches_plain(self, rng):
        u = rng.normal(size=(3, 4, 2))
        tape = T.Tape()
        v = tape.watch(u)
        traced = pairwise_nmd(v)
        assert float(T.value_of(traced)) == pytest.approx(float(pairwise_nmd(u)), rel=1e-14)


class TestGradient:
    def test_matches_finite_differences(self, rng):
        for _ in range(50):
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)), 2)
            devs = DeviationSet(rng.normal(size=shape))
            m = int(rng.integers(devs.behavior_count))

            def value(x, devs=devs, m=m):
                arr = devs.deviations.copy()
                arr[:, m] = x
                return nmd_hat_deviations(DeviationSet(arr))

            numeric = finite_diff_grad(value, devs.deviations[:, m].copy())
            np.testing.assert_allclose(nmd_grad(devs, None, m), numeric, rtol=1e-4, atol=1e-8)

    def test_tape_gradient_agrees(self, rng):
        u = rng.normal(size=(2, 3, 2))
        tape = T.Tape()
        v = tape.watch(u)
        grad = T.grad_backward(tape, pairwise_nmd(v), [v])[v]
        np.testing.assert_allclose(grad[:, 1], nmd_grad(DeviationSet(u), None, 1), atol=1e-12)

    def test_coincident_behaviours_are_degenerate(self):
        devs = DeviationSet(np.array([[[1.0, 1.0], [1.0, 1.0], [0.0, 2.0]]]))
        with pytest.raises(DegenerateConfiguration):
            nmd_grad(devs, None, 0)

    def test_index_out_of_range(self, rng):
        with pytest.raises(UsageError):
            nmd_grad(DeviationSet(rng.normal(size=(1, 2, 2))), None, 2)


class TestDiversityControl:
    def test_alpha_examples(self):
        assert compute_alpha(0.5, 2.0) == pytest.approx(0.25)
        assert compute_alpha(0.7, 0.7) == pytest.approx(1.0)
        assert compute_alpha(0.5, 0.0, 1e-6, 1e3) == 1e3

    def test_alpha_rejects_negative_inputs(self):
        with pytest.raises(UsageError):
            compute_alpha(-0.1, 1.0)
        with pytest.raises(UsageError):
            compute_alpha(0.1, 1.0, floor=0.0)

    def test_scaled_deviations_hit_the_target(self, rng):
        for _ in range(50):
            devs = DeviationSet(rng.normal(size=(3, 4, 2)))
            target = float(rng.uniform(0.05, 2.0))
            state = DiversityState.measure(target, devs)
            assert state.above_floor
            realized = nmd_hat_deviations(devs.scaled(state.alpha))
            assert abs(realized - target) / target <= 1e-10

    def test_alpha_expression_matches_and_traces(self, rng):
        u = rng.normal(size=(2, 3, 2))
        measured = float(pairwise_nmd(u))
        assert float(alpha_expression(0.6, measured)) == pytest.approx(compute_alpha(0.6, measured))
        tape = T.Tape()
        v = tape.watch(u)
        alpha = alpha_expression(0.6, pairwise_nmd(v))
        grad = T.grad_backward(tape, alpha, [v])[v]
        # alpha = target / N, so dalpha/du = -alpha / N * dN/du
        expected = -float(T.value_of(alpha)) / measured * nmd_grad(DeviationSet(u), None, 0)
        np.testing.assert_allclose(grad[:, 0], expected, atol=1e-10)

    def test_clamped_alpha_has_no_gradient(self):
        tape = T.Tape()
        v = tape.watch(np.array([[[0.0, 0.0], [1e-9, 0.0]]]))
        alpha = alpha_expression(1.0, pairwise_nmd(v), cap=10.0)
        assert float(T.value_of(alpha)) == 10.0
        np.testing.assert_array_equal(T.grad_backward(tape, alpha, [v])[v], 0.0)


class TestProjection:
    def test_defect_identity(self, rng):
        for _ in range(100):
            devs = DeviationSet(rng.normal(size=(2, 4, 2)))
            m = int(rng.integers(4))
            grad = nmd_grad(devs, None, m).reshape(-1)
            defect = projection_defect(devs.joint(m), grad, nmd_hat_deviations(devs))
            assert defect.identity_residual <= 1e-10

    def test_idempotent_when_other_behaviour_is_zero(self, rng):
        arr = np.zeros((2, 2, 2))
        arr[:, 0] = rng.normal(size=(2, 2))
        devs = DeviationSet(arr)
        grad = nmd_grad(devs, None, 0).reshape(-1)
        defect = projection_defect(devs.joint(0), grad, nmd_hat_deviations(devs))
        assert defect.k == pytest.approx(1.0)
        assert defect.idempotency_gap <= 1e-6

    def test_limits(self, rng):
        devs = DeviationSet(rng.normal(size=(1, 3, 2)))
        small, _, large = projection_limits_report(devs, 0, [1e-6, 1.0, 1e6])
        assert small.distance_to_identity <= 1e-4
        assert large.distance_to_orthogonal <= 1e-3

    def test_projection_matrix_validation(self):
        with pytest.raises(UsageError):
            projection_matrix(np.ones(2), np.ones(3), 1.0)
        with pytest.raises(UsageError):
            projection_matrix(np.ones(2), np.ones(2), 0.0)

    @pytest.mark.parametrize("behaviours", [2, 3, 4, 5, 6])
    def test_euler_residuals_sum_to_one_minus_b(self, rng, behaviours):
        devs = DeviationSet(rng.normal(size=(2, behaviours, 2)))
        residuals = euler_residuals(devs)
        assert residuals.shape == (behaviours,)
        assert float(residuals.sum()) == pytest.approx(1 - behaviours, abs=1e-9)

    def test_euler_limit(self, rng):
        devs = DeviationSet(rng.normal(size=(1, 5, 2)))
        assert euler_residuals(devs, limit=2).shape == (2,)
