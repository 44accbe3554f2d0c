"""Class-proportion estimation and annealed EMA blending."""

import numpy as np
import pytest

from pouf import priors
from pouf.errors import ValidationError


class TestEmaWeight:
    def test_endpoints_and_midpoint(self):
        assert priors.ema_weight(0, 100) == 1.0
        assert abs(priors.ema_weight(50, 100) - 0.5) < 1e-12
        assert abs(priors.ema_weight(100, 100)) < 1e-12

    def test_monotone_decreasing(self):
        values = [priors.ema_weight(step, 40) for step in range(41)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_steps_beyond_horizon_clamp_to_zero(self):
        assert priors.ema_weight(250, 100) == priors.ema_weight(100, 100)


class TestBatchEstimate:
    def test_symmetric_similarities_give_uniform_estimate(self):
        sim = np.array([[2.0, 0.0], [0.0, 2.0]])
        state = priors.uniform_prior(2)
        est = priors.batch_prior_estimate(sim, 1.0, state)
        np.testing.assert_allclose(est, [0.5, 0.5], atol=1e-12)

    def test_estimate_is_mean_of_plan_rows(self):
        rng = np.random.default_rng(0)
        sim = rng.uniform(-1, 1, size=(6, 3))
        state = priors.PriorState(weights=np.array([0.5, 0.3, 0.2]), horizon=10)
        est = priors.batch_prior_estimate(sim, 0.5, state)
        from pouf import losses

        plan = losses.plan_over_classes(sim, temperature=0.5, prior=state.weights)
        np.testing.assert_allclose(est, plan.mean(axis=0), atol=1e-15)
        assert abs(est.sum() - 1.0) < 1e-9

    def test_prior_skews_the_estimate(self):
        sim = np.zeros((4, 2))  # no signal: estimate equals the prior itself
        state = priors.PriorState(weights=np.array([0.9, 0.1]), horizon=5)
        est = priors.batch_prior_estimate(sim, 1.0, state)
        np.testing.assert_allclose(est, [0.9, 0.1], atol=1e-12)


class TestEmaUpdate:
    def test_first_update_adopts_the_batch_estimate(self):
        state = priors.uniform_prior(3, horizon=10)
        estimate = np.array([0.7, 0.2, 0.1])
        new = priors.ema_update(state, estimate)
        np.testing.assert_allclose(new.weights, estimate, atol=1e-12)
        assert new.step == 1

    def test_final_step_freezes_the_prior(self):
        state = priors.PriorState(
            weights=np.array([0.6, 0.4]), step=10, horizon=10
        )
        new = priors.ema_update(state, np.array([0.1, 0.9]))
        np.testing.assert_allclose(new.weights, state.weights, atol=1e-12)

    def test_stationary_estimate_converges_monotonically_in_l1(self):
        target = np.array([0.5, 0.3, 0.2])
        state = priors.uniform_prior(3, horizon=50)
        state = priors.ema_update(state, np.array([0.2, 0.3, 0.5]))  # move off target
        gaps = []
        for _ in range(30):
            state = priors.ema_update(state, target)
            gaps.append(float(np.abs(state.weights - target).sum()))
        assert all(a >= b - 1e-15 for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < gaps[0]

    def test_weights_remain_a_distribution(self):
        rng = np.random.default_rng(1)
        state = priors.uniform_prior(4, horizon=20)
        for _ in range(20):
            est = rng.dirichlet(np.ones(4))
            state = priors.ema_update(state, est)
            assert abs(state.weights.sum() - 1.0) < 1e-12
            assert np.all(state.weights >= 0)

    def test_rejects_malformed_estimate(self):
        state = priors.uniform_prior(3)
        with pytest.raises(ValidationError):
            priors.ema_update(state, np.array([0.5, 0.5]))
        with pytest.raises(ValidationError):
            priors.ema_update(state, np.array([0.5, 0.4, 0.2]))


class TestPriorState:
    def test_validates_weights_and_clock(self):
        with pytest.raises(ValidationError):
            priors.PriorState(weights=np.array([0.5, 0.6]))
        with pytest.raises(ValidationError):
            priors.PriorState(weights=np.array([0.5, 0.5]), step=3, horizon=2)
        with pytest.raises(ValidationError):
            priors.PriorState(weights=np.array([0.5, 0.5]), horizon=0)
