"""Diffusion toy: stepwise/marginal agreement, reverse inversion, providers.

Monte-Carlo oracles compare empirical moments against the analytically
composed closed forms, with 3-standard-error acceptance windows.
"""

import numpy as np
import pytest

from dualmmt.config import DiffusionConfig
from dualmmt.diffusion import (FeatureProvider, LearnedPredictor,
                               NoiseSchedule, OraclePredictor, ZeroPredictor,
                               condition_vector, forward_marginal,
                               forward_step, invert_forward_step, ldm_loss,
                               reverse_step)
from dualmmt.errors import ContractError, DataError


def small_schedule(steps=10):
    return NoiseSchedule(steps=steps, alpha_start=0.995, alpha_end=0.9)


class TestSchedule:
    def test_alpha_bounds_validated(self):
        with pytest.raises(ContractError):
            NoiseSchedule(steps=5, alpha_start=1.2)
        with pytest.raises(ContractError):
            NoiseSchedule(steps=0)

    def test_alpha_bar_strictly_decreasing(self):
        sched = NoiseSchedule(steps=50)
        bars = sched.alpha_bars[1:]
        assert (np.diff(bars) < 0).all()
        assert sched.alpha_bar(0) == 1.0

    def test_time_step_range_checked(self):
        sched = small_schedule()
        with pytest.raises(ContractError):
            forward_step(np.zeros(3), 0, sched, np.zeros(3))
        with pytest.raises(ContractError):
            forward_step(np.zeros(3), 11, sched, np.zeros(3))


class TestForward:
    def test_alpha_one_is_identity(self):
        sched = NoiseSchedule(steps=3, alpha_start=1.0, alpha_end=1.0)
        v = np.array([1.0, -2.0])
        out = forward_step(v, 2, sched, np.ones(2) * 9.0)
        np.testing.assert_allclose(out, v)

    def test_zero_start_half_retention(self):
        sched = NoiseSchedule(steps=1, alpha_start=0.5, alpha_end=0.5)
        eps = np.array([2.0, -4.0])
        out = forward_step(np.zeros(2), 1, sched, eps)
        np.testing.assert_allclose(out, np.sqrt(0.5) * eps)

    def test_inversion_recovers_input(self):
        sched = small_schedule()
        rng = np.random.default_rng(0)
        v = rng.standard_normal(6)
        eps = rng.standard_normal(6)
        v_t = forward_step(v, 4, sched, eps)
        np.testing.assert_allclose(invert_forward_step(v_t, 4, sched, eps), v,
                                   atol=1e-10)

    def test_stepwise_composition_matches_closed_form_marginal(self):
        # Monte-Carlo oracle: 1e5 stepwise chains vs N(sqrt(abar)v0, (1-abar)I).
        sched = NoiseSchedule(steps=20, alpha_start=0.999, alpha_end=0.95)
        rng = np.random.default_rng(1)
        n, dim = 100_000, 4
        v0 = rng.standard_normal(dim)
        v = np.tile(v0, (n, 1))
        for t in range(1, sched.steps + 1):
            v = forward_step(v, t, sched, rng.standard_normal((n, dim)))
        abar = sched.alpha_bar(sched.steps)
        expected_mean = np.sqrt(abar) * v0
        expected_var = 1.0 - abar
        se_mean = v.std(axis=0, ddof=1) / np.sqrt(n)
        assert (np.abs(v.mean(axis=0) - expected_mean) <= 3 * se_mean).all()
        sample_var = v.var(axis=0, ddof=1).mean()
        se_var = expected_var * np.sqrt(2.0 / (n - 1)) / np.sqrt(dim)
        assert abs(sample_var - expected_var) <= 3 * se_var


class TestReverse:
    def test_oracle_with_alpha_prev_one_recovers_exactly(self):
        # t=1 has alpha_0 = 1, so the re-noise term vanishes.
        sched = small_schedule()
        rng = np.random.default_rng(2)
        v0 = rng.standard_normal(5)
        eps = rng.standard_normal(5)
        v1 = forward_step(v0, 1, sched, eps)
        out = reverse_step(v1, 1, OraclePredictor(eps), None, sched)
        np.testing.assert_allclose(out, v0, atol=1e-10)

    def test_zero_prediction_is_pure_rescaling(self):
        sched = small_schedule()
        v = np.array([3.0, -1.0])
        out = reverse_step(v, 5, ZeroPredictor(), None, sched)
        np.testing.assert_allclose(out, v / np.sqrt(sched.alpha(5)))

    def test_t_zero_rejected(self):
        sched = small_schedule()
        with pytest.raises(ContractError):
            reverse_step(np.zeros(2), 0, ZeroPredictor(), None, sched)

    def test_full_round_trip_error_matches_analytic_magnitude(self):
        # Monte-Carlo oracle over 1e4 trials: the as-written reverse step
        # re-injects sqrt(1 - alpha_{t-1}) of the oracle noise, which then
        # gets rescaled by every later step; the accumulated squared error
        # is dim * sum_t (1 - alpha_{t-1}) / abar_{t-1}.
        sched = NoiseSchedule(steps=8, alpha_start=0.999, alpha_end=0.97)
        rng = np.random.default_rng(3)
        n, dim = 10_000, 4
        v0 = rng.standard_normal((n, dim))
        v = v0.copy()
        noises = {}
        for t in range(1, sched.steps + 1):
            noises[t] = rng.standard_normal((n, dim))
            v = forward_step(v, t, sched, noises[t])
        oracle = OraclePredictor()
        u = v
        for t in range(sched.steps, 0, -1):
            oracle.set_noise(noises[t])
            u = reverse_step(u, t, oracle, None, sched)
        sq_err = ((u - v0) ** 2).sum(axis=1)
        expected = dim * sum(
            (1.0 - sched.alpha(t - 1)) / sched.alpha_bar(t - 1)
            for t in range(1, sched.steps + 1))
        se = sq_err.std(ddof=1) / np.sqrt(n)
        assert abs(sq_err.mean() - expected) <= 3 * se

    def test_ddpm_mode_differs_and_needs_rng(self):
        sched = small_schedule()
        rng = np.random.default_rng(4)
        v = rng.standard_normal(4)
        eps = rng.standard_normal(4)
        with pytest.raises(ContractError):
            reverse_step(v, 5, OraclePredictor(eps), None, sched, mode="ddpm")
        a = reverse_step(v, 5, OraclePredictor(eps), None, sched,
                         mode="ddpm", rng=np.random.default_rng(8))
        b = reverse_step(v, 5, OraclePredictor(eps), None, sched)
        assert np.abs(a - b).max() > 1e-9


class TestLoss:
    def test_oracle_predictor_zero_loss(self):
        sched = small_schedule()
        rng = np.random.default_rng(5)
        eps = rng.standard_normal(6)
        loss = ldm_loss(rng.standard_normal(6), 3, eps, OraclePredictor(eps),
                        None, sched)
        assert abs(loss.item()) < 1e-12

    def test_zero_predictor_expected_loss_is_dimension(self):
        # E||eps||^2 = dim; averaged over many seeds within 3 SE.
        sched = small_schedule()
        rng = np.random.default_rng(6)
        dim, n = 8, 4000
        losses = [ldm_loss(rng.standard_normal(dim), 4,
                           rng.standard_normal(dim), ZeroPredictor(), None,
                           sched).item() for _ in range(n)]
        losses = np.asarray(losses)
        se = losses.std(ddof=1) / np.sqrt(n)
        assert abs(losses.mean() - dim) <= 3 * se

    def test_learned_predictor_tensor_and_numpy_paths_agree(self):
        from dualmmt.tensor import Tensor
        cfg = DiffusionConfig(condition_dim=4, predictor_hidden=8)
        pred = LearnedPredictor(5, 4, 8, 10, np.random.default_rng(7),
                                guidance=1.0)
        rng = np.random.default_rng(8)
        v = rng.standard_normal((3, 5)).astype(np.float32)
        c = rng.standard_normal(4).astype(np.float32)
        np.testing.assert_allclose(pred.predict(v, 2, c),
                                   pred.predict_tensor(Tensor(v), 2, c).data,
                                   atol=1e-6)

    def test_guidance_interpolates_conditional_and_unconditional(self):
        pred = LearnedPredictor(4, 3, 8, 10, np.random.default_rng(9),
                                guidance=7.5)
        rng = np.random.default_rng(10)
        v = rng.standard_normal(4).astype(np.float32)
        c = rng.standard_normal(3).astype(np.float32)
        guided = pred.predict(v, 3, c)
        pred.guidance = 1.0
        cond = pred.predict(v, 3, c)
        uncond = pred.predict(v, 3, np.zeros(3, dtype=np.float32))
        np.testing.assert_allclose(guided, uncond + 7.5 * (cond - uncond),
                                   rtol=1e-5)


class TestConditionVector:
    def test_bit_exact_per_sentence(self):
        a = condition_vector([4, 9, 2], 16)
        b = condition_vector([4, 9, 2], 16)
        np.testing.assert_array_equal(a, b)

    def test_different_sentences_differ(self):
        assert np.abs(condition_vector([4, 9, 2], 16)
                      - condition_vector([4, 9, 3], 16)).max() > 1e-6


class TestFeatureProvider:
    def make_provider(self, **kw):
        cfg = DiffusionConfig(diffusion_steps=6, condition_dim=8,
                              predictor_hidden=16)
        return FeatureProvider(feature_count=5, feature_dim=7, cfg=cfg, **kw)

    def test_reconstructed_deterministic(self):
        p1, p2 = self.make_provider(), self.make_provider()
        a = p1.provide([5, 6, 7], "reconstructed")
        b = p2.provide([5, 6, 7], "reconstructed")
        np.testing.assert_array_equal(a, b)
        assert a.shape == (5, 7) and a.dtype == np.float32

    def test_reconstructed_distinct_across_sentences(self):
        provider = self.make_provider()
        fixture = [[4 + i, 5, 6] for i in range(10)]
        outputs = [provider.provide(ids, "reconstructed") for ids in fixture]
        for i in range(len(outputs)):
            for j in range(i + 1, len(outputs)):
                assert np.abs(outputs[i] - outputs[j]).max() > 1e-9

    def test_noise_mode_standard_moments(self):
        # K*D = 3200 samples: mean within 3/sqrt(n), variance within 3*SE.
        provider = FeatureProvider(feature_count=50, feature_dim=64,
                                   cfg=DiffusionConfig(diffusion_steps=4,
                                                       condition_dim=4,
                                                       predictor_hidden=4))
        feats = provider.provide([11, 12], "noise")
        n = feats.size
        assert n == 3200
        assert abs(feats.mean()) <= 3.0 / np.sqrt(n)
        se_var = np.sqrt(2.0 / (n - 1))
        assert abs(feats.var(ddof=1) - 1.0) <= 3 * se_var

    def test_seed_changes_output(self):
        a = self.make_provider(seed=47).provide([4, 5], "reconstructed")
        b = self.make_provider(seed=48).provide([4, 5], "reconstructed")
        assert np.abs(a - b).max() > 1e-9

    def test_passthrough_requires_stored_features(self):
        provider = self.make_provider(authentic={3: np.ones((5, 7), np.float32)})
        np.testing.assert_array_equal(
            provider.provide([4, 5], "passthrough", sentence_key=3),
            np.ones((5, 7)))
        with pytest.raises(DataError, match="9"):
            provider.provide([4, 5], "passthrough", sentence_key=9)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ContractError):
            self.make_provider().provide([1], "imaginary")
