import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcase.dp import (DpConfig, OptimizerState, PrivacyLedger, account_epsilon, clip_gradient, clip_per_example,
                        dp_step, noisy_mean, plain_step, rdp_epsilon)
from fedcase.errors import ConfigError, EmptyInputError, NumericError
from fedcase.model import ClassWeights, init_model, loss_and_grads_arrays

from oracles import dp_sgd_oracle, rdp_epsilon_grid


def norm(arrays):
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


class TestClip:
    def test_scales_to_bound(self):
        (out,) = clip_gradient([np.array([3.0, 4.0])], 1.0)
        np.testing.assert_allclose(out, [0.6, 0.8], rtol=0, atol=1e-15)

    def test_within_bound_unchanged(self):
        (out,) = clip_gradient([np.array([0.1, 0.0])], 1.0)
        np.testing.assert_array_equal(out, [0.1, 0.0])

    def test_random_1024(self, rng):
        g = rng.normal(size=1024)
        (out,) = clip_gradient([g], 0.5)
        assert abs(np.linalg.norm(out) - min(0.5, np.linalg.norm(g))) < 1e-12

    def test_global_norm_across_arrays(self):
        out = clip_gradient([np.array([3.0]), np.array([[4.0]])], 1.0)
        assert out[0][0] == pytest.approx(0.6) and out[1][0, 0] == pytest.approx(0.8)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            clip_gradient([np.array([np.inf, 0.0])], 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 10.0), st.floats(1e-3, 1e3))
    def test_clipped_norm_never_exceeds_bound(self, seed, clip, scale):
        rng = np.random.default_rng(seed)
        g = [scale * rng.normal(size=(3, 4)), scale * rng.normal(size=5)]
        assert norm(clip_gradient(g, clip)) <= clip * (1 + 1e-12)

    def test_per_example_matches_single(self, rng):
        per = [rng.normal(size=(5, 3, 2)), rng.normal(size=(5, 2))]
        clipped = clip_per_example(per, 0.7)
        for i in range(5):
            ref = clip_gradient([g[i] for g in per], 0.7)
            for a, b in zip(clipped, ref):
                np.testing.assert_allclose(a[i], b, rtol=0, atol=1e-15)


class TestDpStep:
    def model_and_grads(self, rng, n=4):
        m = init_model(6, (4,), 3, seed=3)
        X = rng.random((n, 6))
        y = np.array([0, 1] * (n // 2) + [1] * (n % 2))
        _, per = loss_and_grads_arrays(m, X, y, ClassWeights(1.2, 0.8), "per_example")
        return m, per, X, y

    def test_reduces_to_sgd_single_example(self, rng):
        m, per, _, _ = self.model_and_grads(rng, 1)
        cfg = DpConfig(clip_norm=1e9, noise_multiplier=0.0, learning_rate=0.1)
        new, _ = dp_step(m, per, cfg, OptimizerState(), np.random.default_rng(0))
        for p, q, g in zip(new.params(), m.params(), per):
            assert p.tobytes() == (q - 0.1 * g[0]).tobytes()

    def test_cancelling_examples_leave_model_unchanged(self):
        m = init_model(2, (2,), 2, seed=0)
        per = [np.stack([p * 0 + 1.5, p * 0 - 1.5]) for p in m.params()]
        cfg = DpConfig(clip_norm=1e9, noise_multiplier=0.0, learning_rate=0.3)
        new, _ = dp_step(m, per, cfg, OptimizerState(), np.random.default_rng(0))
        assert new.equals(m)

    def test_matches_straight_line_oracle(self, rng):
        m, per, _, _ = self.model_and_grads(rng, 4)
        cfg = DpConfig(clip_norm=1.0, noise_multiplier=0.8, learning_rate=0.05)
        new, _ = dp_step(m, per, cfg, OptimizerState(), np.random.default_rng(2024))
        ref = dp_sgd_oracle(m.params(), per, 1.0, 0.8, 0.05, np.random.default_rng(2024))
        for a, b in zip(new.params(), ref):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("optimizer", ["sgd", "adam"])
    def test_disabled_privacy_is_bitwise_plain_step(self, rng, optimizer):
        m, per, X, y = self.model_and_grads(rng, 6)
        _, mean = loss_and_grads_arrays(m, X, y, ClassWeights(1.2, 0.8), "batch_mean")
        cfg = DpConfig(clip_norm=math.inf, noise_multiplier=0.0, optimizer=optimizer)
        s1, s2 = OptimizerState(), OptimizerState()
        a, b = m, m
        for _ in range(3):  # several steps so Adam moments matter
            a, s1 = dp_step(a, per, cfg, s1, np.random.default_rng(0))
            b, s2 = plain_step(b, mean, cfg, s2)
        assert a.equals(b)

    def test_noise_reproducible(self, rng):
        m, per, _, _ = self.model_and_grads(rng)
        cfg = DpConfig()
        a, _ = dp_step(m, per, cfg, OptimizerState(), np.random.default_rng(5))
        b, _ = dp_step(m, per, cfg, OptimizerState(), np.random.default_rng(5))
        c, _ = dp_step(m, per, cfg, OptimizerState(), np.random.default_rng(6))
        assert a.equals(b) and not a.equals(c)

    def test_empty(self):
        m = init_model(2, (2,), 2)
        with pytest.raises(EmptyInputError):
            dp_step(m, [np.zeros((0,) + p.shape) for p in m.params()], DpConfig(), OptimizerState(),
                    np.random.default_rng(0))

    def test_adam_first_step_is_signed_lr(self):
        m = init_model(2, (2,), 2, seed=1)
        grads = [np.full(p.shape, 0.3) for p in m.params()]
        cfg = DpConfig(optimizer="adam", learning_rate=0.01, enabled=False)
        new, _ = plain_step(m, grads, cfg, OptimizerState())
        for p, q in zip(new.params(), m.params()):
            np.testing.assert_allclose(q - p, 0.01 * 0.3 / (0.3 + 1e-8), rtol=1e-12)

    def test_noisy_mean_uses_one_draw_per_array(self):
        per = [np.zeros((3, 2)), np.zeros((3, 4))]
        cfg = DpConfig(clip_norm=2.0, noise_multiplier=0.5)
        out = noisy_mean(per, cfg, np.random.default_rng(1))
        rng = np.random.default_rng(1)
        np.testing.assert_array_equal(out[0], rng.normal(0, 1.0, 2) / 3)
        np.testing.assert_array_equal(out[1], rng.normal(0, 1.0, 4) / 3)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(clip_norm=0), dict(noise_multiplier=-1), dict(learning_rate=-0.1),
                                    dict(delta=1.0), dict(optimizer="rmsprop"), dict(adam_betas=(1.0, 0.9))])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DpConfig(**kw)

    def test_optimizer_default_learning_rates(self):
        assert DpConfig().learning_rate == 0.25
        assert DpConfig(optimizer="adam").learning_rate == 0.001


class TestAccountant:
    def test_no_steps(self):
        assert rdp_epsilon(0, 1.0, 1e-5) == pytest.approx(math.log(1e5) / 63, rel=1e-15)

    def test_grid_oracle_value(self):
        # brute-force minimum over alpha = 2..64, computed before the build
        assert rdp_epsilon(100, 1.0, 1e-5) == pytest.approx(111.51292546497022, rel=1e-14)

    def test_zero_sigma_is_infinite(self):
        assert rdp_epsilon(10, 0.0, 1e-5) == math.inf

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 5), st.floats(0.05, 20.0), st.floats(1e-12, 0.5))
    def test_matches_grid(self, steps, sigma, delta):
        assert rdp_epsilon(steps, sigma, delta) == pytest.approx(rdp_epsilon_grid(steps, sigma, delta), rel=1e-12)

    @given(st.integers(0, 10 ** 5), st.floats(0.05, 20.0))
    def test_doubling_steps(self, steps, sigma):
        assert rdp_epsilon(2 * steps, sigma, 1e-5) >= rdp_epsilon(steps, sigma, 1e-5)

    @given(st.integers(1, 10 ** 4), st.floats(0.05, 20.0), st.floats(1e-10, 0.1), st.floats(1e-10, 0.1))
    def test_delta_monotone(self, steps, sigma, d1, d2):
        lo, hi = sorted((d1, d2))
        assert rdp_epsilon(steps, sigma, lo) >= rdp_epsilon(steps, sigma, hi)

    def test_ledger(self):
        led = PrivacyLedger(0.1, 0.8, 1e-5)
        assert led.epsilon_estimate == 0.0
        led.record(5)
        assert led.steps_taken == 5
        assert led.epsilon_estimate == account_epsilon(led) == rdp_epsilon(5, 0.8, 1e-5)
        assert PrivacyLedger(0.1, math.inf, 1e-5, 100).epsilon_estimate == 0.0

    def test_ledger_non_decreasing(self):
        led = PrivacyLedger(0.1, 1.1, 1e-5)
        prev = led.epsilon_estimate
        for _ in range(50):
            led.record(7)
            assert led.epsilon_estimate >= prev
            prev = led.epsilon_estimate
