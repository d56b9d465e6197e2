"""Schedule invariants, corruption algebra, guidance, and the DDIM loop."""
import numpy as np
import pytest

from ctxdiff import ops
from ctxdiff.diffusion import (NoiseSchedule, SamplerConfig, cfg_combine, ddim_step,
                               make_timestep_subsequence, predict_x0, q_sample,
                               sample, training_loss)
from ctxdiff.errors import ConfigError, ShapeError, UsageError
from ctxdiff.model import ContextDiffusion
from ctxdiff.rng import SeededRng
from ctxdiff.tensor import Tensor
from ctxdiff.unet import PRESETS

SCHED = NoiseSchedule.linear()


class TestSchedule:
    def test_linear_defaults(self):
        assert SCHED.timesteps == 1000
        assert SCHED.betas[0] == pytest.approx(1e-4)
        assert SCHED.betas[-1] == pytest.approx(0.02)
        assert SCHED.alphas[0] == pytest.approx(1 - 1e-4)

    def test_signal_level_strictly_decreasing_and_first_near_one(self):
        assert np.all(np.diff(SCHED.alpha_bars) < 0)
        assert SCHED.alpha_bars[0] > 0.99
        assert SCHED.alpha_bars[-1] > 0.0

    def test_rejects_degenerate_schedules(self):
        with pytest.raises(ConfigError):
            NoiseSchedule.linear(timesteps=1)
        with pytest.raises(ConfigError):
            NoiseSchedule.linear(beta_start=0.0)
        with pytest.raises(ConfigError):
            NoiseSchedule.linear(beta_end=1.5)

    def test_validate_catches_non_monotone_tables(self):
        bad = NoiseSchedule(betas=SCHED.betas.copy(), alphas=SCHED.alphas.copy(),
                            alpha_bars=np.ones_like(SCHED.alpha_bars))
        with pytest.raises(ConfigError):
            bad.validate()

    def test_alpha_bar_lookup(self):
        np.testing.assert_array_equal(SCHED.alpha_bar(np.array([0, 5])),
                                      SCHED.alpha_bars[[0, 5]])
        with pytest.raises(UsageError):
            SCHED.alpha_bar(np.array([0.5]))
        with pytest.raises(UsageError):
            SCHED.alpha_bar(1000)
        with pytest.raises(UsageError):
            SCHED.alpha_bar(-1)


class TestQSample:
    def test_zero_noise_scales_by_signal_level(self, rng):
        x0 = rng.normal((2, 3, 4, 4))
        z = q_sample(SCHED, x0, 100, np.zeros_like(x0))
        np.testing.assert_allclose(z, np.sqrt(SCHED.alpha_bars[100]).astype(np.float32) * x0,
                                   rtol=1e-6)

    def test_per_example_timesteps(self, rng):
        x0 = rng.normal((2, 5))
        eps = rng.normal((2, 5))
        z = q_sample(SCHED, x0, np.array([3, 900]), eps)
        for b, t in enumerate((3, 900)):
            np.testing.assert_allclose(z[b], q_sample(SCHED, x0[b], t, eps[b]), rtol=1e-6)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            q_sample(SCHED, rng.normal((2, 3)), 5, rng.normal((3, 2)))

    def test_monte_carlo_mean_matches_signal_term(self):
        g = SeededRng(99)
        x0 = np.array([0.5, -1.0, 2.0, 0.0], dtype=np.float64)
        t = 500
        draws = g.normal((10_000, 4), dtype=np.float64)
        zs = q_sample(SCHED, np.broadcast_to(x0, (10_000, 4)).copy(), t, draws)
        se = np.sqrt(1.0 - SCHED.alpha_bars[t]) / np.sqrt(10_000)
        assert np.all(np.abs(zs.mean(axis=0) - np.sqrt(SCHED.alpha_bars[t]) * x0) < 3 * se)

    def test_float32_inputs_stay_float32(self, rng):
        z = q_sample(SCHED, rng.normal((2, 3)), 10, rng.normal((2, 3)))
        assert z.dtype == np.float32


class _StubModel:
    """Test double standing in for the denoiser in loss-level checks."""

    def __init__(self, fn):
        self.fn = fn
        self.seen = []

    def predict_noise(self, z_t, t, cond, query=None):
        self.seen.append((np.asarray(z_t.data, dtype=np.float64), np.asarray(t)))
        return Tensor(self.fn(z_t.data).astype(np.float32))


class TestTrainingLoss:
    def _batch(self, rng):
        x0 = rng.normal((4, 3, 8, 8))
        t = np.array([0, 10, 500, 999])
        eps = rng.normal(x0.shape)
        return x0, t, eps

    def test_exact_noise_prediction_gives_zero_loss(self, rng):
        x0, t, eps = self._batch(rng)
        oracle = _StubModel(lambda z: eps)
        loss = training_loss(oracle, SCHED, x0, t, eps, cond=None)
        assert float(loss.data) == 0.0

    def test_zero_prediction_loss_near_noise_variance(self):
        g = SeededRng(5)
        x0 = np.zeros((16, 3, 32, 32), dtype=np.float32)
        t = np.full(16, 999)
        eps = g.normal(x0.shape)
        loss = training_loss(_StubModel(lambda z: np.zeros_like(z)), SCHED, x0, t, eps, None)
        assert abs(float(loss.data) - 1.0) < 0.05

    def test_model_sees_corrupted_input(self, rng):
        x0, t, eps = self._batch(rng)
        stub = _StubModel(lambda z: np.zeros_like(z))
        training_loss(stub, SCHED, x0, t, eps, cond=None)
        z_seen, t_seen = stub.seen[0]
        np.testing.assert_allclose(z_seen, q_sample(SCHED, x0, t, eps), atol=1e-6)
        np.testing.assert_array_equal(t_seen, t)

    def test_loss_non_negative(self, rng):
        x0, t, eps = self._batch(rng)
        stub = _StubModel(lambda z: np.full_like(z, 0.3))
        assert float(training_loss(stub, SCHED, x0, t, eps, None).data) >= 0.0


class TestCfgCombine:
    def test_exact_at_unit_weight(self, rng):
        u, c = rng.normal((2, 3)), rng.normal((2, 3))
        assert cfg_combine(u, c, 1.0) is c
        assert cfg_combine(u, c, 0.0) is u

    def test_affine_in_weight(self, rng):
        u, c = rng.normal((4, 4), dtype=np.float64), rng.normal((4, 4), dtype=np.float64)
        f = lambda w: cfg_combine(u, c, w)
        np.testing.assert_allclose(f(3.0) - f(2.0), f(2.0) - f(1.0), atol=1e-12)
        np.testing.assert_allclose(f(2.0), u + 2.0 * (c - u), atol=1e-12)

    def test_equal_estimates_unchanged_for_any_weight(self, rng):
        u = rng.normal((2, 2))
        np.testing.assert_array_equal(cfg_combine(u, u.copy(), 7.5), u)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            cfg_combine(rng.normal((2, 3)), rng.normal((3, 2)), 2.0)


class TestTimestepSubsequence:
    def test_stride_twenty_from_999(self):
        seq = make_timestep_subsequence(1000, 50)
        assert seq[0] == 999 and seq[-1] == 19 and len(seq) == 50
        assert np.all(np.diff(seq) == -20)

    def test_full_schedule(self):
        np.testing.assert_array_equal(make_timestep_subsequence(1000, 1000),
                                      np.arange(999, -1, -1))

    def test_single_step(self):
        np.testing.assert_array_equal(make_timestep_subsequence(1000, 1), [999])

    def test_strictly_decreasing_non_negative(self):
        for steps in (1, 3, 7, 50, 333):
            seq = make_timestep_subsequence(1000, steps)
            assert seq[0] == 999 and len(seq) == steps
            assert np.all(np.diff(seq) < 0) and seq[-1] >= 0

    def test_rejects_bad_step_counts(self):
        with pytest.raises(UsageError):
            make_timestep_subsequence(1000, 0)
        with pytest.raises(UsageError):
            make_timestep_subsequence(1000, 1001)
        with pytest.raises(UsageError):
            make_timestep_subsequence(1000, 2.5)


class TestDdimStep:
    def test_round_trip_recovers_clean_input_at_every_timestep(self):
        g = SeededRng(11)
        x0 = g.normal((1000, 6), dtype=np.float64)
        eps = g.normal((1000, 6), dtype=np.float64)
        t = np.arange(1000)
        x0_hat = predict_x0(SCHED, q_sample(SCHED, x0, t, eps), t, eps)
        assert np.abs(x0_hat - x0).max() < 1e-5

    def test_terminal_step_returns_clamped_clean_estimate(self):
        g = SeededRng(17)
        z = g.normal((2, 3, 4, 4), dtype=np.float64)
        eps = g.normal(z.shape, dtype=np.float64)
        out = ddim_step(SCHED, z, eps, t=19, t_prev=-1)
        np.testing.assert_allclose(
            out, np.clip(predict_x0(SCHED, z, 19, eps), -1.0, 1.0), atol=1e-12)

    def test_clean_estimate_is_clamped_to_data_range(self):
        # an absurd noise estimate at high t implies |x0| >> 1; the update
        # must not let that leak into the next state
        g = SeededRng(23)
        z = g.normal((1, 8), dtype=np.float64)
        eps = 50.0 * g.normal(z.shape, dtype=np.float64)
        out = ddim_step(SCHED, z, eps, 999, 800)
        ab_t, ab_prev = float(SCHED.alpha_bar(999)), float(SCHED.alpha_bar(800))
        bound = np.sqrt(ab_prev) + np.sqrt(1 - ab_prev) * (
            np.abs(z).max() + np.sqrt(ab_t)) / np.sqrt(1 - ab_t)
        assert np.abs(out).max() <= bound * (1 + 1e-12)

    def test_in_range_estimates_pass_through_unclamped(self):
        # when the implied x0 already lies in [-1, 1] the update is the
        # plain deterministic rule on the raw estimate
        g = SeededRng(29)
        x0 = np.tanh(g.normal((3, 5), dtype=np.float64))  # strictly inside
        eps = g.normal(x0.shape, dtype=np.float64)
        z = q_sample(SCHED, x0, 500, eps)
        ab_prev = float(SCHED.alpha_bar(480))
        expected = np.sqrt(ab_prev) * x0 + np.sqrt(1 - ab_prev) * eps
        np.testing.assert_allclose(ddim_step(SCHED, z, eps, 500, 480),
                                   expected, atol=1e-10)

    def test_deterministic_at_eta_zero(self, rng):
        z, eps = rng.normal((1, 3, 4, 4)), rng.normal((1, 3, 4, 4))
        a = ddim_step(SCHED, z, eps, 500, 480)
        b = ddim_step(SCHED, z, eps, 500, 480)
        assert a.tobytes() == b.tobytes()

    def test_eta_noise_contract(self, rng):
        z, eps = rng.normal((1, 4)), rng.normal((1, 4))
        with pytest.raises(UsageError):
            ddim_step(SCHED, z, eps, 500, 480, eta=0.5)
        noisy = ddim_step(SCHED, z, eps, 500, 480, eta=0.5, noise=rng.normal((1, 4)))
        quiet = ddim_step(SCHED, z, eps, 500, 480)
        assert not np.array_equal(noisy, quiet)
        with pytest.raises(ShapeError):
            ddim_step(SCHED, z, eps, 500, 480, eta=0.5, noise=rng.normal((2, 4)))

    def test_direction_validation(self, rng):
        z, eps = rng.normal((1, 4)), rng.normal((1, 4))
        with pytest.raises(UsageError):
            ddim_step(SCHED, z, eps, 480, 500)
        with pytest.raises(UsageError):
            ddim_step(SCHED, z, eps, 480, 480)
        with pytest.raises(UsageError):
            ddim_step(SCHED, z, eps, 480, -2)
        with pytest.raises(UsageError):
            ddim_step(SCHED, z, eps, 480, 400, eta=1.5, noise=rng.normal((1, 4)))


class TestSamplerConfig:
    def test_defaults_valid(self):
        SamplerConfig().validate(1000)

    def test_rejections(self):
        for bad in (SamplerConfig(steps=0), SamplerConfig(steps=2000),
                    SamplerConfig(eta=1.5), SamplerConfig(guidance_weight=float("nan")),
                    SamplerConfig(seed=1.0)):
            with pytest.raises(ConfigError):
                bad.validate(1000)


@pytest.fixture(scope="module")
def small_model():
    return ContextDiffusion(PRESETS["small"], seed=3)


FAST = SamplerConfig(steps=4, guidance_weight=3.0, seed=12)


class TestSampleLoop:
    def _inputs(self, seed=21, k=2):
        g = SeededRng(seed)
        ctx = [g.uniform((3, 32, 32)) for _ in range(k)]
        query = g.uniform((1, 3, 32, 32))
        return ["a red circle on black"], [ctx], query

    def test_deterministic_and_in_range(self, small_model):
        prompts, ctxs, q = self._inputs()
        a = sample(small_model, SCHED, prompts, ctxs, q, FAST)
        b = sample(small_model, SCHED, prompts, ctxs, q, FAST)
        assert a.tobytes() == b.tobytes()
        assert a.shape == (1, 3, 32, 32) and a.dtype == np.float32
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_context_order_invariance(self, small_model):
        prompts, ctxs, q = self._inputs(k=3)
        a = sample(small_model, SCHED, prompts, ctxs, q, FAST)
        b = sample(small_model, SCHED, prompts, [ctxs[0][::-1]], q, FAST)
        assert a.tobytes() == b.tobytes()

    def test_unit_guidance_runs_one_pass_per_step(self, small_model):
        prompts, ctxs, q = self._inputs()
        calls = []
        orig = small_model.predict_noise

        class Counting:
            cfg = small_model.cfg
            encode_conditioning = small_model.encode_conditioning

            def predict_noise(self, *a, **kw):
                calls.append(1)
                return orig(*a, **kw)

        sample(Counting(), SCHED, prompts, ctxs, q, SamplerConfig(steps=3, guidance_weight=1.0))
        assert len(calls) == 3

    def test_context_only_regime_ignores_prompt_text(self, small_model):
        prompts, ctxs, q = self._inputs()
        a = sample(small_model, SCHED, prompts, ctxs, q, FAST, regime="C")
        b = sample(small_model, SCHED, [""], ctxs, q, FAST, regime="C")
        assert a.tobytes() == b.tobytes()

    def test_prompt_only_regime_ignores_context_images(self, small_model):
        prompts, ctxs, q = self._inputs()
        a = sample(small_model, SCHED, prompts, ctxs, q, FAST, regime="P")
        b = sample(small_model, SCHED, prompts, [[]], q, FAST, regime="P")
        assert a.tobytes() == b.tobytes()

    def test_uncond_mode_controls_what_the_second_pass_strips(self, small_model):
        prompts, ctxs, q = self._inputs()
        seen = []

        class Spy:
            cfg = small_model.cfg
            predict_noise = small_model.predict_noise

            def encode_conditioning(self, p, c):
                seen.append((list(p), [len(s) for s in c]))
                return small_model.encode_conditioning(p, c)

        cfg2 = SamplerConfig(steps=2, guidance_weight=3.0, seed=12)
        sample(Spy(), SCHED, prompts, ctxs, q, cfg2, uncond="both")
        assert seen[1] == ([""], [0])  # prompt and context both dropped
        seen.clear()
        sample(Spy(), SCHED, prompts, ctxs, q, cfg2, uncond="prompt")
        assert seen[1] == ([""], [len(ctxs[0])])  # context kept

    def test_input_validation(self, small_model):
        prompts, ctxs, q = self._inputs()
        with pytest.raises(UsageError):
            sample(small_model, SCHED, prompts, ctxs, q, FAST, regime="X")
        with pytest.raises(UsageError):
            sample(small_model, SCHED, prompts, ctxs, q, FAST, uncond="neither")
        with pytest.raises(UsageError):
            sample(small_model, SCHED, prompts + ["extra"], ctxs, q, FAST)
