import numpy as np
import pytest
import torch

import mangotalk.motiongen
from mangotalk.audio import AudioTrack, IndicatorTrack
from mangotalk.errors import ConfigurationError
from mangotalk.motiongen import DenoiserConfig, DiffusionSchedule, MotionModel, MotionWindow


@pytest.fixture
def small_model(small_motion_config):
    torch.manual_seed(0)
    return MotionModel(small_motion_config)


def _features(T, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(T, 768)).astype(np.float32), rng.normal(size=(T, 768)).astype(np.float32)


class TestDiffusionSchedule:
    def test_cumulative_products(self):
        schedule = DiffusionSchedule(N=100)
        assert schedule.alpha_bars[0] == 1.0
        assert np.all(np.diff(schedule.alpha_bars) < 0)
        assert schedule.alpha_bars[-1] < 1e-2
        np.testing.assert_allclose(schedule.alpha_bars, np.cumprod(1 - schedule.betas))

    def test_strided_steps(self):
        schedule = DiffusionSchedule(N=50)
        steps = schedule.strided_steps(5)
        assert steps[0] == 50 and steps[-1] == 1 and len(steps) == 5
        assert steps == sorted(steps, reverse=True)
        assert schedule.strided_steps() == list(range(50, 0, -1))

    @pytest.mark.parametrize("n", [-1, 51])
    def test_step_out_of_range_raises(self, n):
        with pytest.raises(ValueError):
            DiffusionSchedule(N=50).check_step(n)

    def test_empty_schedule_raises(self):
        with pytest.raises(ValueError):
            DiffusionSchedule(N=0)


class TestForwardDiffusion:
    @pytest.mark.parametrize("step", [1, 250, 500])
    def test_moments(self, step):
        draws = 100_000
        schedule = DiffusionSchedule(N=500)
        window = MotionWindow(torch.zeros(2, 1), torch.ones(draws, 1, dtype=torch.float64))
        noisy = mangotalk.motiongen.forward_diffuse(window, step, schedule, torch.Generator().manual_seed(step)).curr
        alpha_bar = float(schedule.alpha_bars[step])
        # 1% of the mean, or five standard errors where the mean is close to zero
        mean_tolerance = max(0.01 * np.sqrt(alpha_bar), 5 * np.sqrt((1 - alpha_bar) / draws))
        assert noisy.mean().item() == pytest.approx(np.sqrt(alpha_bar), abs=mean_tolerance)
        assert noisy.var().item() == pytest.approx(1 - alpha_bar, rel=0.02)

    def test_step_zero_is_clean(self):
        window = MotionWindow(torch.zeros(2, 3), torch.randn(5, 3, dtype=torch.float64))
        noisy = mangotalk.motiongen.forward_diffuse(window, 0, DiffusionSchedule(N=10))
        torch.testing.assert_close(noisy.curr, window.curr, atol=0, rtol=0)
        assert noisy.prev is window.prev

    def test_q_sample_matches_closed_form(self):
        schedule = DiffusionSchedule(N=10)
        x0, noise = torch.randn(3, 4, 2, dtype=torch.float64), torch.randn(3, 4, 2, dtype=torch.float64)
        n = torch.tensor([0, 5, 10])
        out = mangotalk.motiongen.q_sample(x0, n, noise, schedule)
        torch.testing.assert_close(out[0], x0[0])
        a = schedule.alpha_bars[5]
        torch.testing.assert_close(out[1], np.sqrt(a) * x0[1] + np.sqrt(1 - a) * noise[1])


class TestAlignment:
    def test_masks(self):
        assert torch.equal(mangotalk.motiongen.alignment_mask(4), torch.eye(4, dtype=torch.bool))
        mask = mangotalk.motiongen.memory_mask(4)
        assert mask.shape == (5, 4)
        assert not mask[0].any()
        assert torch.equal(~mask[1:], torch.eye(4, dtype=torch.bool))

    def test_motion_tokens_attend_only_to_their_frame(self):
        torch.manual_seed(0)
        layer = mangotalk.motiongen.DenoiserLayer(16, 2, 32)
        L = 6
        x, memory = torch.randn(1, L + 1, 16), torch.randn(1, L, 16)
        _, weights = layer.cross_context(x, memory, mangotalk.motiongen.memory_mask(L))
        torch.testing.assert_close(weights[0, 1:], torch.eye(L))

        changed = memory.clone()
        changed[0, 2] += 1.0
        before = layer.cross_context(x, memory, mangotalk.motiongen.memory_mask(L))[0]
        after = layer.cross_context(x, changed, mangotalk.motiongen.memory_mask(L))[0]
        differs = (before - after).abs().amax(-1)[0] > 1e-6
        assert differs.tolist() == [True, False, False, True, False, False, False]


class TestDenoise:
    def test_output_covers_the_whole_window(self, small_model, small_motion_config):
        w_p, w = small_motion_config.prev_window, small_motion_config.window
        h = torch.randn(w_p + w, small_motion_config.dim.output_dim)
        out = mangotalk.motiongen.denoise(h, torch.zeros(w_p, 56), torch.randn(w, 56), 10, np.zeros(8), small_model.denoiser)
        assert out.shape == (w_p + w, 56)

    def test_length_mismatch_raises(self, small_model, small_motion_config):
        h = torch.randn(10, small_motion_config.dim.output_dim)
        with pytest.raises(ValueError):
            mangotalk.motiongen.denoise(h, torch.zeros(4, 56), torch.randn(5, 56), 10, np.zeros(8), small_model.denoiser)

    def test_width_mismatch_raises(self, small_model):
        with pytest.raises(ValueError):
            mangotalk.motiongen.denoise(torch.randn(9, 5), torch.zeros(4, 56), torch.randn(5, 56), 10, np.zeros(8), small_model.denoiser)


class TestSampling:
    def test_constant_denoiser_is_returned_exactly(self):
        target = torch.randn(1, 7, 3, dtype=torch.float64)

        def constant(h, x_prev, x_noisy, step, beta):
            return target.expand(h.shape[0], -1, -1)

        out = mangotalk.motiongen.sample_windows(
            torch.zeros(2, 7, 4), torch.zeros(2, 2, 3, dtype=torch.float64), torch.zeros(2, 8), DiffusionSchedule(N=20), constant
        )
        torch.testing.assert_close(out, target[:, 2:].expand(2, -1, -1), atol=0, rtol=0)

    def test_sample_window_is_seeded(self, small_model, small_motion_config):
        h = torch.randn(24, small_motion_config.dim.output_dim)
        schedule = DiffusionSchedule(N=50)
        draw = lambda seed: mangotalk.motiongen.sample_window(  # noqa: E731
            h, torch.zeros(4, 56), np.zeros(8), schedule, small_model.denoiser, torch.Generator().manual_seed(seed), 3
        )
        torch.testing.assert_close(draw(1), draw(1))
        assert not torch.allclose(draw(1), draw(2))
        assert draw(1).shape == (20, 56)

    def test_grad_last_keeps_only_final_graph(self, small_model, small_motion_config):
        h = torch.randn(1, 24, small_motion_config.dim.output_dim)
        out = mangotalk.motiongen.sample_windows(
            h, torch.zeros(1, 4, 56), torch.zeros(1, 8), DiffusionSchedule(N=50), small_model.denoiser, sample_steps=3, grad_last=True
        )
        out.sum().backward()
        assert small_model.denoiser.motion_out.weight.grad is not None


class TestWindowing:
    def test_window_slices(self):
        slices = list(mangotalk.motiongen.window_slices(45, 20, 4))
        assert [start for start, _ in slices] == [0, 20, 40]
        np.testing.assert_array_equal(slices[0][1], np.arange(-4, 20))
        assert slices[-1][1][-1] == 59

    def test_gather_frames_pads_with_zeros(self):
        array = np.arange(6, dtype=float).reshape(3, 2) + 1
        out = mangotalk.motiongen.gather_frames(array, np.array([-1, 0, 2, 3]))
        np.testing.assert_array_equal(out, [[0, 0], [1, 2], [5, 6], [0, 0]])


class TestGenerate:
    def test_frame_count_and_seed(self, small_model):
        h_self, h_other = _features(45)
        indicator = IndicatorTrack(np.r_[np.ones(20), np.zeros(25)])
        schedule = DiffusionSchedule(N=50)
        run = lambda seed: mangotalk.motiongen.generate_from_features(  # noqa: E731
            h_self, h_other, indicator, np.zeros(8), small_model, schedule, seed, sample_steps=3
        )
        first = run(0)
        assert first.params.shape == (45, 56)
        np.testing.assert_array_equal(first.params, run(0).params)
        assert not np.allclose(first.params, run(1).params)
        assert small_model.training

    def test_generate_from_audio(self, small_model):
        rng = np.random.default_rng(0)
        motion = mangotalk.motiongen.generate(
            AudioTrack(rng.uniform(-0.3, 0.3, 16000)),
            AudioTrack(rng.uniform(-0.3, 0.3, 16000)),
            IndicatorTrack(np.ones(25)),
            np.zeros(8),
            small_model,
            DiffusionSchedule(N=50),
            sample_steps=2,
        )
        assert len(motion) == 25

    def test_empty_clip_raises(self, small_model):
        h_self, h_other = _features(0)
        with pytest.raises(ValueError):
            mangotalk.motiongen.generate_from_features(
                h_self, h_other, IndicatorTrack(), np.zeros(8), small_model, DiffusionSchedule(N=50)
            )

    def test_feature_length_mismatch_raises(self, small_model):
        h_self, h_other = _features(10)
        with pytest.raises(ValueError):
            mangotalk.motiongen.generate_from_features(
                h_self, h_other, IndicatorTrack(np.ones(12)), np.zeros(8), small_model, DiffusionSchedule(N=50)
            )


    def test_output_rotations_are_wrapped(self, small_model, monkeypatch):
        def sample_with_a_full_turn(h, x_prev, beta, schedule, params, *args, **kwargs):
            window = torch.zeros(h.shape[0], small_model.config.window, small_model.config.motion_dim)
            window[..., 50] = 0.1 - 2 * np.pi
            window[..., 54] = 0.2
            return window

        monkeypatch.setattr(mangotalk.motiongen, "sample_windows", sample_with_a_full_turn)
        h_self, h_other = _features(25)
        motion = mangotalk.motiongen.generate_from_features(
            h_self, h_other, IndicatorTrack(np.ones(25)), np.zeros(8), small_model, DiffusionSchedule(N=50)
        )
        np.testing.assert_allclose(motion.theta_j[:, 0], 0.1, atol=1e-5)
        np.testing.assert_allclose(motion.params[:, 54], 0.2, atol=1e-6)


class TestConfig:
    def test_round_trip(self, small_motion_config):
        assert DenoiserConfig.from_dict(small_motion_config.to_dict()) == small_motion_config

    def test_unknown_keys_raise(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig.from_dict({"depth": 4})
        with pytest.raises(ConfigurationError):
            DenoiserConfig.from_dict({"dim": {"width": 4}})


class TestStage1Loss:
    def test_identical_static_motion_has_zero_loss(self, mini_model):
        motion = torch.zeros(2, 6, 56, dtype=torch.float64)
        motion[..., 0] = 0.5
        losses = mangotalk.motiongen.stage1_loss(motion, motion.clone(), np.zeros((2, 8)), mini_model)
        assert set(losses) == {"param", "jaw", "vert", "vel", "smooth", "total"}
        assert all(value.item() == 0 for value in losses.values())

    def test_expression_error_leaves_jaw_term_at_zero(self, mini_model):
        gt = torch.zeros(6, 56, dtype=torch.float64)
        pred = gt.clone()
        pred[:, 0] = 1.0
        losses = mangotalk.motiongen.stage1_loss(pred, gt, np.zeros(8), mini_model)
        assert losses["jaw"].item() == 0
        assert losses["param"].item() == pytest.approx(1 / 56)
        assert losses["vert"].item() > 0

    def test_smoothness_penalizes_jitter(self, mini_model):
        pred = torch.zeros(6, 56, dtype=torch.float64, requires_grad=True)
        jitter = torch.zeros(6, 56, dtype=torch.float64)
        jitter[::2, 50] = 0.1
        losses = mangotalk.motiongen.stage1_loss(pred + jitter, jitter.clone(), np.zeros(8), mini_model)
        assert losses["smooth"].item() > 0
        losses["total"].backward()
        assert pred.grad is not None

    def test_jaw_shifted_by_a_full_turn_is_not_an_error(self, mini_model):
        gt = torch.zeros(6, 56, dtype=torch.float64)
        gt[:, 50] = 0.1
        pred = gt.clone()
        pred[:, 50] = 0.1 - 2 * np.pi
        losses = mangotalk.motiongen.stage1_loss(pred, gt, np.zeros(8), mini_model)
        for key in ("param", "jaw", "vert", "total"):
            assert losses[key].item() == pytest.approx(0.0, abs=1e-10), key

    def test_shape_mismatch_raises(self, mini_model):
        with pytest.raises(ValueError):
            mangotalk.motiongen.stage1_loss(torch.zeros(5, 56), torch.zeros(6, 56), np.zeros(8), mini_model)

    def test_total_gradient_matches_finite_differences(self, mini_model):
        generator = torch.Generator().manual_seed(3)
        gt = 0.1 * torch.randn(4, 56, generator=generator, dtype=torch.float64)
        pred = (gt + 0.05 * torch.randn(4, 56, generator=generator, dtype=torch.float64)).requires_grad_(True)
        beta = np.linspace(-1.0, 1.0, 8)
        assert torch.autograd.gradcheck(
            lambda x: mangotalk.motiongen.stage1_loss(x, gt, beta, mini_model)["total"], (pred,), rtol=1e-2
        )
