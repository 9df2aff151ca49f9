import numpy as np
import pytest
import torch

import mangotalk.encoders
from mangotalk.errors import ConfigurationError


class TestDeskAudioEncoder:
    def test_native_rate_and_width(self):
        samples = np.random.default_rng(0).uniform(-0.5, 0.5, 16000)
        features, times = mangotalk.encoders.get_audio_encoder("desk").encode(samples, 16000)
        assert features.shape == (times.shape[0], 768)
        np.testing.assert_allclose(np.diff(times), 0.01)

    def test_fresh_instances_agree(self):
        samples = np.random.default_rng(1).uniform(-0.5, 0.5, 8000)
        first, _ = mangotalk.encoders.DeskAudioEncoder().encode(samples, 16000)
        second, _ = mangotalk.encoders.DeskAudioEncoder().encode(samples, 16000)
        np.testing.assert_array_equal(first, second)

    def test_other_sample_rate_is_resampled(self):
        samples = np.random.default_rng(2).uniform(-0.5, 0.5, 8000)
        features, times = mangotalk.encoders.get_audio_encoder("desk").encode(samples, 8000)
        assert times[-1] == pytest.approx(1.0, abs=0.02)
        assert np.all(np.isfinite(features))

    def test_short_input_is_padded(self):
        features, _ = mangotalk.encoders.get_audio_encoder("desk").encode(np.zeros(100), 16000)
        assert features.shape == (1, 768)


class TestDeskImageEncoder:
    def test_pyramid_shapes(self):
        encoder = mangotalk.encoders.get_image_encoder("desk")
        maps = encoder.pyramid(torch.rand(2, 3, 64, 64))
        assert [tuple(m.shape) for m in maps] == [(2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8)]
        assert maps[-1].shape[1] == encoder.feature_dim

    def test_constant_image_gives_constant_features(self):
        encoder = mangotalk.encoders.get_image_encoder("desk")
        coarse = encoder.pyramid(torch.full((1, 3, 32, 32), 0.3))[-1]
        torch.testing.assert_close(coarse, coarse[..., :1, :1].expand_as(coarse))

    def test_double_precision_is_kept(self):
        encoder = mangotalk.encoders.get_image_encoder("desk")
        maps = encoder.pyramid(torch.rand(1, 3, 16, 16, dtype=torch.float64))
        assert all(m.dtype == torch.float64 for m in maps)


class TestRegistry:
    def test_instances_are_cached(self):
        assert mangotalk.encoders.get_audio_encoder("desk") is mangotalk.encoders.get_audio_encoder("desk")

    def test_unknown_names_raise(self):
        with pytest.raises(ConfigurationError):
            mangotalk.encoders.get_audio_encoder("no-such-encoder")
        with pytest.raises(ConfigurationError):
            mangotalk.encoders.get_image_encoder("no-such-encoder")

    def test_register_custom_encoder(self, monkeypatch):
        class RampEncoder:
            feature_dim = 2

            def encode(self, samples, sample_rate):
                times = np.arange(10) / 10
                return np.stack([times, -times], axis=1), times

        monkeypatch.setattr(mangotalk.encoders, "AUDIO_ENCODER_REGISTRY", dict(mangotalk.encoders.AUDIO_ENCODER_REGISTRY))
        mangotalk.encoders.register_audio_encoder("ramp", RampEncoder)
        features, _ = mangotalk.encoders.get_audio_encoder("ramp").encode(np.zeros(10), 16000)
        assert features.shape == (10, 2)
