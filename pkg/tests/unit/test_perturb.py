import csv

import numpy as np
import pytest
import torch

import mangotalk.perturb
from mangotalk.audio import IndicatorTrack
from mangotalk.metrics import mesh_metrics
from mangotalk.motiongen import DiffusionSchedule, MotionModel, generate


def test_default_alphas():
    alphas = mangotalk.perturb.default_alphas()
    assert len(alphas) == 21
    assert alphas[:3] == [0.0, 0.05, 0.1]
    assert alphas[-1] == 1.0


@pytest.mark.parametrize(
    "alpha, length, expected",
    [(0.0, 20, 0), (0.15, 20, 3), (0.05, 30, 2), (1.0, 7, 7)],
)
def test_flip_length(alpha, length, expected):
    assert mangotalk.perturb.flip_length(alpha, length) == expected


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_flip_length_out_of_range_raises(alpha):
    with pytest.raises(ValueError):
        mangotalk.perturb.flip_length(alpha, 10)


class TestPerturbIndicator:
    @pytest.fixture
    def indicator(self):
        return IndicatorTrack(np.r_[np.ones(25), np.zeros(25)])

    def test_zero_alpha_keeps_the_track(self, indicator):
        np.testing.assert_array_equal(mangotalk.perturb.perturb_indicator(indicator, 0.0).bits, indicator.bits)

    def test_one_contiguous_segment_is_flipped(self, indicator):
        perturbed = mangotalk.perturb.perturb_indicator(indicator, 0.3, seed=4)
        changed = np.flatnonzero(perturbed.bits != indicator.bits)
        assert changed.size == 15
        np.testing.assert_array_equal(np.diff(changed), 1)

    def test_full_flip(self, indicator):
        np.testing.assert_array_equal(mangotalk.perturb.perturb_indicator(indicator, 1.0).bits, 1 - indicator.bits)

    def test_seeded_and_involutive(self, indicator):
        once = mangotalk.perturb.perturb_indicator(indicator, 0.2, seed=9)
        np.testing.assert_array_equal(once.bits, mangotalk.perturb.perturb_indicator(indicator, 0.2, seed=9).bits)
        twice = mangotalk.perturb.perturb_indicator(once, 0.2, seed=9)
        np.testing.assert_array_equal(twice.bits, indicator.bits)


class TestRobustnessSweep:
    def test_sweep(self, small_motion_config, small_clip, mini_model, tmp_path):
        torch.manual_seed(0)
        model = MotionModel(small_motion_config)
        schedule = DiffusionSchedule(N=small_motion_config.steps)
        result = mangotalk.perturb.robustness_sweep(
            model, schedule, small_clip, mini_model, alphas=[0.0, 0.5], seed=3, sample_steps=2, out_dir=tmp_path
        )
        assert result.alphas == [0.0, 0.5]
        assert all(mve >= 0 for mve in result.mve)

        reference = generate(
            small_clip.audio_self, small_clip.audio_other, small_clip.indicator, small_clip.beta, model, schedule, seed=3, sample_steps=2
        )
        expected = mesh_metrics(reference, small_clip.motion, small_clip.beta.beta, mini_model)["MVE"]
        assert result.mve[0] == pytest.approx(expected)

        with open(tmp_path / "robustness.csv", newline="") as file:
            rows = list(csv.reader(file))
        assert rows[0] == ["alpha", "MVE"]
        assert [row[0] for row in rows[1:]] == ["0.00", "0.50"]
        assert (tmp_path / "robustness.png").read_bytes()[:4] == b"\x89PNG"
