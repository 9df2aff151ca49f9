import hashlib
import json

import pytest
import torch

import mangotalk.training
from mangotalk.audio import DimConfig
from mangotalk.errors import ConfigurationError
from mangotalk.morphable import build_mini_model
from mangotalk.motiongen import DenoiserConfig
from mangotalk.renderer import RendererConfig
from mangotalk.training import TrainConfig


def _config(**overrides):
    settings = dict(
        iterations=2,
        batch_stage1=2,
        batch_stage2=2,
        batch_joint=1,
        n_render_frames=2,
        sample_steps=2,
        log_every=1,
        motion=DenoiserConfig(
            dim=DimConfig(proj_dim=16, n_layers=1, n_heads=2),
            d_model=32, n_heads=2, n_layers=2, ff_dim=64, window=20, prev_window=4, steps=50,
        ),
        renderer=RendererConfig(image_size=64, appearance_dim=4, base_dim=8, hidden_dim=16, refiner_width=8),
    )
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory, mini_model, rendered_clip):
    root = tmp_path_factory.mktemp("ckpt")
    stage1 = mangotalk.training.pretrain_stage1([rendered_clip], _config(), root / "stage1", mini_model)
    stage2 = mangotalk.training.pretrain_stage2([rendered_clip], _config(phase="pretrain2"), root / "stage2", mini_model)
    return root, stage1, stage2


class TestTrainConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"phase": "finetune"},
            {"iterations": 0},
            {"n_render_frames": 21},
            {"lr_schedule_stage1": "step"},
            {"indicator_noise_alpha": 1.5},
        ],
    )
    def test_invalid_settings_raise(self, overrides):
        with pytest.raises(ValueError):
            _config(**overrides)

    def test_from_dict_builds_nested_settings(self, tmp_path):
        path = tmp_path / "train.json"
        path.write_text(
            json.dumps({"iterations": 7, "stage1_weights": {"vel": 1.0}, "motion": {"window": 30, "dim": {"proj_dim": 8}}}),
            encoding="utf-8",
        )
        config = TrainConfig.from_json(path)
        assert config.iterations == 7
        assert config.stage1_weights.vel == 1.0 and config.stage1_weights.jaw == 0.2
        assert config.motion.window == 30 and config.motion.dim.proj_dim == 8

    @pytest.mark.parametrize(
        "data", [{"epochs": 3}, {"stage2_weights": {"gan": 1.0}}, {"renderer": {"size": 64}}]
    )
    def test_unknown_keys_raise(self, data):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(data)

    def test_round_trip(self):
        config = _config(seed=4)
        assert TrainConfig.from_dict(config.to_dict()) == config


class TestHelpers:
    def test_warmup_cosine_schedule(self):
        parameter = torch.nn.Parameter(torch.zeros(1))
        optimizer = torch.optim.SGD([parameter], lr=1.0)
        scheduler = mangotalk.training._lr_scheduler(optimizer, "warmup-cosine", 10, 2)
        rates = []
        for _ in range(10):
            rates.append(optimizer.param_groups[0]["lr"])
            optimizer.step()
            scheduler.step()
        assert rates[:2] == [pytest.approx(0.5), pytest.approx(1.0)]
        assert rates == sorted(rates[:2]) + sorted(rates[2:], reverse=True)
        assert rates[-1] < 0.1

    def test_frozen_restores_flags(self):
        module = torch.nn.Linear(2, 2)
        module.bias.requires_grad_(False)
        with mangotalk.training.frozen(module):
            assert not any(p.requires_grad for p in module.parameters())
        assert module.weight.requires_grad and not module.bias.requires_grad

    def test_parameter_digest(self):
        module = torch.nn.Linear(2, 2)
        digest = mangotalk.training.parameter_digest(module)
        assert digest == mangotalk.training.parameter_digest(module)
        with torch.no_grad():
            module.bias += 1
        assert digest != mangotalk.training.parameter_digest(module)


class TestPretraining:
    def test_stage1_history_and_checkpoint(self, checkpoints):
        root, stage1, _ = checkpoints
        assert [entry["iter"] for entry in stage1.history] == [0, 1]
        assert set(stage1.history[0]["losses"]) == {"param", "jaw", "vert", "vel", "smooth", "total"}
        model, schedule = mangotalk.training.load_stage1(root / "stage1")
        assert schedule.N == 50
        assert mangotalk.training.parameter_digest(model) == mangotalk.training.parameter_digest(stage1.motion_model)

    def test_stage1_is_reproducible(self, checkpoints, rendered_clip, mini_model):
        _, stage1, _ = checkpoints
        again = mangotalk.training.pretrain_stage1([rendered_clip], _config(), morphable=mini_model)
        assert again.losses("pretrain1", "total") == stage1.losses("pretrain1", "total")
        assert mangotalk.training.parameter_digest(again.motion_model) == mangotalk.training.parameter_digest(stage1.motion_model)

    def test_loss_log_file(self, tmp_path, small_clip, mini_model):
        log_path = tmp_path / "logs" / "stage1.jsonl"
        mangotalk.training.pretrain_stage1([small_clip], _config(log_path=str(log_path)), morphable=mini_model)
        lines = [json.loads(line) for line in log_path.read_text(encoding="utf-8").splitlines()]
        assert [line["phase"] for line in lines] == ["pretrain1", "pretrain1"]

    def test_stage1_rejects_mismatched_model(self, small_clip):
        with pytest.raises(ConfigurationError):
            mangotalk.training.pretrain_stage1([small_clip], _config(), morphable=build_mini_model(seed=0, E=10))

    def test_no_clips_raise(self, mini_model):
        with pytest.raises(ConfigurationError):
            mangotalk.training.pretrain_stage1([], _config(), morphable=mini_model)

    def test_stage2_needs_frames(self, small_clip, mini_model):
        with pytest.raises(ConfigurationError):
            mangotalk.training.pretrain_stage2([small_clip], _config(phase="pretrain2"), morphable=mini_model)

    def test_stage2_checkpoint(self, checkpoints, mini_model):
        root, _, stage2 = checkpoints
        assert set(stage2.history[-1]["losses"]) == {"pho", "per", "total"}
        renderer = mangotalk.training.load_stage2(root / "stage2", mini_model)
        assert mangotalk.training.parameter_digest(renderer) == mangotalk.training.parameter_digest(stage2.renderer)


class TestCheckpointErrors:
    def test_wrong_stage(self, checkpoints, mini_model):
        root, _, _ = checkpoints
        with pytest.raises(ConfigurationError):
            mangotalk.training.load_stage1(root / "stage2")
        with pytest.raises(ConfigurationError):
            mangotalk.training.load_stage2(root / "stage1", mini_model)

    def test_vertex_mismatch(self, checkpoints):
        root, _, _ = checkpoints
        with pytest.raises(ConfigurationError):
            mangotalk.training.load_stage2(root / "stage2", build_mini_model(seed=0, V=100))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigurationError):
            mangotalk.training.load_stage1(tmp_path / "nothing")


class TestJointTraining:
    def test_alternating_updates(self, checkpoints, rendered_clip, mini_model, tmp_path):
        root, _, _ = checkpoints
        config = _config(phase="joint", iterations=1, batch_stage2=1)
        run = mangotalk.training.joint_train(
            root / "stage1", root / "stage2", [rendered_clip], config, tmp_path / "joint", mini_model
        )
        assert [entry["phase"] for entry in run.history] == ["joint-stage1", "joint-stage2"]
        assert {"total", "image_total", "image_pho"} <= set(run.history[0]["losses"])

        model, _ = mangotalk.training.load_stage1(root / "stage1")
        renderer = mangotalk.training.load_stage2(root / "stage2", mini_model)
        assert mangotalk.training.parameter_digest(run.motion_model) != mangotalk.training.parameter_digest(model)
        assert mangotalk.training.parameter_digest(run.renderer) != mangotalk.training.parameter_digest(renderer)
        assert (tmp_path / "joint" / "stage1" / "checkpoint.json").is_file()
        assert (tmp_path / "joint" / "stage2" / "checkpoint.json").is_file()

    def test_each_step_leaves_the_other_stage_untouched(self, checkpoints, rendered_clip, mini_model, monkeypatch):
        root, _, _ = checkpoints
        before, after = [], []
        original = torch.optim.Adam.step

        def recording_step(optimizer, *args, **kwargs):
            before.append(_digest(optimizer.param_groups[0]["params"]))
            result = original(optimizer, *args, **kwargs)
            after.append(_digest(optimizer.param_groups[0]["params"]))
            return result

        monkeypatch.setattr(torch.optim.Adam, "step", recording_step)
        run = mangotalk.training.joint_train(
            root / "stage1", root / "stage2", [rendered_clip], _config(phase="joint", iterations=1, batch_stage2=1),
            morphable=mini_model,
        )
        renderer = mangotalk.training.load_stage2(root / "stage2", mini_model)
        assert len(before) == 2
        assert before[0] != after[0]
        assert before[1] == _digest(renderer.parameters())
        assert after[0] == _digest(run.motion_model.parameters())


def _digest(parameters):
    digest = hashlib.sha256()
    for parameter in parameters:
        digest.update(parameter.detach().numpy().tobytes())
    return digest.hexdigest()
