import json

import numpy as np
import pytest

import mangotalk.cli
import mangotalk.io
import mangotalk.metrics
import mangotalk.training
from mangotalk.audio import DimConfig
from mangotalk.motiongen import DenoiserConfig
from mangotalk.renderer import RendererConfig
from mangotalk.synth import synth_clip
from mangotalk.training import TrainConfig

TINY_SETTINGS = {
    "iterations": 2,
    "batch_stage1": 2,
    "batch_stage2": 2,
    "batch_joint": 1,
    "n_render_frames": 2,
    "sample_steps": 2,
    "log_every": 1,
    "motion": {
        "dim": {"proj_dim": 16, "n_layers": 1, "n_heads": 2},
        "d_model": 32,
        "n_heads": 2,
        "n_layers": 2,
        "ff_dim": 64,
        "window": 20,
        "prev_window": 4,
        "steps": 50,
    },
    "renderer": {"image_size": 64, "appearance_dim": 4, "base_dim": 8, "hidden_dim": 16, "refiner_width": 8},
}


@pytest.fixture(autouse=True)
def restore_torch_state():
    yield
    import torch

    torch.use_deterministic_algorithms(False)


def _run(*argv):
    code = mangotalk.cli.main([str(arg) for arg in argv])
    assert code == 0, f"mangotalk {argv[0]} exited with {code}"


def test_pipeline_from_synthetic_data_to_metric_report(tmp_path):
    data, ckpt = tmp_path / "data", tmp_path / "ckpt"
    config = tmp_path / "train.json"
    config.write_text(json.dumps(TINY_SETTINGS))

    _run("synth-data", "--out", data, "--clips", 3, "--frames", 20, "--image-size", 64, "--seed", 1)
    _run("train-stage1", "--data", data, "--out", ckpt / "stage1", "--config", config, "--log", tmp_path / "s1.jsonl")
    _run("train-stage2", "--data", data, "--out", ckpt / "stage2", "--config", config)
    _run(
        "train-joint",
        "--data", data,
        "--ckpt1", ckpt / "stage1",
        "--ckpt2", ckpt / "stage2",
        "--out", ckpt / "joint",
        "--config", config,
    )  # fmt: skip
    assert len((tmp_path / "s1.jsonl").read_text().splitlines()) == 2

    test_clip = data / json.loads((data / "dataset.json").read_text())["splits"]["test"][0]
    pred = tmp_path / "pred"
    _run(
        "generate",
        "--ckpt", ckpt / "joint" / "stage1",
        "--render-ckpt", ckpt / "joint" / "stage2",
        "--clip", test_clip,
        "--out", pred,
        "--ddim-steps", 2,
        "--seed", 4,
    )  # fmt: skip
    motion = mangotalk.io.read_motion(pred / "motion.f32", 20, 56)
    assert np.all(np.isfinite(motion.params))
    frames = mangotalk.io.read_frames(pred / "frames")
    assert frames.shape == (20, 64, 64, 3)

    report = tmp_path / "report.json"
    _run("evaluate", "--pred", pred, "--gt", test_clip, "--report", report)
    metrics = json.loads(report.read_text())["metrics"]
    for key in ("LVE", "MVE", "FDD", "MOD", "MTM", "PSNR", "SSIM"):
        assert metrics[key] is not None
    assert 0 <= metrics["MTM"] <= mangotalk.metrics.MAX_LAG
    assert metrics["PSNR"] > 0

    sweep = tmp_path / "sweep"
    _run(
        "robustness-sweep",
        "--ckpt", ckpt / "joint" / "stage1",
        "--clip", test_clip,
        "--out", sweep,
        "--alphas", 0, 0.5, 1,
        "--ddim-steps", 2,
    )  # fmt: skip
    assert len((sweep / "robustness.csv").read_text().splitlines()) == 4
    assert (sweep / "robustness.png").is_file()


def test_generation_is_reproducible_through_the_cli(tmp_path):
    data, ckpt = tmp_path / "data", tmp_path / "stage1"
    config = tmp_path / "train.json"
    config.write_text(json.dumps(TINY_SETTINGS))
    _run("synth-data", "--out", data, "--clips", 2, "--frames", 20, "--image-size", 64)
    _run("train-stage1", "--data", data, "--out", ckpt, "--config", config)

    blobs = []
    for name in ("a", "b"):
        _run("generate", "--ckpt", ckpt, "--clip", data / "clip0001", "--out", tmp_path / name, "--seed", 9, "--ddim-steps", 2)
        blobs.append((tmp_path / name / "motion.f32").read_bytes())
    assert blobs[0] == blobs[1]
    assert not (tmp_path / "a" / "frames").exists()


@pytest.fixture(scope="module")
def overfit_clip(mini_model):
    return synth_clip(seed=11, T=40, model=mini_model, image_size=64)


def _overfit_config(**overrides):
    settings = dict(
        iterations=300,
        batch_stage1=8,
        batch_stage2=4,
        lr=1e-3,
        warmup=10,
        log_every=50,
        motion=DenoiserConfig(
            dim=DimConfig(proj_dim=16, n_layers=1, n_heads=2),
            d_model=64, n_heads=2, n_layers=2, ff_dim=128, window=20, prev_window=4, steps=50,
        ),
        renderer=RendererConfig(image_size=64, appearance_dim=4, base_dim=16, hidden_dim=32, refiner_width=16),
    )
    settings.update(overrides)
    return TrainConfig(**settings)


def _mean(values):
    return float(np.mean(values))


@pytest.mark.slow
def test_stage1_overfits_a_single_clip(overfit_clip, mini_model):
    run = mangotalk.training.pretrain_stage1([overfit_clip], _overfit_config(), morphable=mini_model)
    total = run.losses("pretrain1", "total")
    assert len(total) == 300
    assert _mean(total[-20:]) < 0.5 * _mean(total[:20])


@pytest.mark.slow
def test_stage2_overfits_a_single_clip(overfit_clip, mini_model):
    config = _overfit_config(phase="pretrain2", iterations=200)
    run = mangotalk.training.pretrain_stage2([overfit_clip], config, morphable=mini_model)
    pho = run.losses("pretrain2", "pho")
    assert _mean(pho[-20:]) < 0.8 * _mean(pho[:20])
