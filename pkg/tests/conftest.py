import pytest

from mangotalk.audio import DimConfig
from mangotalk.morphable import build_mini_model
from mangotalk.motiongen import DenoiserConfig
from mangotalk.renderer import RendererConfig
from mangotalk.synth import synth_clip


@pytest.fixture(scope="session")
def mini_model():
    return build_mini_model(seed=0)


@pytest.fixture
def small_motion_config():
    return DenoiserConfig(
        dim=DimConfig(proj_dim=16, n_layers=1, n_heads=2),
        d_model=32,
        n_heads=2,
        n_layers=2,
        ff_dim=64,
        window=20,
        prev_window=4,
        steps=50,
    )


@pytest.fixture
def small_renderer_config():
    return RendererConfig(image_size=64, appearance_dim=4, base_dim=8, hidden_dim=16, refiner_width=8)


@pytest.fixture(scope="session")
def small_clip(mini_model):
    return synth_clip(seed=1, T=40, model=mini_model, image_size=64, render_frames=False)


@pytest.fixture(scope="session")
def rendered_clip(mini_model):
    return synth_clip(seed=2, T=20, model=mini_model, image_size=64)
