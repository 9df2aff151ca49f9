from dataclasses import replace
import math

import numpy as np
import pytest
import torch

import mangotalk.renderer
from mangotalk.camera import default_camera
from mangotalk.errors import ConfigurationError
from mangotalk.morphable import decode
from mangotalk.renderer import GaussianSet, MetaGaussianRenderer, RendererConfig


def _gaussians(mu, appearance, opacity=1.0, log_scale=math.log(0.01), dtype=torch.float64):
    mu = torch.as_tensor(mu, dtype=dtype)
    G = mu.shape[0]
    return GaussianSet(
        mu=mu,
        rot=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=dtype).expand(G, 4),
        scale=torch.full((G, 3), log_scale, dtype=dtype),
        opacity=torch.full((G,), opacity, dtype=dtype),
        appearance=torch.as_tensor(appearance, dtype=dtype),
    )


@pytest.fixture
def small_renderer(mini_model, small_renderer_config):
    torch.manual_seed(0)
    return MetaGaussianRenderer(mini_model, small_renderer_config)


@pytest.fixture
def reference_state(small_renderer, mini_model):
    image = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    return small_renderer.prepare(image, np.zeros(mini_model.S), default_camera(64))


class TestSplat:
    def test_single_gaussian_centre(self):
        camera = default_camera(33)
        features, alpha = mangotalk.renderer.splat(_gaussians([[0.0, 0.0, 0.0]], [[1.0]]), camera)
        assert features[16, 16, 0].item() == pytest.approx(1.0)
        assert alpha[16, 16].item() == pytest.approx(1.0)
        assert alpha[0, 0].item() == 0
        torch.testing.assert_close(features[..., 0], features[..., 0].flip(0).flip(1))

    def test_front_gaussian_occludes(self):
        camera = default_camera(33)
        front = [0.0, 0.0, 0.1]
        back = [0.0, 0.0, -0.1]
        colours = [[1.0, 0.0], [0.0, 1.0]]
        features, _ = mangotalk.renderer.splat(_gaussians([front, back], colours), camera)
        torch.testing.assert_close(features[16, 16], torch.tensor([1.0, 0.0], dtype=torch.float64))
        swapped, _ = mangotalk.renderer.splat(_gaussians([back, front], colours[::-1]), camera)
        torch.testing.assert_close(swapped, features)

    def test_nothing_visible(self):
        camera = default_camera(16)
        features, alpha = mangotalk.renderer.splat(GaussianSet.empty(3, torch.float64), camera)
        assert features.shape == (16, 16, 3) and not features.any() and not alpha.any()
        behind = _gaussians([[0.0, 0.0, 1.0]], [[1.0, 1.0, 1.0]])
        features, alpha = mangotalk.renderer.splat(behind, camera)
        assert not features.any() and not alpha.any()

    def test_chunking_does_not_change_the_image(self):
        rng = np.random.default_rng(0)
        gaussians = _gaussians(rng.uniform(-0.03, 0.03, (9, 3)), rng.uniform(0, 1, (9, 2)), opacity=0.7)
        camera = default_camera(24)
        whole, _ = mangotalk.renderer.splat(gaussians, camera, chunk=256)
        chunked, _ = mangotalk.renderer.splat(gaussians, camera, chunk=2)
        torch.testing.assert_close(whole, chunked)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        gaussians = _gaussians(
            rng.uniform(-0.04, 0.04, (7, 3)), rng.uniform(0, 1, (7, 2)), opacity=0.6, log_scale=math.log(0.03)
        )
        camera = default_camera(16)
        mu = gaussians.mu.clone().requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda positions: mangotalk.renderer.splat(replace(gaussians, mu=positions), camera)[0], (mu,)
        )


class TestGeometry:
    def test_quaternion_to_matrix(self):
        identity = mangotalk.renderer.quaternion_to_matrix(torch.tensor([[2.0, 0.0, 0.0, 0.0]]))
        torch.testing.assert_close(identity[0], torch.eye(3))
        matrices = mangotalk.renderer.quaternion_to_matrix(torch.randn(5, 4, dtype=torch.float64))
        torch.testing.assert_close(matrices @ matrices.transpose(-1, -2), torch.eye(3, dtype=torch.float64).expand(5, 3, 3))

    def test_triangle_frames_are_orthonormal(self, mini_model):
        vertices = torch.as_tensor(mini_model.template, dtype=torch.float64)
        centres, frames = mangotalk.renderer.triangle_frames(vertices, torch.as_tensor(mini_model.triangles))
        assert centres.shape == (mini_model.triangles.shape[0], 3)
        identity = torch.eye(3, dtype=torch.float64).expand_as(frames)
        torch.testing.assert_close(frames.transpose(-1, -2) @ frames, identity)

    def test_uv_layout_assigns_distinct_cells(self):
        points = np.random.default_rng(0).normal(size=(50, 3))
        side, cells = mangotalk.renderer.uv_layout(points)
        assert side == 8
        assert len(set(cells.tolist())) == 50
        assert cells.max() < side * side


class TestReference:
    def test_small_image_raises(self):
        with pytest.raises(ValueError):
            mangotalk.renderer.encode_reference(np.zeros((32, 64, 3), dtype=np.uint8))

    def test_identity_embedding_is_the_mean_feature(self):
        ref = mangotalk.renderer.encode_reference(np.random.default_rng(0).uniform(0, 1, (64, 64, 3)).astype(np.float32))
        assert ref.feature_map.shape == (8, 8, 64)
        torch.testing.assert_close(ref.f_id, ref.feature_map.mean(dim=(0, 1)))

    def test_unknown_encoder_raises(self):
        with pytest.raises(ConfigurationError):
            mangotalk.renderer.encode_reference(np.zeros((64, 64, 3), dtype=np.uint8), "no-such-encoder")

    def test_prepare_builds_both_sets(self, reference_state, mini_model):
        assert len(reference_state.template) == mini_model.V
        assert len(reference_state.uv) == mini_model.triangles.shape[0]
        assert torch.all((reference_state.template.opacity > 0) & (reference_state.template.opacity < 1))
        torch.testing.assert_close(
            reference_state.template.rot.norm(dim=-1), torch.ones(mini_model.V)
        )

    def test_uv_offsets_are_bounded(self, reference_state, small_renderer):
        vertices = reference_state.vertices
        centres, _ = mangotalk.renderer.triangle_frames(vertices, small_renderer.triangles)
        edge = mangotalk.renderer.mean_edge_length(vertices, small_renderer.triangles)
        offsets = (reference_state.uv.mu - centres).norm(dim=-1)
        assert torch.all(offsets <= edge * 1.0001)


class TestAnimate:
    def test_rigid_translation_moves_every_gaussian(self, reference_state):
        shift = torch.tensor([0.01, -0.02, 0.005])
        moved = reference_state.vertices + shift
        for gaussians in (reference_state.template, reference_state.uv):
            animated = mangotalk.renderer.animate(gaussians, reference_state.vertices, moved)
            torch.testing.assert_close(animated.mu, gaussians.mu + shift, atol=1e-6, rtol=0)
            assert animated.appearance is gaussians.appearance

    def test_shape_mismatch_raises(self, reference_state):
        with pytest.raises(ValueError):
            mangotalk.renderer.animate(reference_state.template, reference_state.vertices, reference_state.vertices[:-1])

    def test_unanchored_set_raises(self):
        gaussians = _gaussians([[0.0, 0.0, 0.0]], [[1.0]])
        with pytest.raises(ValueError):
            mangotalk.renderer.animate(gaussians, torch.zeros(3, 3), torch.zeros(3, 3))


class TestRefine:
    def test_untrained_refiner_squashes_coarse_colour(self):
        refiner = mangotalk.renderer.Refiner(5, 8)
        features = torch.zeros(12, 12, 5)
        torch.testing.assert_close(mangotalk.renderer.refine(features, refiner), torch.full((12, 12, 3), 0.5))

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            mangotalk.renderer.refine(torch.zeros(12, 12, 4), mangotalk.renderer.Refiner(5, 8))


class TestRender:
    def test_image_range_and_vertex_gradient(self, small_renderer, reference_state, mini_model):
        motion = torch.zeros(mini_model.E + 6)
        motion[50] = 0.1
        vertices = decode(mini_model, np.zeros(mini_model.S), motion).requires_grad_(True)
        image = small_renderer.render(vertices, reference_state, default_camera(64))
        assert image.shape == (64, 64, 3)
        assert torch.all((image > 0) & (image < 1))
        image.sum().backward()
        assert vertices.grad.abs().sum() > 0

    def test_stage2_loss_gradient_to_a_motion_parameter(self, mini_model, small_renderer_config):
        torch.manual_seed(0)
        renderer = MetaGaussianRenderer(mini_model, small_renderer_config).double()
        camera = default_camera(64)
        image = np.random.default_rng(1).integers(0, 256, (64, 64, 3), dtype=np.uint8)
        state = renderer.prepare(image, np.zeros(mini_model.S), camera)
        target = torch.rand(64, 64, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)

        def loss(jaw):
            E = mini_model.E
            motion = torch.cat([torch.zeros(E, dtype=torch.float64), jaw.reshape(1), torch.zeros(5, dtype=torch.float64)])
            vertices = decode(mini_model, np.zeros(mini_model.S), motion)
            return mangotalk.renderer.stage2_loss(renderer.render(vertices, state, camera), target)["total"]

        jaw = torch.tensor(0.1, dtype=torch.float64, requires_grad=True)
        loss(jaw).backward()
        eps = 1e-4
        with torch.no_grad():
            numeric = (loss(jaw + eps) - loss(jaw - eps)) / (2 * eps)
        assert jaw.grad.item() == pytest.approx(numeric.item(), rel=5e-2, abs=1e-9)

    def test_template_only_renderer(self, mini_model):
        torch.manual_seed(0)
        config = RendererConfig(image_size=64, appearance_dim=4, base_dim=8, hidden_dim=16, refiner_width=8, use_uv=False)
        renderer = MetaGaussianRenderer(mini_model, config)
        state = renderer.prepare(np.zeros((64, 64, 3), dtype=np.uint8), np.zeros(mini_model.S), default_camera(64))
        assert state.uv is None
        with torch.no_grad():
            image = renderer.render(state.vertices, state, default_camera(64))
        assert image.shape == (64, 64, 3)

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ConfigurationError):
            RendererConfig.from_dict({"size": 64})


class TestStage2Loss:
    def test_identical_images(self):
        image = torch.rand(2, 16, 16, 3)
        losses = mangotalk.renderer.stage2_loss(image, image.clone())
        assert losses["total"].item() == 0

    def test_photometric_term(self):
        gt = torch.full((16, 16, 3), 0.4)
        losses = mangotalk.renderer.stage2_loss(gt + 0.1, gt)
        assert losses["pho"].item() == pytest.approx(0.1, abs=1e-6)
        assert losses["per"].item() > 0

    def test_uint8_target(self):
        pred = torch.zeros(16, 16, 3)
        losses = mangotalk.renderer.stage2_loss(pred, np.full((16, 16, 3), 255, dtype=np.uint8))
        assert losses["pho"].item() == pytest.approx(1.0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            mangotalk.renderer.stage2_loss(torch.zeros(16, 16, 3), torch.zeros(8, 16, 3))
