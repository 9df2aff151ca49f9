import numpy as np
import pytest
import torch

import mangotalk.morphable
from mangotalk.morphable import SLIT_GAP, build_mini_model, decode, decode_zero_pose, lip_opening


def _motion(model, psi=None, jaw=(0.0, 0.0, 0.0), head=(0.0, 0.0, 0.0)):
    psi = np.zeros(model.E) if psi is None else psi
    return torch.as_tensor(np.concatenate([psi, jaw, head]), dtype=torch.float64)


class TestBuildMiniModel:
    def test_dimensions(self, mini_model):
        assert (mini_model.V, mini_model.S, mini_model.E) == (642, 8, 50)
        assert mini_model.triangles.shape == (2 * 642 - 4, 3)
        assert mini_model.lip_upper_idx.shape == mini_model.lip_lower_idx.shape
        assert set(mini_model.lip_upper_idx) <= set(mini_model.lip_all_idx)
        assert mini_model.upper_face_idx.size > 0

    def test_default_mesh_is_a_subdivided_icosahedron(self, mini_model):
        edges = np.sort(mini_model.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        unique, shared = np.unique(edges, axis=0, return_counts=True)
        assert np.all(shared == 2)
        degree = np.bincount(unique.ravel(), minlength=mini_model.V)
        assert np.count_nonzero(degree == 5) == 12
        assert np.count_nonzero(degree == 6) == 642 - 12

    @pytest.mark.parametrize("V", [42, 100])
    def test_any_vertex_count_gives_a_closed_outward_mesh(self, V):
        model = build_mini_model(seed=0, V=V)
        assert model.triangles.shape == (2 * V - 4, 3)
        corners = model.template[model.triangles].astype(np.float64)
        volume = np.sum(corners[:, 0] * np.cross(corners[:, 1], corners[:, 2])) / 6
        assert volume == pytest.approx(4 / 3 * np.pi * 0.075 * 0.10 * 0.09, rel=0.25)

    def test_deterministic(self):
        first, second = build_mini_model(seed=3, V=100), build_mini_model(seed=3, V=100)
        np.testing.assert_array_equal(first.template, second.template)
        np.testing.assert_array_equal(first.expr_basis, second.expr_basis)

    def test_too_few_vertices_raises(self):
        with pytest.raises(ValueError):
            build_mini_model(seed=0, V=11)


class TestDecode:
    def test_zero_parameters_give_template_exactly(self, mini_model):
        vertices = decode(mini_model, np.zeros(mini_model.S), _motion(mini_model).float())
        assert torch.equal(vertices, torch.as_tensor(mini_model.template))

    def test_expression_is_linear(self, mini_model):
        rng = np.random.default_rng(0)
        beta = np.zeros(mini_model.S)
        a, b = rng.normal(size=mini_model.E), rng.normal(size=mini_model.E)
        template = torch.as_tensor(mini_model.template, dtype=torch.float64)
        offset = lambda psi: decode(mini_model, beta, _motion(mini_model, psi)) - template  # noqa: E731
        torch.testing.assert_close(offset(a + b), offset(a) + offset(b), atol=1e-6, rtol=0)

    def test_head_rotation_is_an_isometry(self, mini_model):
        beta = np.random.default_rng(1).normal(size=mini_model.S)
        still = decode(mini_model, beta, _motion(mini_model))
        turned = decode(mini_model, beta, _motion(mini_model, head=(0.3, -0.5, 0.2)))
        torch.testing.assert_close(torch.cdist(turned, turned), torch.cdist(still, still), atol=1e-6, rtol=0)

    def test_batched_motion(self, mini_model):
        params = torch.zeros(4, 5, mini_model.E + 6, dtype=torch.float64)
        assert decode(mini_model, np.zeros(mini_model.S), params).shape == (4, 5, mini_model.V, 3)

    def test_wrong_widths_raise(self, mini_model):
        with pytest.raises(ValueError):
            decode(mini_model, np.zeros(mini_model.S), torch.zeros(mini_model.E + 5))
        with pytest.raises(ValueError):
            decode(mini_model, np.zeros(mini_model.S + 1), torch.zeros(mini_model.E + 6))

    def test_zero_pose_ignores_head_rotation(self, mini_model):
        beta = np.zeros(mini_model.S)
        posed = _motion(mini_model, jaw=(0.1, 0, 0), head=(0.4, 0.1, 0))
        expected = decode(mini_model, beta, _motion(mini_model, jaw=(0.1, 0, 0)))
        torch.testing.assert_close(decode_zero_pose(mini_model, beta, posed), expected)


class TestLipOpening:
    def test_closed_mouth_opening_is_near_the_slit(self, mini_model):
        opening = lip_opening(mini_model, mini_model.template.astype(np.float64))
        assert SLIT_GAP * 0.99 <= opening < 2 * SLIT_GAP

    def test_positive_jaw_rotation_opens_the_mouth(self, mini_model):
        beta = np.zeros(mini_model.S)
        openings = [
            float(lip_opening(mini_model, decode(mini_model, beta, _motion(mini_model, jaw=(angle, 0, 0)))))
            for angle in (0.0, 0.05, 0.1, 0.15)
        ]
        assert openings == sorted(openings)
        assert openings[-1] > openings[0] + 0.002

    def test_tensor_and_array_agree(self, mini_model):
        vertices = decode(mini_model, np.zeros(mini_model.S), _motion(mini_model, jaw=(0.1, 0, 0)))
        assert float(lip_opening(mini_model, vertices)) == pytest.approx(lip_opening(mini_model, vertices.numpy()))

    def test_wrong_shape_raises(self, mini_model):
        with pytest.raises(ValueError):
            lip_opening(mini_model, np.zeros((10, 3)))


def test_axis_angle_to_matrix_is_orthonormal():
    r = torch.tensor([[0.3, -0.2, 0.9], [0.0, 0.0, 0.0]], dtype=torch.float64)
    matrices = mangotalk.morphable.axis_angle_to_matrix(r)
    identity = torch.eye(3, dtype=torch.float64).expand(2, 3, 3)
    torch.testing.assert_close(matrices @ matrices.transpose(-1, -2), identity)
    torch.testing.assert_close(matrices[1], identity[1])
