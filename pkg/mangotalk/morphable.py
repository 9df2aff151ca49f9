"""Linear 3D morphable face model.

The model follows the interface of the FLAME head model reduced to the parts the motion
pipeline needs: vertices are the template plus linear shape and expression offsets, the
lower face is articulated by a jaw rotation about a pivot and the whole head is rotated
rigidly about the model origin. Meshes are stored in meters.

`build_mini_model` procedurally creates a small head-like model (an icosphere stretched to an
ellipsoid, 642 vertices at subdivision level 3 by default, with a lip slit) so the complete
pipeline can be trained and tested without external assets.
Expression basis column 0 opens the lip slit and column 1 is a smile that keeps the lips
closed; the synthetic data generator relies on both.

Classes:
    MorphableModel: Template, bases, jaw articulation and semantic vertex index sets.

Functions:
    build_mini_model: Build a deterministic procedural model.
    axis_angle_to_matrix: Rodrigues' formula for batches of axis-angle vectors.
    decode: Decode shape and motion parameters to vertices.
    decode_zero_pose: Decode a motion sequence with the head rotation removed.
    lip_opening: Mean distance between paired upper and lower lip vertices.
    project: Pinhole projection of vertices (see `mangotalk.camera`).
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from scipy.spatial import ConvexHull

from mangotalk.camera import project  # noqa: F401  (part of the morphable interface)
from mangotalk.motion import MotionFrame, MotionSequence, ShapeParams


@dataclass
class MorphableModel:
    """A linear morphable face model.

    Attributes:
        template: Neutral vertices, shape (V, 3), meters.
        shape_basis: Shape offsets per coefficient, shape (V, 3, S).
        expr_basis: Expression offsets per coefficient, shape (V, 3, E).
        jaw_weights: Per-vertex jaw skinning weight in [0, 1], shape (V,).
        jaw_pivot: Jaw rotation centre, shape (3,), meters.
        triangles: Vertex index triples, shape (F, 3).
        lip_upper_idx: Upper lip keypoint vertices, paired with `lip_lower_idx`.
        lip_lower_idx: Lower lip keypoint vertices.
        lip_all_idx: All lip region vertices.
        upper_face_idx: Upper face vertices.
    """

    template: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    jaw_weights: np.ndarray
    jaw_pivot: np.ndarray
    triangles: np.ndarray
    lip_upper_idx: np.ndarray
    lip_lower_idx: np.ndarray
    lip_all_idx: np.ndarray
    upper_face_idx: np.ndarray

    def __post_init__(self):
        V = self.template.shape[0]
        if self.template.shape != (V, 3):
            raise ValueError(f"Template must be (V, 3), got {self.template.shape}")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (V, 3):
            raise ValueError(f"Shape basis must be (V, 3, S), got {self.shape_basis.shape}")
        if self.expr_basis.ndim != 3 or self.expr_basis.shape[:2] != (V, 3):
            raise ValueError(f"Expression basis must be (V, 3, E), got {self.expr_basis.shape}")
        if self.jaw_weights.shape != (V,):
            raise ValueError("Jaw weights need one entry per vertex.")
        if np.any(self.jaw_weights < 0) or np.any(self.jaw_weights > 1):
            raise ValueError("Jaw weights must lie within [0, 1].")
        for name in ("template", "shape_basis", "expr_basis", "jaw_weights", "jaw_pivot"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values.")
        for name in ("triangles", "lip_upper_idx", "lip_lower_idx", "lip_all_idx", "upper_face_idx"):
            indices = getattr(self, name)
            if indices.size and (indices.min() < 0 or indices.max() >= V):
                raise ValueError(f"{name} references vertices outside [0, {V}).")
        if self.lip_upper_idx.shape != self.lip_lower_idx.shape:
            raise ValueError("Upper and lower lip keypoints must be paired.")

    @property
    def V(self) -> int:
        return self.template.shape[0]

    @property
    def S(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def E(self) -> int:
        return self.expr_basis.shape[2]


# Procedural head proportions, meters.
_HEAD_RADII = np.array([0.075, 0.10, 0.09])
_MOUTH_Y = -0.045
_MOUTH_HALF_WIDTH = 0.025
SLIT_GAP = 0.0005


_GOLDEN = (1 + np.sqrt(5)) / 2
_ICOSAHEDRON_VERTICES = np.array(
    [
        [-1, _GOLDEN, 0], [1, _GOLDEN, 0], [-1, -_GOLDEN, 0], [1, -_GOLDEN, 0],
        [0, -1, _GOLDEN], [0, 1, _GOLDEN], [0, -1, -_GOLDEN], [0, 1, -_GOLDEN],
        [_GOLDEN, 0, -1], [_GOLDEN, 0, 1], [-_GOLDEN, 0, -1], [-_GOLDEN, 0, 1],
    ]
)  # fmt: skip
_ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)  # fmt: skip


def _icosphere_level(V: int) -> Optional[int]:
    """Subdivision level of an icosphere with V vertices, or None if no icosphere has V vertices."""
    level = 0
    while 10 * 4**level + 2 < V:
        level += 1
    return level if 10 * 4**level + 2 == V else None


def _icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere after `level` midpoint subdivisions: (10 * 4**level + 2) vertices, 20 * 4**level faces."""
    points = list(_ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES[0]))
    faces = _ICOSAHEDRON_FACES
    for _ in range(level):
        midpoints: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in midpoints:
                point = points[i] + points[j]
                points.append(point / np.linalg.norm(point))
                midpoints[key] = len(points) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        faces = np.array(refined)
    return np.array(points), faces.astype(np.int64)


def _fibonacci_sphere(n: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(n) + 0.5
    y = 1 - 2 * i / n
    r = np.sqrt(1 - y * y)
    phi = i * np.pi * (3 - np.sqrt(5))
    points = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    return points, ConvexHull(points).simplices.copy()


def _ellipsoid_z(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, b, c = _HEAD_RADII
    return c * np.sqrt(np.clip(1 - (x / a) ** 2 - (y / b) ** 2, 0, None))


def _smooth_fields(rng: np.random.Generator, points: np.ndarray, count: int, amplitude: float) -> np.ndarray:
    """Random localized displacement fields, shape (V, 3, count)."""
    directions = points / np.linalg.norm(points, axis=1, keepdims=True)
    fields = np.zeros((points.shape[0], 3, count))
    for k in range(count):
        centre = rng.normal(size=3)
        centre /= np.linalg.norm(centre)
        width = rng.uniform(0.3, 0.7)
        falloff = np.exp(-np.sum((directions - centre) ** 2, axis=1) / width**2)
        direction = rng.normal(size=3) * 0.5 + centre
        fields[:, :, k] = amplitude * falloff[:, None] * direction / np.linalg.norm(direction)
    return fields


def build_mini_model(seed: int, V: int = 642, S: int = 8, E: int = 50) -> MorphableModel:
    """Build a deterministic procedural head model.

    Args:
        seed: Seed of the random shape and expression fields.
        V: Number of vertices, at least 12. Icosphere counts (12, 42, 162, 642, ...) give a
            regular subdivided icosahedron; other counts a convex hull of a Fibonacci point set.
        S: Number of shape coefficients.
        E: Number of expression coefficients, at least 1.

    Returns:
        The model. Identical arguments always produce bit-identical models.
    """
    if V < 12:
        raise ValueError(f"The mini model needs at least 12 vertices, got {V}")
    if S < 1 or E < 1:
        raise ValueError(f"Basis sizes must be positive, got S={S}, E={E}")
    rng = np.random.default_rng(seed)

    level = _icosphere_level(V)
    unit, triangles = _icosphere(level) if level is not None else _fibonacci_sphere(V)
    normals = np.cross(unit[triangles[:, 1]] - unit[triangles[:, 0]], unit[triangles[:, 2]] - unit[triangles[:, 0]])
    inward = np.sum(normals * unit[triangles].mean(axis=1), axis=1) < 0
    triangles[inward] = triangles[inward][:, [0, 2, 1]]

    template = unit * _HEAD_RADII
    # Identity bumps along the surface direction.
    bumps = _smooth_fields(rng, unit, 4, 0.003)
    template = template + np.einsum("vck,k->vc", bumps, rng.uniform(-1, 1, 4))

    # Lip keypoints: paired vertices placed exactly on both sides of the slit.
    n_pairs = min(8, max(1, V // 16))
    xs = np.linspace(-_MOUTH_HALF_WIDTH, _MOUTH_HALF_WIDTH, n_pairs) if n_pairs > 1 else np.zeros(1)
    upper, lower = [], []
    taken = np.zeros(V, dtype=bool)
    for x in xs:
        for y, out in ((_MOUTH_Y + SLIT_GAP / 2, upper), (_MOUTH_Y - SLIT_GAP / 2, lower)):
            target = np.array([x, y, _ellipsoid_z(np.array(x), np.array(y))])
            distance = np.linalg.norm(template - target, axis=1)
            distance[taken] = np.inf
            index = int(np.argmin(distance))
            taken[index] = True
            template[index] = target
            out.append(index)
    lip_upper_idx = np.array(upper, dtype=np.int64)
    lip_lower_idx = np.array(lower, dtype=np.int64)

    x, y, z = template[:, 0], template[:, 1], template[:, 2]
    front = np.clip(z / 0.02, 0, 1)
    in_lip_region = (np.abs(x) <= 1.3 * _MOUTH_HALF_WIDTH) & (np.abs(y - _MOUTH_Y) <= 0.012) & (z > 0)
    lip_all_idx = np.union1d(np.flatnonzero(in_lip_region), np.concatenate([upper, lower])).astype(np.int64)
    upper_face_idx = np.flatnonzero((y > 0.0) & (z > 0)).astype(np.int64)

    jaw_weights = (
        np.clip((_MOUTH_Y - y) / (SLIT_GAP / 2), 0, 1)
        * front
        * np.clip((0.07 - np.abs(x)) / 0.02, 0, 1)
    )
    jaw_pivot = np.array([0.0, _MOUTH_Y + 0.02, -0.01])

    expr_basis = np.zeros((V, 3, E))
    mouth_x = np.exp(-((x / (1.5 * _MOUTH_HALF_WIDTH)) ** 2))
    mouth_band = np.exp(-(((y - _MOUTH_Y) / 0.015) ** 2)) * front
    is_upper = y >= _MOUTH_Y
    expr_basis[:, 1, 0] = np.where(is_upper, 0.003, -0.008) * mouth_x * mouth_band
    if E > 1:
        smile_band = np.exp(-(((y - _MOUTH_Y) / 0.02) ** 2)) * front
        corner = np.clip(np.abs(x) / _MOUTH_HALF_WIDTH, 0, 1.5)
        expr_basis[:, 0, 1] = 0.004 * np.sign(x) * corner * smile_band
        expr_basis[:, 1, 1] = 0.003 * corner**2 * smile_band
    if E > 2:
        expr_basis[:, :, 2:] = _smooth_fields(rng, unit, E - 2, 0.002)
    shape_basis = _smooth_fields(rng, unit, S, 0.005)

    return MorphableModel(
        template=template.astype(np.float32),
        shape_basis=shape_basis.astype(np.float32),
        expr_basis=expr_basis.astype(np.float32),
        jaw_weights=jaw_weights.astype(np.float32),
        jaw_pivot=jaw_pivot.astype(np.float32),
        triangles=triangles.astype(np.int64),
        lip_upper_idx=lip_upper_idx,
        lip_lower_idx=lip_lower_idx,
        lip_all_idx=lip_all_idx,
        upper_face_idx=upper_face_idx,
    )


def _skew(r: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(r[..., 0])
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    return torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
    ).reshape(*r.shape[:-1], 3, 3)


def rotation_offset(r: torch.Tensor) -> torch.Tensor:
    """Return R(r) - I for axis-angle vectors r of shape (..., 3).

    Exactly zero for a zero rotation and differentiable everywhere.
    """
    a2 = (r * r).sum(-1)
    small = a2 < 1e-12
    safe_a2 = torch.where(small, torch.ones_like(a2), a2)
    a = torch.sqrt(safe_a2)
    first = torch.where(small, 1 - a2 / 6, torch.sin(a) / a)
    second = torch.where(small, 0.5 - a2 / 24, (1 - torch.cos(a)) / safe_a2)
    K = _skew(r)
    return first[..., None, None] * K + second[..., None, None] * (K @ K)


def axis_angle_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula for axis-angle vectors of shape (..., 3)."""
    return torch.eye(3, dtype=r.dtype, device=r.device) + rotation_offset(r)


MotionLike = Union[MotionFrame, MotionSequence, np.ndarray, torch.Tensor]


def _as_motion_tensor(motion: MotionLike) -> torch.Tensor:
    if isinstance(motion, MotionFrame):
        motion = motion.to_vector()
    elif isinstance(motion, MotionSequence):
        motion = motion.params
    tensor = torch.as_tensor(motion)
    if not tensor.is_floating_point():
        tensor = tensor.double()
    return tensor


def _as_beta_tensor(beta, like: torch.Tensor) -> torch.Tensor:
    if isinstance(beta, ShapeParams):
        beta = beta.beta
    return torch.as_tensor(beta, dtype=like.dtype, device=like.device)


def decode(model: MorphableModel, beta, motion: MotionLike) -> torch.Tensor:
    """Decode shape and motion parameters to vertices.

    vertices = R_head(R_jaw(template + shape_basis @ beta + expr_basis @ psi)), where the jaw
    rotation moves each vertex towards its rotated position about the jaw pivot in
    proportion to its jaw weight and the head rotation is rigid about the origin.

    Args:
        model: The morphable model.
        beta: Shape coefficients, shape (S,) or broadcastable leading dims + (S,).
        motion: Motion frame(s), shape (..., E + 6).

    Returns:
        Vertices of shape (..., V, 3) with the dtype of `motion`.

    Raises:
        ValueError: If the parameter dimensions do not match the model.
    """
    params = _as_motion_tensor(motion)
    beta = _as_beta_tensor(beta, params)
    if params.shape[-1] != model.E + 6:
        raise ValueError(f"Motion frames must have {model.E + 6} entries, got {params.shape[-1]}")
    if beta.shape[-1] != model.S:
        raise ValueError(f"Expected {model.S} shape coefficients, got {beta.shape[-1]}")
    as_tensor = lambda array: torch.as_tensor(array, dtype=params.dtype, device=params.device)  # noqa: E731
    template = as_tensor(model.template)
    psi = params[..., : model.E]
    theta_j = params[..., model.E : model.E + 3]
    theta_h = params[..., model.E + 3 :]

    shaped = template + torch.einsum("vcs,...s->...vc", as_tensor(model.shape_basis), beta)
    expressed = shaped + torch.einsum("vce,...e->...vc", as_tensor(model.expr_basis), psi)

    relative = expressed - as_tensor(model.jaw_pivot)
    jaw_offset = relative @ rotation_offset(theta_j).transpose(-1, -2)
    jawed = expressed + as_tensor(model.jaw_weights)[:, None] * jaw_offset
    return jawed @ axis_angle_to_matrix(theta_h).transpose(-1, -2)


def decode_zero_pose(model: MorphableModel, beta, motion: MotionLike) -> torch.Tensor:
    """Decode a motion sequence with the head rotation forced to zero.

    The jaw rotation is retained. These zero-head-posed meshes feed the geometric losses
    and the vertex metrics.
    """
    params = _as_motion_tensor(motion)
    head = torch.zeros_like(params[..., -3:])
    return decode(model, beta, torch.cat([params[..., :-3], head], dim=-1))


def lip_opening(model: MorphableModel, vertices):
    """Mean Euclidean distance between paired upper and lower lip vertices.

    Args:
        model: The model the vertices were decoded from.
        vertices: Array or tensor of shape (..., V, 3).

    Returns:
        Opening in meters with shape (...), as tensor for tensor input, otherwise numpy.
    """
    if vertices.shape[-2:] != (model.V, 3):
        raise ValueError(f"Expected vertices of shape (..., {model.V}, 3), got {tuple(vertices.shape)}")
    if isinstance(vertices, torch.Tensor):
        upper = torch.as_tensor(model.lip_upper_idx, device=vertices.device)
        lower = torch.as_tensor(model.lip_lower_idx, device=vertices.device)
        gap = vertices[..., upper, :] - vertices[..., lower, :]
        return torch.linalg.norm(gap, dim=-1).mean(-1)
    vertices = np.asarray(vertices)
    gap = vertices[..., model.lip_upper_idx, :] - vertices[..., model.lip_lower_idx, :]
    return np.linalg.norm(gap, axis=-1).mean(-1)
