"""Pinhole cameras and projection of vertices into pixel coordinates.

Camera space follows the computer-vision convention: x right, y down, z pointing away from
the camera, so a point with positive z lies in front of the camera. The extrinsic matrix
maps world (model) coordinates to camera coordinates and may carry a uniform scale.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch


@dataclass
class Intrinsics:
    """Pinhole intrinsics.

    Attributes:
        focal: Focal length in pixels.
        cx: Principal point x in pixels.
        cy: Principal point y in pixels.
        height: Image height in pixels.
        width: Image width in pixels.
    """

    focal: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"Focal length must be positive, got {self.focal}")


@dataclass
class CameraPose:
    """Rigid camera transform with uniform scale plus intrinsics.

    Attributes:
        extrinsic: Row-major 4x4 world-to-camera matrix.
        intrinsics: Pinhole intrinsics.
    """

    extrinsic: np.ndarray
    intrinsics: Intrinsics
    scale: float = field(init=False)

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.extrinsic.shape != (4, 4):
            raise ValueError(f"Extrinsic must be 4x4, got {self.extrinsic.shape}")
        block = self.extrinsic[:3, :3]
        scale = float(np.linalg.norm(block[:, 0]))
        if scale < 1e-12:
            raise ValueError("Degenerate camera: the extrinsic scale is zero.")
        rotation = block / scale
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-5):
            raise ValueError("Extrinsic rotation block is not orthogonal up to uniform scale.")
        if np.linalg.det(rotation) < 0:
            raise ValueError("Extrinsic rotation block must not contain a reflection.")
        self.scale = scale

    def to_dict(self) -> dict:
        return {
            "extrinsic": [float(v) for v in self.extrinsic.reshape(-1)],
            "focal": float(self.intrinsics.focal),
            "cx": float(self.intrinsics.cx),
            "cy": float(self.intrinsics.cy),
            "height": int(self.intrinsics.height),
            "width": int(self.intrinsics.width),
        }

    @classmethod
    def from_dict(cls, data: dict) -> CameraPose:
        intrinsics = Intrinsics(
            data["focal"], data["cx"], data["cy"], data["height"], data["width"]
        )
        return cls(np.asarray(data["extrinsic"], dtype=np.float64).reshape(4, 4), intrinsics)


def default_camera(image_size: int = 128, distance: float = 0.6) -> CameraPose:
    """Frontal camera looking at a head centred at the model origin.

    The model looks along +z with y up; a rotation of pi about the x axis turns this into
    camera space so that the face is upright in the image.
    """
    extrinsic = np.diag([1.0, -1.0, -1.0, 1.0])
    extrinsic[2, 3] = distance
    intrinsics = Intrinsics(
        focal=1.5 * image_size,
        cx=(image_size - 1) / 2,
        cy=(image_size - 1) / 2,
        height=image_size,
        width=image_size,
    )
    return CameraPose(extrinsic, intrinsics)


def to_camera_space(points: torch.Tensor, camera: CameraPose) -> torch.Tensor:
    """Apply the extrinsic transform to points of shape (..., 3)."""
    extrinsic = torch.as_tensor(camera.extrinsic, dtype=points.dtype, device=points.device)
    return points @ extrinsic[:3, :3].T + extrinsic[:3, 3]


def project(
    vertices, camera: CameraPose, intrinsics: Optional[Intrinsics] = None, near: float = 1e-6
) -> tuple[torch.Tensor, torch.Tensor]:
    """Project points into pixel coordinates with a pinhole model.

    Args:
        vertices: Array or tensor of shape (..., 3) in world coordinates.
        camera: The camera pose.
        intrinsics: Optional intrinsics overriding the ones stored in `camera`.
        near: Points with camera-space depth not above this value are flagged invalid.

    Returns:
        Tuple of pixel coordinates of shape (..., 2) and a boolean validity mask of shape
        (...). Invalid points are projected with their depth clamped to `near`, so the
        returned coordinates stay finite.
    """
    intrinsics = camera.intrinsics if intrinsics is None else intrinsics
    points = torch.as_tensor(vertices)
    if not points.is_floating_point():
        points = points.double()
    cam = to_camera_space(points, camera)
    depth = cam[..., 2]
    valid = depth > near
    safe_depth = torch.where(valid, depth, torch.full_like(depth, near))
    u = intrinsics.focal * cam[..., 0] / safe_depth + intrinsics.cx
    v = intrinsics.focal * cam[..., 1] / safe_depth + intrinsics.cy
    return torch.stack([u, v], dim=-1), valid
