"""Motion parameter containers and their canonical form.

A motion frame packs the expression coefficients, the jaw rotation and the head rotation
into one flat vector of `Constants.Motion.dim` entries, in that order. Rotations are
axis-angle vectors; the canonical representation keeps the rotation angle within [-pi, pi].

Classes:
    Constants: Fixed dimensions and rates used across the package.
    MotionFrame: One frame of motion parameters.
    MotionSequence: Per-frame motion vectors at video frame rate.
    ShapeParams: Identity shape coefficients.

Functions:
    canonicalize_axis_angle: Wrap axis-angle vectors to an angle within [-pi, pi].
    is_canonical_motion: Check whether all rotations of a motion array are canonical.
    make_canonical_motion: Validate a motion array and canonicalize its rotations.
"""

from __future__ import annotations
from dataclasses import dataclass, field

import numpy as np


class Constants:
    class Motion:
        expr_dim: int = 50
        jaw_dim: int = 3
        head_dim: int = 3
        dim: int = 56
        jaw_slice: slice = slice(50, 53)
        head_slice: slice = slice(53, 56)

    class Media:
        fps: int = 25
        sample_rate: int = 16000
        # audio samples per video frame
        hop: int = 640


@dataclass
class MotionFrame:
    """One frame of motion parameters.

    Attributes:
        psi: Expression coefficients, shape (E,).
        theta_j: Jaw rotation, axis-angle in radians, shape (3,).
        theta_h: Head rotation, axis-angle in radians, shape (3,).
    """

    psi: np.ndarray
    theta_j: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_h: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.psi), np.asarray(self.theta_j), np.asarray(self.theta_h)]
        )

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> MotionFrame:
        vector = np.asarray(vector)
        return cls(vector[:-6], vector[-6:-3], vector[-3:])


@dataclass
class MotionSequence:
    """Per-frame motion vectors.

    Attributes:
        params: Array of shape (T, E + 6) with expression, jaw and head parameters.
        fps: Frame rate in Hz.
    """

    params: np.ndarray
    fps: int = Constants.Media.fps

    def __post_init__(self):
        self.params = np.asarray(self.params)
        if self.params.ndim != 2:
            raise ValueError(f"Motion must be a (T, D) array, got shape {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("Motion contains non-finite values.")

    def __len__(self) -> int:
        return self.params.shape[0]

    @property
    def psi(self) -> np.ndarray:
        return self.params[:, :-6]

    @property
    def theta_j(self) -> np.ndarray:
        return self.params[:, -6:-3]

    @property
    def theta_h(self) -> np.ndarray:
        return self.params[:, -3:]

    def frame(self, index: int) -> MotionFrame:
        return MotionFrame.from_vector(self.params[index])


@dataclass
class ShapeParams:
    """Identity shape coefficients, fixed per identity or clip."""

    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta)
        if self.beta.ndim != 1 or not np.all(np.isfinite(self.beta)):
            raise ValueError("Shape coefficients must be a finite 1-D array.")

    def __len__(self) -> int:
        return self.beta.shape[0]


def canonicalize_axis_angle(rotations: np.ndarray) -> np.ndarray:
    """Wrap axis-angle vectors so that the rotation angle lies within [-pi, pi].

    The wrapped vector describes the same rotation. Angles larger than pi are replaced by
    the equivalent angle about the same axis, measured the other way round.

    Args:
        rotations: Array of shape (..., 3).

    Returns:
        Array of the same shape holding the canonical axis-angle vectors.
    """
    rotations = np.asarray(rotations, dtype=float)
    angle = np.linalg.norm(rotations, axis=-1, keepdims=True)
    wrapped = angle - 2 * np.pi * np.round(angle / (2 * np.pi))
    safe_angle = np.where(angle > 0, angle, 1.0)
    return np.where(angle > np.pi, rotations / safe_angle * wrapped, rotations)


def is_canonical_motion(params: np.ndarray) -> bool:
    """Check that every jaw and head rotation of a motion array has |angle| <= pi."""
    params = np.asarray(params)
    rotations = np.stack([params[..., -6:-3], params[..., -3:]], axis=-2)
    return bool(np.all(np.linalg.norm(rotations, axis=-1) <= np.pi + 1e-12))


def make_canonical_motion(params: np.ndarray, expr_dim: int = Constants.Motion.expr_dim) -> np.ndarray:
    """Validate a motion array and return a copy with canonical rotations.

    Args:
        params: Array of shape (..., expr_dim + 6).
        expr_dim: Number of expression coefficients per frame.

    Returns:
        Canonical motion array.

    Raises:
        ValueError: If the trailing dimension does not match or values are not finite.
    """
    params = np.array(params, dtype=float)
    if params.shape[-1] != expr_dim + 6:
        raise ValueError(
            f"Motion frames must have {expr_dim + 6} entries, got {params.shape[-1]}"
        )
    if not np.all(np.isfinite(params)):
        raise ValueError("Motion contains non-finite values.")
    params[..., -6:-3] = canonicalize_axis_angle(params[..., -6:-3])
    params[..., -3:] = canonicalize_axis_angle(params[..., -3:])
    return params
