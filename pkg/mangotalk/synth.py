"""Procedural dialogue clips for training and testing without recorded data.

The generator alternates speaking turns between the agent and the partner. Whoever speaks
produces band-limited noise with a syllable-like envelope. While the agent speaks, its jaw
opening follows the frame energy of its own audio; while it listens, the jaw rests and the
face shows occasional smiles that keep the lips closed. Frames are rendered with a fixed
coloured Gaussian per vertex, and projected lip keypoints with annotation noise are stored as
2D lip annotations.
"""

from __future__ import annotations
import logging
import zlib
from typing import Optional

import numpy as np
import scipy.ndimage
import scipy.signal
import torch

from mangotalk.audio import AudioTrack, IndicatorTrack, frame_energy
from mangotalk.camera import CameraPose, default_camera, project
from mangotalk.io import DialogueClip
from mangotalk.morphable import MorphableModel, build_mini_model, decode
from mangotalk.motion import Constants, MotionSequence, ShapeParams
from mangotalk.renderer import GaussianSet, mean_edge_length, splat

logger = logging.getLogger(__name__)

MIN_FRAMES = 20
MAX_JAW = 0.15
KEYPOINT_NOISE = 0.3

_SKIN = np.array([0.80, 0.62, 0.52])
_LIP = np.array([0.70, 0.22, 0.26])
_EYE = np.array([0.15, 0.12, 0.12])


def default_model() -> MorphableModel:
    """The mini model shared by all synthetic clips."""
    return build_mini_model(seed=0)


def speaker_beta(speaker_id: str, shape_dim: int) -> np.ndarray:
    """Shape coefficients of a synthetic identity, fixed per speaker name."""
    rng = np.random.default_rng(zlib.crc32(speaker_id.encode("utf-8")))
    return rng.normal(0.0, 0.5, shape_dim)


def turn_indicator(rng: np.random.Generator, T: int, min_turn: int = 30, max_turn: int = 48) -> np.ndarray:
    """Alternating turns of random length; the agent speaks where the result is 1."""
    bits = np.zeros(T, dtype=np.uint8)
    state = int(rng.integers(0, 2))
    start = 0
    while start < T:
        length = int(rng.integers(min_turn, max_turn + 1))
        bits[start : start + length] = state
        start += length
        state = 1 - state
    return bits


def speech_like(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    """Band-limited noise (300-3000 Hz) modulated by a syllable-rate envelope."""
    noise = rng.normal(size=n_samples)
    sos = scipy.signal.butter(4, [300, 3000], btype="bandpass", fs=sample_rate, output="sos")
    band = scipy.signal.sosfiltfilt(sos, noise)
    band /= np.max(np.abs(band)) + 1e-12
    t = np.arange(n_samples) / sample_rate
    syllable = np.clip(np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 1.5
    phrase = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 0.7) * t + rng.uniform(0, 2 * np.pi))
    return 0.5 * band * syllable * phrase


def _gate(bits: np.ndarray, hop: int) -> np.ndarray:
    """Per-sample gain from per-frame bits with 10 ms ramps."""
    gain = np.repeat(bits.astype(np.float64), hop)
    ramp = max(1, hop // 4)
    return scipy.ndimage.uniform_filter1d(gain, ramp, mode="nearest")


def synth_motion(
    rng: np.random.Generator, bits: np.ndarray, energy: np.ndarray, expr_dim: int, fps: int
) -> np.ndarray:
    """Motion parameters driven by the agent's energy while speaking and smiles while listening."""
    T = bits.shape[0]
    speaking = bits == 1
    params = np.zeros((T, expr_dim + 6))
    if np.any(speaking):
        level = energy / (np.max(energy[speaking]) + 1e-12)
        level = np.where(speaking, level, 0.0)
    else:
        level = np.zeros(T)
    params[:, expr_dim] = MAX_JAW * level
    params[:, 0] = level

    if expr_dim > 1:
        smile = np.zeros(T)
        for centre in np.flatnonzero(~speaking)[:: max(1, fps)]:
            if rng.random() < 0.35:
                width = rng.uniform(3, 8)
                smile += rng.uniform(0.6, 1.2) * np.exp(-0.5 * ((np.arange(T) - centre) / width) ** 2)
        params[:, 1] = np.where(speaking, 0.0, smile)
    idle = min(6, max(0, expr_dim - 2))
    if idle:
        drift = scipy.ndimage.gaussian_filter1d(rng.normal(size=(T, idle)), sigma=6, axis=0)
        params[:, 2 : 2 + idle] = 0.1 * drift / (np.abs(drift).max() + 1e-12)

    t = np.arange(T) / fps
    for axis in range(3):
        frequency = rng.uniform(0.1, 0.4)
        phase = rng.uniform(0, 2 * np.pi)
        amplitude = 0.03 + 0.02 * speaking
        params[:, expr_dim + 3 + axis] = amplitude * np.sin(2 * np.pi * frequency * t + phase)
    return params


def vertex_colours(model: MorphableModel, speaker_id: str) -> np.ndarray:
    """Fixed per-vertex colours: skin with an identity tint, red lips and dark eyes."""
    rng = np.random.default_rng(zlib.crc32(speaker_id.encode("utf-8")) + 1)
    colours = np.tile(_SKIN + rng.uniform(-0.08, 0.08, 3), (model.V, 1))
    colours[model.lip_all_idx] = _LIP
    x, y, z = model.template.T
    for side in (-1, 1):
        eye = (np.abs(x - side * 0.028) < 0.012) & (np.abs(y - 0.03) < 0.008) & (z > 0)
        colours[eye] = _EYE
    return np.clip(colours, 0.02, 0.98)


def ground_truth_gaussians(model: MorphableModel, vertices: torch.Tensor, colours: np.ndarray) -> GaussianSet:
    """Isotropic, nearly opaque Gaussians at the vertices with logit colours as appearance."""
    triangles = torch.as_tensor(model.triangles)
    log_scale = torch.log(0.6 * mean_edge_length(vertices, triangles))
    G = vertices.shape[0]
    rot = torch.zeros(G, 4, dtype=vertices.dtype)
    rot[:, 0] = 1
    appearance = torch.logit(torch.as_tensor(colours, dtype=vertices.dtype))
    return GaussianSet(
        mu=vertices,
        rot=rot,
        scale=log_scale.expand(G, 3).clone(),
        opacity=torch.full((G,), 0.95, dtype=vertices.dtype),
        appearance=appearance,
        vertex_idx=torch.arange(G),
    )


def render_ground_truth(
    model: MorphableModel, beta, motion: MotionSequence, camera: CameraPose, colours: np.ndarray
) -> np.ndarray:
    """Render uint8 frames (T, H, W, 3) with the fixed appearance."""
    frames = []
    with torch.no_grad():
        all_vertices = decode(model, beta, torch.as_tensor(motion.params, dtype=torch.float32))
        for vertices in all_vertices:
            features, _ = splat(ground_truth_gaussians(model, vertices, colours), camera)
            frames.append(torch.sigmoid(features).numpy())
    return np.clip(np.round(np.stack(frames) * 255), 0, 255).astype(np.uint8)


def lip_keypoints(
    model: MorphableModel, beta, motion: MotionSequence, camera: CameraPose, rng: np.random.Generator, noise: float
) -> np.ndarray:
    """Projected lip keypoint pairs (T, pairs, 2, 2) with Gaussian annotation noise in pixels."""
    with torch.no_grad():
        vertices = decode(model, beta, torch.as_tensor(motion.params, dtype=torch.float64))
        uv, _ = project(vertices, camera)
    uv = uv.numpy()
    keypoints = np.stack([uv[:, model.lip_upper_idx], uv[:, model.lip_lower_idx]], axis=2)
    return (keypoints + rng.normal(0.0, noise, keypoints.shape)).astype(np.float32)


def synth_clip(
    seed: int,
    T: int = 250,
    model: Optional[MorphableModel] = None,
    speaker_id: Optional[str] = None,
    image_size: int = 128,
    render_frames: bool = True,
) -> DialogueClip:
    """Generate a deterministic synthetic clip.

    Args:
        seed: Seed of turns, audio and motion.
        T: Number of frames, at least 20.
        model: Morphable model; defaults to the shared mini model.
        speaker_id: Identity of the agent; fixes shape and colours. Defaults to one per seed.
        image_size: Frame size in pixels.
        render_frames: If False, frames are omitted.

    Raises:
        ValueError: If T is below 20.
    """
    if T < MIN_FRAMES:
        raise ValueError(f"Synthetic clips need at least {MIN_FRAMES} frames, got {T}")
    model = model or default_model()
    speaker_id = speaker_id or f"speaker{seed:03d}"
    rng = np.random.default_rng(seed)
    fps, sample_rate = Constants.Media.fps, Constants.Media.sample_rate
    hop = sample_rate // fps

    bits = turn_indicator(rng, T)
    n_samples = T * hop
    floor = 1e-3
    self_samples = speech_like(rng, n_samples, sample_rate) * _gate(bits, hop)
    other_samples = speech_like(rng, n_samples, sample_rate) * _gate(1 - bits, hop)
    self_samples += floor * rng.normal(size=n_samples)
    other_samples += floor * rng.normal(size=n_samples)
    audio_self = AudioTrack(np.clip(self_samples, -1, 1), sample_rate)
    audio_other = AudioTrack(np.clip(other_samples, -1, 1), sample_rate)

    energy = frame_energy(audio_self, T, fps)
    motion = MotionSequence(synth_motion(rng, bits, energy, model.E, fps).astype(np.float32), fps)
    beta = ShapeParams(speaker_beta(speaker_id, model.S))
    camera = default_camera(image_size)
    frames = None
    if render_frames:
        frames = render_ground_truth(model, beta, motion, camera, vertex_colours(model, speaker_id))
    keypoints = lip_keypoints(model, beta, motion, camera, rng, KEYPOINT_NOISE)
    logger.debug("Synthesized clip seed=%d T=%d speaker=%s", seed, T, speaker_id)
    return DialogueClip(
        clip_id=f"clip{seed:04d}",
        speaker_id=speaker_id,
        audio_self=audio_self,
        audio_other=audio_other,
        indicator=IndicatorTrack(bits),
        motion=motion,
        beta=beta,
        camera=camera,
        frames=frames,
        keypoints=keypoints,
        fps=fps,
    )
