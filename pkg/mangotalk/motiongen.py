"""Windowed diffusion over motion parameters with clean-sample prediction.

A clip is generated in windows of `window` frames. Each window is conditioned on the fused
audio features of the previous and current frames, on the last `prev_window` motion frames
generated for the previous window (zeros before the clip start), on the diffusion step and
on the shape coefficients. The denoiser predicts the clean motion of all
`prev_window + window` frames directly. In cross-attention each motion token may only
attend to the audio token of the same frame.

Classes:
    DiffusionSchedule: Cosine variance schedule with cached cumulative products.
    MotionWindow: Clean previous frames plus (possibly noisy) current frames.
    DenoiserConfig: Architecture and windowing settings of the motion model.
    DenoiserLayer: Self-attention, aligned cross-attention and feed-forward block.
    MotionDenoiser: The stack of denoiser layers with conditioning token.
    MotionModel: Dual-audio interaction module plus denoiser (all stage-1 parameters).
    Stage1Weights: Loss weights of the stage-1 objective.

Functions:
    alignment_mask: Boolean matrix of permitted motion-to-audio attention.
    forward_diffuse: Noise the current frames of a window to step n.
    q_sample: Batched forward diffusion used in training.
    denoise: Predict the clean window.
    sample_windows / sample_window: Reverse diffusion for one or many windows.
    generate / generate_from_features: Autoregressive generation of a whole clip.
    stage1_loss: Parameter, jaw, vertex, velocity and smoothness losses.
"""

from __future__ import annotations
from dataclasses import asdict, dataclass, field
import logging
import math
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from mangotalk.audio import AudioTrack, DimConfig, DualAudioInteraction, IndicatorTrack, encode
from mangotalk.errors import ConfigurationError
from mangotalk.morphable import MorphableModel, decode_zero_pose
from mangotalk.motion import Constants, MotionSequence, ShapeParams, make_canonical_motion

logger = logging.getLogger(__name__)


@dataclass
class DiffusionSchedule:
    """Cosine variance schedule.

    Index 0 is the clean sample (beta 0, cumulative alpha 1); steps 1..N are noisy.

    Attributes:
        N: Number of diffusion steps.
        s: Offset of the cosine schedule.
    """

    N: int = 500
    s: float = 0.008
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"The schedule needs at least one step, got {self.N}")
        x = np.linspace(0, self.N, self.N + 1)
        f = np.cos((x / self.N + self.s) / (1 + self.s) * np.pi / 2) ** 2
        f = f / f[0]
        betas = np.clip(1 - f[1:] / f[:-1], 1e-4, 0.999)
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check_step(self, n: int):
        if not 0 <= n <= self.N:
            raise ValueError(f"Diffusion step must lie within [0, {self.N}], got {n}")

    def strided_steps(self, sample_steps: Optional[int] = None) -> list[int]:
        """Decreasing steps visited by the sampler, always starting at N and ending at 1."""
        if sample_steps is None or sample_steps >= self.N:
            return list(range(self.N, 0, -1))
        if sample_steps < 1:
            raise ValueError(f"Sampling needs at least one step, got {sample_steps}")
        steps = np.round(np.linspace(self.N, 1, sample_steps)).astype(int)
        return sorted(set(steps.tolist()), reverse=True)


@dataclass
class MotionWindow:
    """One window of motion frames.

    Attributes:
        prev: Clean conditioning frames, shape (w_p, D); zeros at the clip start.
        curr: Current frames, shape (w, D).
    """

    prev: torch.Tensor
    curr: torch.Tensor


def forward_diffuse(
    window: MotionWindow, n: int, schedule: DiffusionSchedule, generator: Optional[torch.Generator] = None
) -> MotionWindow:
    """Noise the current frames to step n; the previous frames stay clean.

    X^n = sqrt(alpha_bar_n) * X^0 + sqrt(1 - alpha_bar_n) * z with z ~ N(0, I). Step 0 is the
    noise-free limit and returns the clean frames.
    """
    schedule.check_step(n)
    curr = torch.as_tensor(window.curr)
    noise = torch.randn(curr.shape, generator=generator, dtype=curr.dtype)
    alpha_bar = schedule.alpha_bars[n]
    noisy = math.sqrt(alpha_bar) * curr + math.sqrt(1 - alpha_bar) * noise
    return MotionWindow(window.prev, noisy)


def q_sample(x0: torch.Tensor, n: torch.Tensor, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Batched forward diffusion, x0 of shape (B, ...) and integer steps n of shape (B,)."""
    alpha_bar = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[n]
    alpha_bar = alpha_bar.reshape(-1, *([1] * (x0.dim() - 1)))
    return alpha_bar.sqrt() * x0 + (1 - alpha_bar).sqrt() * noise


@dataclass
class DenoiserConfig:
    """Settings of the fused-audio motion model.

    Attributes:
        dim: Dual-audio interaction settings.
        motion_dim: Motion vector width (E + 6).
        shape_dim: Number of shape coefficients.
        d_model: Token width of the denoiser.
        n_heads: Attention heads of the denoiser.
        n_layers: Stacked denoiser layers.
        ff_dim: Feed-forward width.
        window: Frames generated per window.
        prev_window: Conditioning frames carried over from the previous window.
        steps: Diffusion steps N.
    """

    dim: DimConfig = field(default_factory=DimConfig)
    motion_dim: int = Constants.Motion.dim
    shape_dim: int = 8
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 8
    ff_dim: int = 512
    window: int = 100
    prev_window: int = 10
    steps: int = 500

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> DenoiserConfig:
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown motion model settings: {sorted(unknown)}")
        dim = DimConfig.from_dict(data.pop("dim", {}))
        return cls(dim=dim, **data)


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer sinusoidal embedding of integer positions, shape (..., dim)."""
    half = dim // 2
    frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[..., None] * frequencies
    embedding = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[..., :1])], dim=-1)
    return embedding


def alignment_mask(length: int) -> torch.Tensor:
    """Permitted cross-attention from motion token t (rows) to audio token t' (columns)."""
    return torch.eye(length, dtype=torch.bool)


def memory_mask(length: int, n_cond: int = 1) -> torch.Tensor:
    """Blocked-attention mask for the decoder queries: conditioning rows see every audio
    token, motion rows only their own frame."""
    blocked = ~alignment_mask(length)
    return torch.cat([torch.zeros(n_cond, length, dtype=torch.bool), blocked], dim=0)


class DenoiserLayer(nn.Module):
    """Pre-norm decoder layer: self-attention, aligned cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_dim), nn.GELU(), nn.Linear(ff_dim, d_model))
        self.bypass_self_attention = False

    def cross_context(
        self, x: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Cross-attention output and head-averaged weights for queries x."""
        return self.cross_attn(
            self.norm_cross(x), memory, memory, attn_mask=mask, need_weights=True
        )

    def forward(self, x: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if not self.bypass_self_attention:
            h = self.norm_self(x)
            x = x + self.self_attn(h, h, h, need_weights=False)[0]
        x = x + self.cross_context(x, memory, mask)[0]
        return x + self.ff(self.norm_ff(x))


class MotionDenoiser(nn.Module):
    """Predicts the clean window from fused audio, previous and noisy motion, step and shape.

    The shape projection and the step embedding are summed into one conditioning token that
    precedes the motion tokens.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.motion_in = nn.Linear(config.motion_dim, d)
        self.audio_in = nn.Linear(config.dim.output_dim, d)
        self.shape_in = nn.Linear(config.shape_dim, d)
        self.step_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.layers = nn.ModuleList(
            [DenoiserLayer(d, config.n_heads, config.ff_dim) for _ in range(config.n_layers)]
        )
        self.norm_out = nn.LayerNorm(d)
        self.motion_out = nn.Linear(d, config.motion_dim)

    def tokens(
        self, h: torch.Tensor, x_prev: torch.Tensor, x_noisy: torch.Tensor, n: torch.Tensor, beta: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decoder input tokens (B, 1 + L, d) and audio memory (B, L, d)."""
        d = self.config.d_model
        L = x_prev.shape[1] + x_noisy.shape[1]
        dtype = self.motion_in.weight.dtype
        position = sinusoidal_embedding(torch.arange(L), d).to(dtype)
        motion = self.motion_in(torch.cat([x_prev, x_noisy], dim=1).to(dtype)) + position
        step = self.step_mlp(sinusoidal_embedding(n, d).to(dtype))
        cond = (self.shape_in(beta.to(dtype)) + step)[:, None]
        memory = self.audio_in(h.to(dtype)) + position
        return torch.cat([cond, motion], dim=1), memory

    def forward(
        self, h: torch.Tensor, x_prev: torch.Tensor, x_noisy: torch.Tensor, n: torch.Tensor, beta: torch.Tensor
    ) -> torch.Tensor:
        x, memory = self.tokens(h, x_prev, x_noisy, n, beta)
        mask = memory_mask(memory.shape[1]).to(x.device)
        for layer in self.layers:
            x = layer(x, memory, mask)
        return self.motion_out(self.norm_out(x[:, 1:]))


class MotionModel(nn.Module):
    """All stage-1 parameters: the dual-audio interaction module and the denoiser."""

    def __init__(self, config: DenoiserConfig = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        self.dim = DualAudioInteraction(self.config.dim)
        self.denoiser = MotionDenoiser(self.config)

    def fuse(self, h_self: torch.Tensor, h_other: torch.Tensor, indicator: torch.Tensor) -> torch.Tensor:
        dtype = self.denoiser.motion_in.weight.dtype
        return self.dim(h_self.to(dtype), h_other.to(dtype), indicator)

    def forward(self, h_self, h_other, indicator, x_prev, x_noisy, n, beta) -> torch.Tensor:
        return self.denoiser(self.fuse(h_self, h_other, indicator), x_prev, x_noisy, n, beta)


Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def denoise(h, x_prev, x_noisy, n: int, beta, params: Denoiser) -> torch.Tensor:
    """Predict the clean motion of all prev + current frames of one window.

    Args:
        h: Fused audio features of the window, shape (w_p + w, d_fuse).
        x_prev: Clean previous frames, shape (w_p, D).
        x_noisy: Noisy current frames, shape (w, D).
        n: Diffusion step.
        beta: Shape coefficients, shape (S,).
        params: The denoiser.

    Returns:
        Predicted clean window of shape (w_p + w, D).
    """
    h, x_prev, x_noisy = (torch.as_tensor(a) for a in (h, x_prev, x_noisy))
    if isinstance(beta, ShapeParams):
        beta = beta.beta
    beta = torch.as_tensor(beta)
    if h.shape[0] != x_prev.shape[0] + x_noisy.shape[0]:
        raise ValueError(
            f"Audio window has {h.shape[0]} frames, motion window {x_prev.shape[0]} + {x_noisy.shape[0]}"
        )
    if x_prev.shape[1] != x_noisy.shape[1]:
        raise ValueError("Previous and current frames differ in width.")
    config = getattr(params, "config", None)
    if config is not None and h.shape[1] != config.dim.output_dim:
        raise ValueError(f"Fused audio must have width {config.dim.output_dim}, got {h.shape[1]}")
    step = torch.full((1,), n, dtype=torch.long)
    return params(h[None], x_prev[None], x_noisy[None], step, beta[None])[0]


def _posterior_step(x_n, x0, n, m, schedule, generator):
    alpha_bar_n = schedule.alpha_bars[n]
    alpha_bar_m = schedule.alpha_bars[m]
    alpha = alpha_bar_n / alpha_bar_m
    beta = 1 - alpha
    mean = (
        math.sqrt(alpha_bar_m) * beta / (1 - alpha_bar_n) * x0
        + math.sqrt(alpha) * (1 - alpha_bar_m) / (1 - alpha_bar_n) * x_n
    )
    variance = beta * (1 - alpha_bar_m) / (1 - alpha_bar_n)
    noise = torch.randn(x_n.shape, generator=generator, dtype=x_n.dtype)
    return mean + math.sqrt(variance) * noise


def sample_windows(
    h: torch.Tensor,
    x_prev: torch.Tensor,
    beta: torch.Tensor,
    schedule: DiffusionSchedule,
    params: Denoiser,
    generator: Optional[torch.Generator] = None,
    sample_steps: Optional[int] = None,
    grad_last: bool = False,
) -> torch.Tensor:
    """Ancestral reverse diffusion for a batch of windows.

    Starting from Gaussian noise at step N the sampler predicts the clean window and draws
    the next state from the posterior q(X^m | X^n, X^0_pred). With `sample_steps` < N it visits
    a strided subsequence of steps. The last prediction is returned.

    Args:
        h: Fused audio, shape (B, w_p + w, d_fuse).
        x_prev: Clean previous frames, shape (B, w_p, D).
        beta: Shape coefficients, shape (B, S).
        schedule: Diffusion schedule.
        params: The denoiser.
        generator: Random generator.
        sample_steps: Number of visited steps; None visits all N.
        grad_last: If True, only the final denoiser call records gradients.

    Returns:
        Clean current frames, shape (B, w, D).
    """
    w_p = x_prev.shape[1]
    w = h.shape[1] - w_p
    dtype = x_prev.dtype
    x = torch.randn((h.shape[0], w, x_prev.shape[2]), generator=generator, dtype=dtype)
    steps = schedule.strided_steps(sample_steps)
    for i, n in enumerate(steps):
        last = i == len(steps) - 1
        step = torch.full((h.shape[0],), n, dtype=torch.long)
        with torch.set_grad_enabled(grad_last and last and torch.is_grad_enabled()):
            x0 = params(h, x_prev, x, step, beta)[:, w_p:].to(dtype)
        if last:
            return x0
        x = _posterior_step(x, x0.detach(), n, steps[i + 1], schedule, generator)
    raise AssertionError("unreachable")


def sample_window(h, x_prev, beta, schedule, params, generator=None, sample_steps=None) -> torch.Tensor:
    """Reverse diffusion for one window; returns the current frames, shape (w, D)."""
    h, x_prev = torch.as_tensor(h), torch.as_tensor(x_prev)
    if isinstance(beta, ShapeParams):
        beta = beta.beta
    beta = torch.as_tensor(beta, dtype=x_prev.dtype)
    if h.shape[0] <= x_prev.shape[0]:
        raise ValueError("The audio window must be longer than the previous frames.")
    with torch.no_grad():
        return sample_windows(h[None], x_prev[None], beta[None], schedule, params, generator, sample_steps)[0]


def window_slices(T: int, window: int, prev_window: int):
    """Yield (start, indices) per window; indices cover start - prev_window .. start + window."""
    for start in range(0, T, window):
        yield start, np.arange(start - prev_window, start + window)


def gather_frames(array: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Rows of `array` at `indices`, zeros where an index falls outside the array."""
    valid = (indices >= 0) & (indices < array.shape[0])
    out = np.zeros((indices.shape[0],) + array.shape[1:], dtype=array.dtype)
    out[valid] = array[indices[valid]]
    return out


def generate_from_features(
    h_self: np.ndarray,
    h_other: np.ndarray,
    indicator: IndicatorTrack,
    beta,
    model: MotionModel,
    schedule: DiffusionSchedule,
    seed: int = 0,
    sample_steps: Optional[int] = None,
) -> MotionSequence:
    """Generate a clip window by window from precomputed per-frame audio features."""
    T = len(indicator)
    if T == 0:
        raise ValueError("Cannot generate motion for an empty clip.")
    if h_self.shape[0] != T or h_other.shape[0] != T:
        raise ValueError(f"Audio features cover {h_self.shape[0]}/{h_other.shape[0]} frames, indicator {T}")
    if isinstance(beta, ShapeParams):
        beta = beta.beta
    config = model.config
    dtype = model.denoiser.motion_in.weight.dtype
    generator = torch.Generator().manual_seed(seed)
    beta = torch.as_tensor(np.asarray(beta), dtype=dtype)[None]
    motion = np.zeros((T, config.motion_dim), dtype=np.float32)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start, indices in window_slices(T, config.window, config.prev_window):
            fused = model.fuse(
                torch.as_tensor(gather_frames(h_self, indices))[None],
                torch.as_tensor(gather_frames(h_other, indices))[None],
                torch.as_tensor(gather_frames(indicator.bits, indices))[None],
            )
            x_prev = torch.as_tensor(gather_frames(motion, indices[: config.prev_window]), dtype=dtype)[None]
            curr = sample_windows(fused, x_prev, beta, schedule, model.denoiser, generator, sample_steps)[0]
            take = min(config.window, T - start)
            motion[start : start + take] = make_canonical_motion(curr[:take].numpy(), config.motion_dim - 6)
    model.train(was_training)
    logger.debug("Generated %d frames in %d windows", T, math.ceil(T / config.window))
    return MotionSequence(motion)


def generate(
    audio_self: AudioTrack,
    audio_other: AudioTrack,
    indicator: IndicatorTrack,
    beta,
    model: MotionModel,
    schedule: DiffusionSchedule,
    seed: int = 0,
    encoder_id: str = "desk",
    sample_steps: Optional[int] = None,
) -> MotionSequence:
    """Generate motion for an audio pair; the output has one frame per indicator entry."""
    T = len(indicator)
    if T == 0:
        raise ValueError("Cannot generate motion for an empty clip.")
    h_self = encode(audio_self, encoder_id, T).features
    h_other = encode(audio_other, encoder_id, T).features
    return generate_from_features(h_self, h_other, indicator, beta, model, schedule, seed, sample_steps)


@dataclass
class Stage1Weights:
    """Weights of the stage-1 objective (the parameter loss has weight 1)."""

    jaw: float = 0.2
    vert: float = 2e6
    vel: float = 1e7
    smooth: float = 1e4

    def to_dict(self) -> dict:
        return asdict(self)


def canonical_rotations(params: torch.Tensor, expr_dim: int) -> torch.Tensor:
    """Wrap the jaw and head axis-angles of motion vectors (..., expr_dim + 6) to angles within [-pi, pi].

    Differentiable; vectors already within the bound pass through unchanged.
    """
    expr, rotations = params[..., :expr_dim], params[..., expr_dim:].unflatten(-1, (2, 3))
    angle = torch.linalg.vector_norm(rotations, dim=-1, keepdim=True)
    turns = torch.round(angle.detach() / (2 * math.pi))
    rotations = rotations - 2 * math.pi * turns * rotations / angle.clamp_min(1e-12)
    return torch.cat([expr, rotations.flatten(-2)], dim=-1)


def stage1_loss(
    pred: torch.Tensor, gt: torch.Tensor, beta, model: MorphableModel, weights: Stage1Weights = None
) -> dict[str, torch.Tensor]:
    """Stage-1 loss terms for predicted and ground-truth windows of shape (..., L, D).

    The vertex terms use zero-head-posed meshes: L_vert compares vertices, L_vel their first
    temporal differences and L_smooth penalizes the second temporal difference of the
    predicted vertices.
    Jaw and head rotations are wrapped to angles within [-pi, pi] before the parameter terms,
    so equivalent axis-angles do not count as errors.

    Returns:
        Dictionary with the keys param, jaw, vert, vel, smooth and total.
    """
    weights = weights or Stage1Weights()
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape.")
    if isinstance(beta, ShapeParams):
        beta = beta.beta
    beta = torch.as_tensor(beta, dtype=pred.dtype)
    if beta.dim() > 1:
        beta = beta.unsqueeze(-2)
    jaw = slice(model.E, model.E + 3)
    pred_canonical = canonical_rotations(pred, model.E)
    gt_canonical = canonical_rotations(gt, model.E)

    pred_vertices = decode_zero_pose(model, beta, pred)
    gt_vertices = decode_zero_pose(model, beta, gt)
    pred_velocity = pred_vertices.diff(dim=-3)
    gt_velocity = gt_vertices.diff(dim=-3)

    losses = {
        "param": torch.mean((pred_canonical - gt_canonical) ** 2),
        "jaw": torch.mean((pred_canonical[..., jaw] - gt_canonical[..., jaw]) ** 2),
        "vert": torch.mean((pred_vertices - gt_vertices) ** 2),
        "vel": torch.mean((pred_velocity - gt_velocity) ** 2),
        "smooth": torch.mean(pred_velocity.diff(dim=-3) ** 2),
    }
    losses["total"] = (
        losses["param"]
        + weights.jaw * losses["jaw"]
        + weights.vert * losses["vert"]
        + weights.vel * losses["vel"]
        + weights.smooth * losses["smooth"]
    )
    return losses
