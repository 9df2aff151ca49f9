"""Audio containers, frame-aligned feature encoding and the dual-audio interaction module.

Both speakers' audio is encoded to one feature vector per video frame. The interaction
module projects the agent's and the partner's features, lets the joint sequence attend to
itself, adds the agent's projected features back as a residual and appends the per-frame
speaking indicator before a final mixing layer.

Classes:
    AudioTrack: Mono waveform with its sample rate.
    FeatureSequence: Per-frame feature vectors at video frame rate.
    IndicatorTrack: Per-frame 0/1 flag marking the agent's speaking turns.
    DimConfig: Dimensions and ablation switches of the interaction module.
    DualAudioInteraction: The interaction module.

Functions:
    encode: Encode an audio track to exactly T_target feature frames.
    resample_features: Linear interpolation of a feature sequence onto the video frame grid.
    frame_energy: RMS energy per video frame.
    dim_fuse: Fuse two feature sequences and an indicator track.
"""

from __future__ import annotations
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.interpolate
import torch
import torch.nn as nn

from mangotalk.encoders import get_audio_encoder
from mangotalk.errors import ConfigurationError
from mangotalk.motion import Constants


@dataclass
class AudioTrack:
    """Mono waveform.

    Attributes:
        samples: 1-D float array with values in [-1, 1].
        sample_rate: Sampling rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int = Constants.Media.sample_rate

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"Audio must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Audio contains non-finite samples.")
        if self.sample_rate <= 0:
            raise ValueError(f"Sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass
class FeatureSequence:
    """Per-frame features.

    Attributes:
        features: Array of shape (T, d).
        frame_rate: Frame rate in Hz.
    """

    features: np.ndarray
    frame_rate: float = Constants.Media.fps

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class IndicatorTrack:
    """Per-frame speaking indicator of the agent, values in {0, 1}."""

    bits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise ValueError("Indicator values must be a 1-D sequence of 0/1.")
        self.bits = bits.astype(np.uint8)

    def __len__(self) -> int:
        return self.bits.shape[0]


def resample_features(features: np.ndarray, times: np.ndarray, T_target: int, fps: float) -> np.ndarray:
    """Interpolate features sampled at `times` onto the centres of T_target video frames.

    Frames outside the covered time range take the value of the nearest encoder frame.
    """
    targets = (np.arange(T_target) + 0.5) / fps
    if features.shape[0] == 1:
        return np.repeat(features, T_target, axis=0)
    interpolate = scipy.interpolate.interp1d(
        times, features, axis=0, bounds_error=False, fill_value=(features[0], features[-1])
    )
    return interpolate(targets).astype(np.float32)


def encode(track: AudioTrack, encoder_id: str = "desk", T_target: int = None, fps: float = Constants.Media.fps) -> FeatureSequence:
    """Encode an audio track to one feature vector per video frame.

    Args:
        track: The audio track.
        encoder_id: Name of a registered audio encoder.
        T_target: Number of output frames; defaults to the track duration times `fps`.
        fps: Video frame rate.

    Returns:
        Feature sequence of shape (T_target, encoder.feature_dim).

    Raises:
        ValueError: If the track is empty.
        ConfigurationError: If the encoder is not registered.
    """
    if track.samples.shape[0] == 0:
        raise ValueError("Cannot encode an empty audio track.")
    encoder = get_audio_encoder(encoder_id)
    if T_target is None:
        T_target = int(round(track.duration * fps))
    features, times = encoder.encode(track.samples, track.sample_rate)
    return FeatureSequence(resample_features(features, times, T_target, fps), fps)


def frame_energy(track: AudioTrack, T: int, fps: float = Constants.Media.fps) -> np.ndarray:
    """RMS amplitude of the samples belonging to each of T video frames."""
    hop = track.sample_rate / fps
    energy = np.zeros(T)
    for t in range(T):
        chunk = track.samples[int(round(t * hop)) : int(round((t + 1) * hop))]
        if chunk.size:
            energy[t] = np.sqrt(np.mean(np.square(chunk, dtype=np.float64)))
    return energy


@dataclass
class DimConfig:
    """Dual-audio interaction module settings.

    Attributes:
        audio_dim: Width of the encoder features.
        proj_dim: Width of each projected stream.
        n_layers: Self-attention encoder layers.
        n_heads: Attention heads.
        use_dim: If False, the partner stream and the interaction encoder are skipped and only
            the agent's projected features reach the output (single-audio baseline).
        use_indicator: If False, the indicator channel is forced to zero.
    """

    audio_dim: int = 768
    proj_dim: int = 256
    n_layers: int = 2
    n_heads: int = 8
    use_dim: bool = True
    use_indicator: bool = True

    @property
    def output_dim(self) -> int:
        return 2 * self.proj_dim + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> DimConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown DIM settings: {sorted(unknown)}")
        return cls(**data)


class DualAudioInteraction(nn.Module):
    """Fuse agent and partner audio features with the speaking indicator.

    Input (B, T, audio_dim) twice plus (B, T) indicator; output (B, T, 2 * proj_dim + 1).
    """

    def __init__(self, config: DimConfig = None):
        super().__init__()
        self.config = config or DimConfig()
        c = self.config
        self.proj_self = nn.Linear(c.audio_dim, c.proj_dim)
        self.proj_other = nn.Linear(c.audio_dim, c.proj_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=2 * c.proj_dim,
            nhead=c.n_heads,
            dim_feedforward=4 * c.proj_dim,
            dropout=0.0,
            batch_first=True,
        )
        self.interaction = nn.TransformerEncoder(layer, num_layers=c.n_layers, enable_nested_tensor=False)
        self.mix = nn.Linear(c.output_dim, c.output_dim)

    def forward(self, h_self: torch.Tensor, h_other: torch.Tensor, indicator: torch.Tensor) -> torch.Tensor:
        c = self.config
        projected_self = self.proj_self(h_self)
        if c.use_dim:
            dual = torch.cat([projected_self, self.proj_other(h_other)], dim=-1)
            interacted = self.interaction(dual)
            fused = torch.cat(
                [interacted[..., : c.proj_dim] + projected_self, interacted[..., c.proj_dim :]], dim=-1
            )
        else:
            fused = torch.cat([projected_self, torch.zeros_like(projected_self)], dim=-1)
        bits = indicator.to(fused.dtype)[..., None]
        if not c.use_indicator:
            bits = torch.zeros_like(bits)
        return self.mix(torch.cat([fused, bits], dim=-1))


def dim_fuse(
    h_self: FeatureSequence, h_other: FeatureSequence, indicator: IndicatorTrack, params: DualAudioInteraction
) -> FeatureSequence:
    """Fuse the agent's and the partner's features with the indicator.

    Raises:
        ValueError: If the three inputs differ in length or the features have the wrong width.
    """
    T = len(h_self)
    if len(h_other) != T or len(indicator) != T:
        raise ValueError(
            f"Length mismatch: self {T}, other {len(h_other)}, indicator {len(indicator)}"
        )
    width = params.config.audio_dim
    if h_self.features.shape[1] != width or h_other.features.shape[1] != width:
        raise ValueError(f"Audio features must have width {width}.")
    dtype = next(params.parameters()).dtype
    with torch.no_grad():
        fused = params(
            torch.as_tensor(h_self.features, dtype=dtype)[None],
            torch.as_tensor(h_other.features, dtype=dtype)[None],
            torch.as_tensor(indicator.bits)[None],
        )[0]
    return FeatureSequence(fused.numpy(), h_self.frame_rate)
