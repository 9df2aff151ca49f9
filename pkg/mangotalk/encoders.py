"""This module manages the pluggable audio and image encoders.

Audio encoders turn a waveform into a sequence of feature vectors at the encoder's native
frame rate; image encoders turn an image into a pyramid of feature maps. The default
encoders are registered in a global registry under the name "desk" and can be accessed
via the `get_audio_encoder` and `get_image_encoder` functions. New encoders must be
registered via `register_audio_encoder` and `register_image_encoder` before the other
modules can address them by name.

The desk encoders are small networks with weights drawn from a fixed seed. They are not
trained; they only need to be deterministic and informative enough for the pipeline.

Classes:
    AudioEncoder (Protocol): Interface for an audio encoder.
    ImageEncoder (Protocol): Interface for an image encoder.
    DeskAudioEncoder: Log-mel filterbank followed by a fixed temporal convolution stack.
    DeskImageEncoder: Fixed shallow convolutional pyramid.

Functions:
    register_audio_encoder: Register a custom audio encoder by name.
    get_audio_encoder: Get a registered audio encoder by name.
    register_image_encoder: Register a custom image encoder by name.
    get_image_encoder: Get a registered image encoder by name.

Constants:
    AUDIO_ENCODER_REGISTRY: Dictionary mapping names to audio encoder classes.
    IMAGE_ENCODER_REGISTRY: Dictionary mapping names to image encoder classes.
"""

from typing import Protocol

import librosa
import numpy as np
import scipy.signal
import torch
import torch.nn as nn
import torch.nn.functional as F

from mangotalk.errors import ConfigurationError


class AudioEncoder(Protocol):
    """Abstract audio encoder."""

    feature_dim: int

    def encode(self, samples: np.ndarray, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
        """Return features of shape (T_native, feature_dim) and their frame times in seconds."""
        ...


class ImageEncoder(Protocol):
    """Abstract image encoder."""

    feature_dim: int
    stride: int

    def pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Return feature maps (B, C_k, H_k, W_k) from fine to coarse for (B, 3, H, W) input.

        The last map has `feature_dim` channels at 1/`stride` resolution.
        """
        ...


class DeskAudioEncoder:
    """80-bin log-mel filterbank followed by a fixed-seed temporal convolution stack.

    Windows are 25 ms long with a 10 ms hop, so the native rate is 100 frames per second.
    The convolutions use replicate padding, which makes the encoder time-invariant on
    constant input.
    """

    feature_dim: int = 768
    sample_rate: int = 16000
    n_mels: int = 80
    window: int = 400
    hop: int = 160
    seed: int = 0

    def __init__(self):
        self.filterbank = librosa.filters.mel(sr=self.sample_rate, n_fft=self.window, n_mels=self.n_mels)
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.network = nn.Sequential(
                nn.Conv1d(self.n_mels, 256, kernel_size=5, padding=2, padding_mode="replicate"),
                nn.Tanh(),
                nn.Conv1d(256, self.feature_dim, kernel_size=3, padding=1, padding_mode="replicate"),
            ).eval()
        for parameter in self.network.parameters():
            parameter.requires_grad_(False)

    def log_mel(self, samples: np.ndarray, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
        samples = np.asarray(samples, dtype=np.float64)
        if sample_rate != self.sample_rate:
            samples = scipy.signal.resample_poly(samples, self.sample_rate, sample_rate)
        if samples.shape[0] < self.window:
            samples = np.pad(samples, (0, self.window - samples.shape[0]))
        _, times, spectrum = scipy.signal.spectrogram(
            samples,
            self.sample_rate,
            window="hamming",
            nperseg=self.window,
            noverlap=self.window - self.hop,
            detrend=False,
            mode="magnitude",
        )
        log_mel = np.log(self.filterbank @ spectrum + 1e-6)
        return log_mel.T, times

    def encode(self, samples: np.ndarray, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
        log_mel, times = self.log_mel(samples, sample_rate)
        normalized = torch.as_tensor((log_mel.T + 4.0) / 4.0, dtype=torch.float32)
        with torch.no_grad():
            features = self.network(normalized[None])[0].T
        return features.numpy(), times


class DeskImageEncoder(nn.Module):
    """Fixed-seed convolutional pyramid with three stride-2 stages (1/2, 1/4, 1/8).

    Replicate padding keeps a constant image mapped to spatially constant features.
    """

    feature_dim: int = 64
    stride: int = 8
    seed: int = 0

    def __init__(self):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.stages = nn.ModuleList(
                [
                    nn.Sequential(
                        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, padding_mode="replicate"),
                        nn.Tanh(),
                    )
                    for c_in, c_out in ((3, 16), (16, 32), (32, self.feature_dim))
                ]
            )
        self.eval()
        for parameter in self.parameters():
            parameter.requires_grad_(False)

    def pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        # Weights are cast to the input dtype so float64 inputs keep their precision.
        x = images if images.is_floating_point() else images.float()
        features = []
        for stage in self.stages:
            conv = stage[0]
            padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
            x = torch.tanh(F.conv2d(padded, conv.weight.to(x.dtype), conv.bias.to(x.dtype), stride=2))
            features.append(x)
        return features


def register_audio_encoder(name: str, encoder: type):
    """Register a custom audio encoder class by name."""
    AUDIO_ENCODER_REGISTRY[name] = encoder
    _INSTANCES.pop(("audio", name), None)


def get_audio_encoder(encoder_name: str) -> AudioEncoder:
    """Get a registered audio encoder by name."""
    return _instance("audio", AUDIO_ENCODER_REGISTRY, encoder_name)


def register_image_encoder(name: str, encoder: type):
    """Register a custom image encoder class by name."""
    IMAGE_ENCODER_REGISTRY[name] = encoder
    _INSTANCES.pop(("image", name), None)


def get_image_encoder(encoder_name: str) -> ImageEncoder:
    """Get a registered image encoder by name."""
    return _instance("image", IMAGE_ENCODER_REGISTRY, encoder_name)


def _instance(kind: str, registry: dict, name: str):
    if name not in registry:
        raise ConfigurationError(f"Unknown {kind} encoder '{name}', registered: {sorted(registry)}")
    key = (kind, name)
    if key not in _INSTANCES:
        _INSTANCES[key] = registry[name]()
    return _INSTANCES[key]


AUDIO_ENCODER_REGISTRY: dict[str, type] = {
    "desk": DeskAudioEncoder,
}


IMAGE_ENCODER_REGISTRY: dict[str, type] = {
    "desk": DeskImageEncoder,
}


_INSTANCES: dict[tuple[str, str], object] = {}
