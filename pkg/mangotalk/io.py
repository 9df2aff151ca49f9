"""Dialogue clip, morphable model and checkpoint file I/O.

A clip is stored as a directory:

    manifest.json     clip metadata, camera (row-major extrinsic) and shape coefficients
    audio_self.wav    agent audio, PCM16 mono 16 kHz
    audio_other.wav   partner audio, PCM16 mono 16 kHz
    indicator.bin     one byte per frame, 0 or 1
    motion.f32        little-endian float32, frame-major, D floats per frame
    keypoints.f32     optional 2D lip keypoints, (T, pairs, 2, 2) little-endian float32
    frames/%06d.png   optional 8-bit RGB frames

Morphable models and checkpoints are array bundles: a JSON manifest listing name, dtype and
shape of every array, with integer index lists inline and each float array in its own raw
little-endian blob whose file name the manifest declares.
All writers are deterministic, so save -> load -> save reproduces every file byte for byte.

Classes:
    DialogueClip: One recorded (or synthesized) conversation clip.

Functions:
    save_clip / load_clip: Clip directory I/O.
    write_wav / read_wav: PCM16 audio files.
    write_png / read_png: 8-bit RGB images.
    write_frames / read_frames: PNG frame sequences.
    write_indicator: Raw indicator bytes.
    write_motion / read_motion: Raw float32 motion blobs.
    write_bundle / read_bundle: Array bundles.
    save_model / load_model: Morphable model files.
    save_checkpoint / load_checkpoint: Parameter checkpoints.
"""

from __future__ import annotations
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image
import soundfile
import torch

from mangotalk.audio import AudioTrack, IndicatorTrack
from mangotalk.camera import CameraPose
from mangotalk.errors import FormatError, ValidationError
from mangotalk.morphable import MorphableModel
from mangotalk.motion import Constants, MotionSequence, ShapeParams, is_canonical_motion, make_canonical_motion

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PathLike = Union[str, Path]


@dataclass
class DialogueClip:
    """One conversation clip from the agent's point of view.

    Attributes:
        clip_id: Unique clip identifier.
        speaker_id: Identity of the agent.
        audio_self: The agent's audio.
        audio_other: The partner's audio.
        indicator: Per-frame speaking indicator of the agent.
        motion: Per-frame motion parameters of the agent.
        beta: Shape coefficients of the agent.
        camera: Camera of the frames.
        frames: Optional uint8 frames, shape (T, H, W, 3).
        keypoints: Optional annotated 2D lip keypoints, shape (T, pairs, 2, 2) with the upper
            point first; NaN marks a missing annotation.
    """

    clip_id: str
    speaker_id: str
    audio_self: AudioTrack
    audio_other: AudioTrack
    indicator: IndicatorTrack
    motion: MotionSequence
    beta: ShapeParams
    camera: CameraPose
    frames: Optional[np.ndarray] = None
    keypoints: Optional[np.ndarray] = None
    fps: int = field(default=Constants.Media.fps)

    @property
    def frame_count(self) -> int:
        return len(self.indicator)

    @property
    def has_frames(self) -> bool:
        return self.frames is not None

    def validate(self):
        """Check that all per-frame data covers the same frames.

        Raises:
            ValidationError: If frame counts or audio durations disagree.
        """
        T = self.frame_count
        if len(self.motion) != T:
            raise ValidationError(f"Clip {self.clip_id}: motion has {len(self.motion)} frames, indicator {T}")
        if self.frames is not None and self.frames.shape[0] != T:
            raise ValidationError(f"Clip {self.clip_id}: {self.frames.shape[0]} image frames, indicator {T}")
        if self.keypoints is not None and self.keypoints.shape[0] != T:
            raise ValidationError(f"Clip {self.clip_id}: {self.keypoints.shape[0]} keypoint frames, indicator {T}")
        hop = self.audio_self.sample_rate // self.fps
        for name, track in (("audio_self", self.audio_self), ("audio_other", self.audio_other)):
            if abs(track.samples.shape[0] - T * hop) > hop:
                raise ValidationError(
                    f"Clip {self.clip_id}: {name} has {track.samples.shape[0]} samples, expected {T * hop} +- {hop}"
                )


def write_wav(path: PathLike, track: AudioTrack):
    """Write a track as PCM16; samples are quantized to multiples of 1/32768."""
    pcm = np.clip(np.round(track.samples.astype(np.float64) * 32768), -32768, 32767).astype(np.int16)
    soundfile.write(str(path), pcm, track.sample_rate, subtype="PCM_16", format="WAV")


def read_wav(path: PathLike) -> AudioTrack:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Missing audio file: {path.name}")
    try:
        pcm, sample_rate = soundfile.read(str(path), dtype="int16")
    except RuntimeError as error:
        raise FormatError(f"Corrupt audio file {path.name}: {error}") from error
    if pcm.ndim != 1:
        raise FormatError(f"Audio file {path.name} is not mono.")
    return AudioTrack(pcm.astype(np.float32) / 32768, sample_rate)


def write_png(path: PathLike, image: np.ndarray):
    Image.fromarray(_to_uint8(image)).save(str(path), format="PNG")


def read_png(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as error:
        raise FormatError(f"Corrupt or missing image file {path.name}: {error}") from error


def _to_uint8(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def write_frames(directory: PathLike, frames) -> list[Path]:
    """Write frames (T, H, W, 3) as directory/%06d.png; floats in [0, 1] are quantized."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, frame in enumerate(frames):
        path = directory / f"{index:06d}.png"
        write_png(path, frame)
        paths.append(path)
    return paths


def read_frames(directory: PathLike) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.png"))
    for index, path in enumerate(paths):
        if path.name != f"{index:06d}.png":
            raise FormatError(f"Unexpected frame file {path.name}, expected {index:06d}.png")
    if not paths:
        raise FormatError(f"No frames in {Path(directory).name}")
    return np.stack([read_png(path) for path in paths])


def write_indicator(path: PathLike, indicator: IndicatorTrack):
    """One byte per frame, 0 or 1."""
    Path(path).write_bytes(indicator.bits.astype(np.uint8).tobytes())


def write_motion(path: PathLike, motion: MotionSequence):
    Path(path).write_bytes(np.ascontiguousarray(motion.params, dtype="<f4").tobytes())


def read_motion(path: PathLike, frame_count: Optional[int] = None, dim: int = Constants.Motion.dim) -> MotionSequence:
    """Read a motion blob; rotation angles beyond pi are wrapped with a logged warning.

    Raises:
        FormatError: If the file is missing.
        ValidationError: If the size does not match `frame_count` frames of `dim` floats.
    """
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"Missing motion file: {path.name}")
    data = path.read_bytes()
    if frame_count is None:
        if len(data) % (4 * dim):
            raise ValidationError(f"{path.name}: {len(data)} bytes is not a whole number of {dim}-float frames")
        frame_count = len(data) // (4 * dim)
    expected = frame_count * dim * 4
    if len(data) != expected:
        raise ValidationError(f"{path.name}: expected {expected} bytes, found {len(data)}")
    params = np.frombuffer(data, dtype="<f4").reshape(frame_count, dim).astype(np.float32)
    if np.all(np.isfinite(params)) and not is_canonical_motion(params):
        logger.warning("%s: rotation angles beyond pi wrapped to their canonical form", path.name)
        params = make_canonical_motion(params, dim - 6).astype(np.float32)
    try:
        return MotionSequence(params)
    except ValueError as error:
        raise FormatError(f"{path.name}: {error}") from error


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise FormatError(f"Missing manifest file: {path.name}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as error:
        raise FormatError(f"Corrupt manifest file {path.name}: {error}") from error


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_clip(clip: DialogueClip, directory: PathLike):
    """Write a clip directory; existing files of the same names are replaced."""
    clip.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_VERSION,
        "clip_id": clip.clip_id,
        "speaker_id": clip.speaker_id,
        "frame_count": clip.frame_count,
        "fps": clip.fps,
        "sample_rate": clip.audio_self.sample_rate,
        "motion_dim": int(clip.motion.params.shape[1]),
        "beta": [float(b) for b in clip.beta.beta],
        "camera": clip.camera.to_dict(),
        "has_frames": clip.has_frames,
        "keypoint_pairs": None if clip.keypoints is None else int(clip.keypoints.shape[1]),
    }
    _write_json(directory / "manifest.json", manifest)
    write_wav(directory / "audio_self.wav", clip.audio_self)
    write_wav(directory / "audio_other.wav", clip.audio_other)
    write_indicator(directory / "indicator.bin", clip.indicator)
    write_motion(directory / "motion.f32", clip.motion)
    if clip.keypoints is not None:
        (directory / "keypoints.f32").write_bytes(np.ascontiguousarray(clip.keypoints, dtype="<f4").tobytes())
    if clip.frames is not None:
        write_frames(directory / "frames", clip.frames)
    logger.debug("Saved clip %s (%d frames) to %s", clip.clip_id, clip.frame_count, directory)


def load_clip(directory: PathLike) -> DialogueClip:
    """Read a clip directory.

    Raises:
        FormatError: If a file is missing or corrupt; the message names the file.
        ValidationError: If sizes or frame counts disagree.
    """
    directory = Path(directory)
    manifest = _read_json(directory / "manifest.json")
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"manifest.json: unsupported format {manifest.get('format')}")
    try:
        T = int(manifest["frame_count"])
        dim = int(manifest["motion_dim"])
        camera = CameraPose.from_dict(manifest["camera"])
        beta = ShapeParams(np.asarray(manifest["beta"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as error:
        raise FormatError(f"manifest.json: invalid entry {error}") from error

    bits_path = directory / "indicator.bin"
    if not bits_path.is_file():
        raise FormatError(f"Missing indicator file: {bits_path.name}")
    bits = np.frombuffer(bits_path.read_bytes(), dtype=np.uint8)
    if bits.shape[0] != T:
        raise ValidationError(f"indicator.bin: expected {T} bytes, found {bits.shape[0]}")
    if np.any(bits > 1):
        raise FormatError("indicator.bin: values must be 0 or 1")

    keypoints = None
    pairs = manifest.get("keypoint_pairs")
    if pairs is not None:
        path = directory / "keypoints.f32"
        if not path.is_file():
            raise FormatError(f"Missing keypoint file: {path.name}")
        data = path.read_bytes()
        expected = T * pairs * 4 * 4
        if len(data) != expected:
            raise ValidationError(f"keypoints.f32: expected {expected} bytes, found {len(data)}")
        keypoints = np.frombuffer(data, dtype="<f4").reshape(T, pairs, 2, 2).astype(np.float32)

    frames = None
    if (directory / "frames").is_dir():
        frames = read_frames(directory / "frames")
    elif manifest.get("has_frames"):
        logger.warning("Clip %s lists frames but frames/ is missing; loading without frames", directory.name)

    clip = DialogueClip(
        clip_id=manifest.get("clip_id", directory.name),
        speaker_id=manifest.get("speaker_id", ""),
        audio_self=read_wav(directory / "audio_self.wav"),
        audio_other=read_wav(directory / "audio_other.wav"),
        indicator=IndicatorTrack(bits.copy()),
        motion=read_motion(directory / "motion.f32", T, dim),
        beta=beta,
        camera=camera,
        frames=frames,
        keypoints=keypoints,
        fps=int(manifest.get("fps", Constants.Media.fps)),
    )
    clip.validate()
    return clip


_DTYPES = {"float32": "<f4", "float64": "<f8"}
_SUFFIXES = {"float32": "f32", "float64": "f64"}


def _bundle_dtype(key: str, array: np.ndarray) -> str:
    if np.issubdtype(array.dtype, np.integer):
        return "int64"
    if array.dtype.name in _DTYPES:
        return array.dtype.name
    logger.warning("Array %s: %s stored as float32", key, array.dtype)
    return "float32"


def write_bundle(directory: PathLike, name: str, arrays: dict[str, np.ndarray], meta: Optional[dict] = None):
    """Write arrays as a name.json manifest plus one raw little-endian blob per float array.

    Integer arrays (index lists) are stored in the manifest itself. Float32 and float64 arrays
    keep their precision; other float types are stored as float32 with a logged warning.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for key in sorted(arrays):
        array = np.asarray(arrays[key])
        dtype = _bundle_dtype(key, array)
        entry = {"name": key, "dtype": dtype, "shape": list(array.shape)}
        if dtype == "int64":
            entry["values"] = array.astype(np.int64).ravel().tolist()
        else:
            entry["file"] = f"{name}.{key}.{_SUFFIXES[dtype]}"
            blob = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
            (directory / entry["file"]).write_bytes(blob)
        entries.append(entry)
    _write_json(directory / f"{name}.json", {"format": FORMAT_VERSION, "meta": meta or {}, "arrays": entries})


def _read_bundle_array(directory: Path, entry: dict) -> np.ndarray:
    shape = entry["shape"]
    if "values" in entry:
        values = np.asarray(entry["values"], dtype=np.int64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(f"Array {entry['name']}: {values.size} values for shape {shape}")
        return values.reshape(shape)
    if entry.get("dtype") not in _DTYPES or "file" not in entry:
        raise FormatError(f"Array {entry['name']}: unsupported entry {entry.get('dtype')!r} without a blob file")
    blob_path = directory / entry["file"]
    if not blob_path.is_file():
        raise FormatError(f"Missing blob file: {blob_path.name}")
    data = blob_path.read_bytes()
    dtype = np.dtype(_DTYPES[entry["dtype"]])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise ValidationError(f"{blob_path.name}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def read_bundle(directory: PathLike, name: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read an array bundle written by `write_bundle`; returns (arrays, meta)."""
    directory = Path(directory)
    manifest = _read_json(directory / f"{name}.json")
    arrays = {entry["name"]: _read_bundle_array(directory, entry) for entry in manifest.get("arrays", [])}
    return arrays, manifest.get("meta", {})


_MODEL_ARRAYS = (
    "template",
    "shape_basis",
    "expr_basis",
    "jaw_weights",
    "jaw_pivot",
    "triangles",
    "lip_upper_idx",
    "lip_lower_idx",
    "lip_all_idx",
    "upper_face_idx",
)


def save_model(model: MorphableModel, directory: PathLike):
    """Write a morphable model as model.json (dims, index lists) plus float32 blobs for the
    template, bases and jaw articulation."""
    arrays = {}
    for name in _MODEL_ARRAYS:
        value = np.asarray(getattr(model, name))
        arrays[name] = value.astype(np.float32) if np.issubdtype(value.dtype, np.floating) else value
    write_bundle(directory, "model", arrays, {"V": model.V, "S": model.S, "E": model.E})


def load_model(directory: PathLike) -> MorphableModel:
    """Read a morphable model of any size (the mini model or a full V=5023, S=100 asset)."""
    arrays, _ = read_bundle(directory, "model")
    missing = [name for name in _MODEL_ARRAYS if name not in arrays]
    if missing:
        raise FormatError(f"model.json: missing arrays {missing}")
    try:
        return MorphableModel(**{name: arrays[name] for name in _MODEL_ARRAYS})
    except ValueError as error:
        raise ValidationError(f"model.json: {error}") from error


def save_checkpoint(directory: PathLike, state: dict[str, torch.Tensor], meta: dict):
    """Write a parameter state dict as checkpoint.json plus one blob per float tensor.

    Float32 and float64 tensors keep their dtype; half precision tensors are stored as float32.
    """
    arrays = {}
    for key, value in state.items():
        value = value.detach().cpu()
        if value.is_floating_point() and value.dtype not in (torch.float32, torch.float64):
            logger.warning("Checkpoint tensor %s: %s stored as float32", key, value.dtype)
            value = value.float()
        arrays[key] = value.numpy()
    write_bundle(directory, "checkpoint", arrays, meta)


def load_checkpoint(directory: PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    arrays, meta = read_bundle(directory, "checkpoint")
    return {key: torch.from_numpy(value.copy()) for key, value in arrays.items()}, meta
