"""Module for managing collections of dialogue clips.

A dataset root holds one directory per clip (see `mangotalk.io`) and a `dataset.json`
manifest listing the clips and their train/val/test split. Identities in the test split
never appear in the training split.

Classes:
    DatasetManifest: Clip paths, speakers and splits of a dataset root.
    DialogueDataset: A collection of clips addressed by clip id.

Functions:
    default_data_root: The data root from the MANGO_DATA environment variable.
    split_counts: Default train/val/test sizes for a number of clips.
    build_synthetic_dataset: Write a synthetic dataset to a root directory.
"""

from __future__ import annotations
from dataclasses import dataclass, field
import json
import logging
import os
from pathlib import Path
from typing import Any, Iterator, Optional

from mangotalk.errors import ConfigurationError, FormatError, ValidationError
import mangotalk.io
from mangotalk.io import DialogueClip, PathLike
from mangotalk.morphable import MorphableModel
from mangotalk.synth import default_model, synth_clip

logger = logging.getLogger(__name__)

MANIFEST_NAME = "dataset.json"
MODEL_DIR = "model"
SPLITS = ("train", "val", "test")


def default_data_root() -> Path:
    return Path(os.environ.get("MANGO_DATA", "data"))


@dataclass
class DatasetManifest:
    """Clip paths, speakers and splits.

    Attributes:
        clips: Mapping of clip id to {"path": relative directory, "speaker_id": identity}.
        splits: Mapping of split name to clip ids.
        format: Manifest format version.
    """

    clips: dict[str, dict] = field(default_factory=dict)
    splits: dict[str, list[str]] = field(default_factory=lambda: {name: [] for name in SPLITS})
    format: int = mangotalk.io.FORMAT_VERSION

    def validate(self):
        """Check split disjointness, clip references and unseen test identities.

        Raises:
            ValidationError: If a rule is violated.
        """
        seen: dict[str, str] = {}
        for split, ids in self.splits.items():
            for clip_id in ids:
                if clip_id not in self.clips:
                    raise ValidationError(f"Split {split} references unknown clip {clip_id}")
                if clip_id in seen:
                    raise ValidationError(f"Clip {clip_id} is in both {seen[clip_id]} and {split}")
                seen[clip_id] = split
        train_speakers = {self.clips[c]["speaker_id"] for c in self.splits.get("train", [])}
        test_speakers = {self.clips[c]["speaker_id"] for c in self.splits.get("test", [])}
        shared = train_speakers & test_speakers
        if shared:
            raise ValidationError(f"Test identities also appear in training: {sorted(shared)}")

    def to_dict(self) -> dict:
        return {"format": self.format, "clips": self.clips, "splits": self.splits}

    @classmethod
    def from_dict(cls, data: dict) -> DatasetManifest:
        if data.get("format") != mangotalk.io.FORMAT_VERSION:
            raise FormatError(f"{MANIFEST_NAME}: unsupported format {data.get('format')}")
        manifest = cls(clips=data.get("clips", {}), splits=data.get("splits", {}), format=data["format"])
        manifest.validate()
        return manifest

    def write(self, root: PathLike):
        self.validate()
        path = Path(root) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, root: PathLike) -> DatasetManifest:
        path = Path(root) / MANIFEST_NAME
        if not path.is_file():
            raise FormatError(f"Missing dataset manifest: {MANIFEST_NAME}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as error:
            raise FormatError(f"Corrupt dataset manifest {MANIFEST_NAME}: {error}") from error
        return cls.from_dict(data)


def split_counts(n_clips: int) -> tuple[int, int, int]:
    """Train/val/test sizes; 40 clips give 30/5/5."""
    if n_clips < 1:
        raise ValueError(f"A dataset needs at least one clip, got {n_clips}")
    n_test = max(1, round(n_clips / 8)) if n_clips >= 2 else 0
    n_val = max(1, round(n_clips / 8)) if n_clips >= 3 else 0
    return n_clips - n_val - n_test, n_val, n_test


class DialogueDataset:
    """A collection of dialogue clips.

    Clips are loaded from their directories on first access. The indexing operator `[]`
    returns a clip by its id; iterating over the dataset yields the clip ids.

    Attributes:
        root: Dataset root directory, if the dataset was loaded from or written to disk.
        manifest: The dataset manifest.
    """

    root: Optional[Path]
    manifest: DatasetManifest

    def __init__(self, root: Optional[PathLike] = None, manifest: Optional[DatasetManifest] = None):
        self.root = Path(root) if root is not None else None
        self.manifest = manifest or DatasetManifest()
        self._clips: dict[str, DialogueClip] = {}

    @classmethod
    def from_root(cls, root: Optional[PathLike] = None) -> DialogueDataset:
        """Open a dataset root; defaults to `default_data_root()`."""
        root = Path(root) if root is not None else default_data_root()
        return cls(root, DatasetManifest.read(root))

    def add_clip(self, clip: DialogueClip, split: str = "train", overwrite: bool = False):
        """Add a clip to the collection and to a split.

        Args:
            clip: The clip.
            split: One of train, val and test.
            overwrite: If False and a clip with the same id exists, a KeyError is raised.
        """
        if split not in SPLITS:
            raise ValueError(f"Unknown split '{split}', expected one of {SPLITS}")
        if clip.clip_id in self.manifest.clips and not overwrite:
            raise KeyError(f"Clip {clip.clip_id} already in dataset.")
        for ids in self.manifest.splits.values():
            if clip.clip_id in ids:
                ids.remove(clip.clip_id)
        self.manifest.clips[clip.clip_id] = {"path": clip.clip_id, "speaker_id": clip.speaker_id}
        self.manifest.splits.setdefault(split, []).append(clip.clip_id)
        self._clips[clip.clip_id] = clip

    def write(self, root: Optional[PathLike] = None):
        """Write every clip directory and the manifest."""
        root = Path(root) if root is not None else self.root
        if root is None:
            raise ConfigurationError("No dataset root given.")
        root.mkdir(parents=True, exist_ok=True)
        for clip_id in self:
            mangotalk.io.save_clip(self[clip_id], root / self.manifest.clips[clip_id]["path"])
        self.manifest.write(root)
        self.root = root

    def split(self, name: str) -> list[DialogueClip]:
        return [self[clip_id] for clip_id in self.manifest.splits.get(name, [])]

    def get(self, clip_id: str, default: Any = None) -> DialogueClip | Any:
        """Get a clip by its id or return a default value."""
        if clip_id not in self:
            return default
        return self[clip_id]

    def release(self, clip_id: str):
        """Drop a loaded clip from memory; it is read from disk again on next access."""
        if self.root is None:
            raise ConfigurationError("Clips of a dataset without root cannot be released.")
        self._clips.pop(clip_id, None)

    def __getitem__(self, clip_id: str) -> DialogueClip:
        if clip_id not in self._clips:
            entry = self.manifest.clips[clip_id]
            if self.root is None:
                raise ConfigurationError(f"Clip {clip_id} is not loaded and the dataset has no root.")
            self._clips[clip_id] = mangotalk.io.load_clip(self.root / entry["path"])
        return self._clips[clip_id]

    def __contains__(self, clip_id) -> bool:
        return clip_id in self.manifest.clips

    def __iter__(self) -> Iterator[str]:
        return iter(self.manifest.clips)

    def __len__(self) -> int:
        return len(self.manifest.clips)

    def morphable_model(self) -> MorphableModel:
        """The model stored under the root, or the synthetic mini model if there is none."""
        if self.root is not None and (self.root / MODEL_DIR / "model.json").is_file():
            return mangotalk.io.load_model(self.root / MODEL_DIR)
        return default_model()


def build_synthetic_dataset(
    root: PathLike,
    n_clips: int = 40,
    seed: int = 0,
    T: int = 250,
    image_size: int = 128,
    clips_per_speaker: int = 5,
) -> DialogueDataset:
    """Synthesize clips, split them with unseen test identities and write them to root.

    Training clips share identities in groups of `clips_per_speaker`; every validation and
    test clip has its own identity.
    """
    n_train, n_val, n_test = split_counts(n_clips)
    model = default_model()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dataset = DialogueDataset(root)
    for index in range(n_clips):
        if index < n_train:
            split, speaker = "train", f"speaker{seed:03d}_{index // clips_per_speaker:03d}"
        else:
            split = "val" if index < n_train + n_val else "test"
            speaker = f"speaker{seed:03d}_{split}{index:03d}"
        clip = synth_clip(seed * 1000 + index, T, model=model, speaker_id=speaker, image_size=image_size)
        clip.clip_id = f"clip{index:04d}"
        dataset.add_clip(clip, split)
        mangotalk.io.save_clip(clip, root / clip.clip_id)
        dataset.release(clip.clip_id)
        logger.info("Synthesized %s (%s, %s)", clip.clip_id, split, speaker)
    mangotalk.io.save_model(model, root / MODEL_DIR)
    dataset.manifest.write(root)
    return dataset
