"""Two-phase training of the motion model (stage 1) and the renderer (stage 2).

Both stages are first pretrained independently: stage 1 on windows of ground-truth motion,
stage 2 on ground-truth motion rendered against ground-truth frames. Joint training then
alternates one stage-1 step and one stage-2 step per iteration. In the stage-1 step the image
loss of a few frames, rendered from a short reverse-diffusion chain, is added to the stage-1
loss so that 2D supervision reaches the generated 3D motion. Each step leaves the parameters
of the other stage untouched.

Classes:
    TrainConfig: All training settings.
    TrainingRun: Trained modules plus loss history.

Functions:
    pretrain_stage1: Train the motion model alone.
    pretrain_stage2: Train the renderer alone.
    joint_train: Alternate stage-1 and stage-2 updates starting from two checkpoints.
    save_stage1 / load_stage1 / save_stage2 / load_stage2: Checkpoint files.
    parameter_digest: Hash of a module's parameters.
"""

from __future__ import annotations
import contextlib
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from mangotalk.audio import IndicatorTrack, encode
from mangotalk.dataset import DialogueDataset
from mangotalk.errors import ConfigurationError
from mangotalk.io import DialogueClip, PathLike, load_checkpoint, save_checkpoint
from mangotalk.morphable import MorphableModel, decode
from mangotalk.motiongen import (
    DenoiserConfig,
    DiffusionSchedule,
    MotionModel,
    Stage1Weights,
    gather_frames,
    q_sample,
    sample_windows,
    stage1_loss,
)
from mangotalk.perturb import perturb_indicator
from mangotalk.renderer import MetaGaussianRenderer, RendererConfig, Stage2Weights, stage2_loss
from mangotalk.synth import default_model

logger = logging.getLogger(__name__)

PHASES = ("pretrain1", "pretrain2", "joint")
LR_SCHEDULES = ("constant", "cosine", "warmup-cosine")


@dataclass
class TrainConfig:
    """Training settings.

    Attributes:
        phase: One of pretrain1, pretrain2 and joint.
        iterations: Optimizer steps (per stage in the joint phase).
        batch_stage1: Windows per stage-1 pretraining step.
        batch_stage2: Frames per stage-2 pretraining step.
        batch_joint: Windows per joint stage-1 step.
        lr: Base learning rate of both stages.
        lr_schedule_stage1: Learning-rate schedule of the motion model.
        lr_schedule_stage2: Learning-rate schedule of the renderer.
        warmup: Warmup iterations of the warmup-cosine schedule.
        seed: Seed of parameter initialization, window and frame selection and noise.
        deterministic: Restrict torch to deterministic kernels.
        n_render_frames: Frames rendered from each generated window in the joint phase.
        sample_steps: Length of the strided reverse chain in the joint phase.
        indicator_noise_alpha: Perturbation fraction applied to training indicators; 0 disables.
        audio_encoder: Name of the registered audio encoder.
        log_every: Iterations between progress log lines.
        log_path: JSON-lines loss log, one line per optimizer step.
        stage1_weights: Stage-1 loss weights.
        stage2_weights: Stage-2 loss weights.
        motion: Motion model settings.
        renderer: Renderer settings.
    """

    phase: str = "pretrain1"
    iterations: int = 2000
    batch_stage1: int = 16
    batch_stage2: int = 6
    batch_joint: int = 2
    lr: float = 1e-4
    lr_schedule_stage1: str = "cosine"
    lr_schedule_stage2: str = "warmup-cosine"
    warmup: int = 100
    seed: int = 0
    deterministic: bool = False
    n_render_frames: int = 5
    sample_steps: int = 5
    indicator_noise_alpha: float = 0.0
    audio_encoder: str = "desk"
    log_every: int = 50
    log_path: Optional[str] = None
    stage1_weights: Stage1Weights = field(default_factory=Stage1Weights)
    stage2_weights: Stage2Weights = field(default_factory=Stage2Weights)
    motion: DenoiserConfig = field(default_factory=DenoiserConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Raises ValueError for settings outside their valid range."""
        if self.phase not in PHASES:
            raise ValueError(f"Unknown training phase '{self.phase}', expected one of {PHASES}")
        for name in ("iterations", "batch_stage1", "batch_stage2", "batch_joint", "n_render_frames", "sample_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_render_frames > self.motion.window:
            raise ValueError(
                f"Cannot render {self.n_render_frames} frames from windows of {self.motion.window} frames"
            )
        for schedule in (self.lr_schedule_stage1, self.lr_schedule_stage2):
            if schedule not in LR_SCHEDULES:
                raise ValueError(f"Unknown learning-rate schedule '{schedule}', expected one of {LR_SCHEDULES}")
        if not 0.0 <= self.indicator_noise_alpha <= 1.0:
            raise ValueError(f"indicator_noise_alpha must lie in [0, 1], got {self.indicator_noise_alpha}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown training settings: {sorted(unknown)}")
        for key, weights in (("stage1_weights", Stage1Weights), ("stage2_weights", Stage2Weights)):
            if key in data:
                extra = set(data[key]) - set(weights.__dataclass_fields__)
                if extra:
                    raise ConfigurationError(f"Unknown {key}: {sorted(extra)}")
                data[key] = weights(**data[key])
        if "motion" in data:
            data["motion"] = DenoiserConfig.from_dict(data["motion"])
        if "renderer" in data:
            data["renderer"] = RendererConfig.from_dict(data["renderer"])
        return cls(**data)

    @classmethod
    def from_json(cls, path: PathLike) -> TrainConfig:
        with open(path, encoding="utf-8") as file:
            return cls.from_dict(json.load(file))


@dataclass
class TrainingRun:
    """Result of a training phase.

    Attributes:
        motion_model: Stage-1 model, if the phase trained or used one.
        schedule: Diffusion schedule of the motion model.
        renderer: Stage-2 renderer, if the phase trained or used one.
        history: One {iter, phase, losses} entry per optimizer step.
    """

    motion_model: Optional[MotionModel] = None
    schedule: Optional[DiffusionSchedule] = None
    renderer: Optional[MetaGaussianRenderer] = None
    history: list[dict] = field(default_factory=list)

    def losses(self, phase: str, key: str) -> list[float]:
        """The curve of one loss term over the steps of one phase."""
        return [entry["losses"][key] for entry in self.history if entry["phase"] == phase]


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over the module's parameters in state-dict order."""
    digest = hashlib.sha256()
    for name, value in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@contextlib.contextmanager
def frozen(module: nn.Module) -> Iterator[nn.Module]:
    """Disable gradients of every parameter of a module within the block."""
    flags = [parameter.requires_grad for parameter in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for parameter, flag in zip(module.parameters(), flags):
            parameter.requires_grad_(flag)


def _seed_everything(config: TrainConfig):
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(config.deterministic)


def _lr_scheduler(optimizer: torch.optim.Optimizer, name: str, iterations: int, warmup: int):
    if name == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=iterations)
    if name == "warmup-cosine":
        warmup = max(1, min(warmup, iterations))

        def factor(step: int) -> float:
            if step < warmup:
                return (step + 1) / warmup
            return 0.5 * (1 + math.cos(math.pi * (step - warmup) / max(1, iterations - warmup)))

        return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: 1.0)


class _LossLog:
    """Collects loss entries and mirrors them to an optional JSON-lines file."""

    def __init__(self, path: Optional[PathLike], log_every: int):
        self.entries: list[dict] = []
        self.log_every = log_every
        self._file = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._file = open(path, "w", encoding="utf-8")

    def record(self, iteration: int, phase: str, losses: dict[str, torch.Tensor]):
        entry = {"iter": iteration, "phase": phase, "losses": {k: float(v) for k, v in losses.items()}}
        self.entries.append(entry)
        if self._file is not None:
            self._file.write(json.dumps(entry, sort_keys=True) + "\n")
        if iteration % self.log_every == 0:
            summary = " ".join(f"{k}={v:.4g}" for k, v in entry["losses"].items())
            logger.info("%s iter %d: %s", phase, iteration, summary)

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None


@dataclass
class _ClipData:
    """Per-frame tensors of one training clip."""

    clip: DialogueClip
    h_self: np.ndarray
    h_other: np.ndarray
    bits: np.ndarray
    motion: np.ndarray
    beta: np.ndarray

    @property
    def T(self) -> int:
        return self.motion.shape[0]


def _training_clips(data: Union[DialogueDataset, Sequence[DialogueClip]]) -> list[DialogueClip]:
    if isinstance(data, DialogueDataset):
        clips = data.split("train") or [data[clip_id] for clip_id in data]
    else:
        clips = list(data)
    if not clips:
        raise ConfigurationError("No training clips.")
    return clips


def _morphable(data, morphable: Optional[MorphableModel]) -> MorphableModel:
    if morphable is not None:
        return morphable
    if isinstance(data, DialogueDataset):
        return data.morphable_model()
    return default_model()


def _prepare_clips(clips: list[DialogueClip], encoder_id: str) -> list[_ClipData]:
    prepared = []
    for clip in clips:
        T = clip.frame_count
        prepared.append(
            _ClipData(
                clip=clip,
                h_self=encode(clip.audio_self, encoder_id, T).features.astype(np.float32),
                h_other=encode(clip.audio_other, encoder_id, T).features.astype(np.float32),
                bits=clip.indicator.bits,
                motion=np.asarray(clip.motion.params, dtype=np.float32),
                beta=np.asarray(clip.beta.beta, dtype=np.float32),
            )
        )
    return prepared


def _check_motion_dims(config: DenoiserConfig, morphable: MorphableModel):
    if config.motion_dim != morphable.E + 6 or config.shape_dim != morphable.S:
        raise ConfigurationError(
            f"Motion model expects motion width {config.motion_dim} and {config.shape_dim} shape coefficients, "
            f"the morphable model has {morphable.E + 6} and {morphable.S}"
        )


def _window_batch(
    clips: list[_ClipData], batch_size: int, config: TrainConfig, rng: np.random.Generator
) -> dict:
    """Random windows, zero-padded before the clip start and after its end."""
    w, w_p = config.motion.window, config.motion.prev_window
    batch = {key: [] for key in ("h_self", "h_other", "indicator", "motion", "beta", "clip", "frames")}
    for _ in range(batch_size):
        index = int(rng.integers(len(clips)))
        data = clips[index]
        start = int(rng.integers(0, max(1, data.T - w + 1)))
        frames = np.arange(start - w_p, start + w)
        bits = gather_frames(data.bits, frames)
        if config.indicator_noise_alpha > 0:
            noise_seed = int(rng.integers(2**31))
            bits = perturb_indicator(IndicatorTrack(bits), config.indicator_noise_alpha, noise_seed).bits
        batch["h_self"].append(gather_frames(data.h_self, frames))
        batch["h_other"].append(gather_frames(data.h_other, frames))
        batch["indicator"].append(bits)
        batch["motion"].append(gather_frames(data.motion, frames))
        batch["beta"].append(data.beta)
        batch["clip"].append(index)
        batch["frames"].append(frames)
    tensors = {key: torch.as_tensor(np.stack(batch[key])) for key in ("h_self", "h_other", "indicator", "motion", "beta")}
    tensors["clip"] = batch["clip"]
    tensors["frames"] = batch["frames"]
    return tensors


def _stage1_terms(
    model: MotionModel,
    batch: dict,
    schedule: DiffusionSchedule,
    morphable: MorphableModel,
    weights: Stage1Weights,
    generator: torch.Generator,
) -> dict[str, torch.Tensor]:
    """Stage-1 loss of a window batch: noise the current frames to a random step, predict all frames."""
    w_p = model.config.prev_window
    motion = batch["motion"]
    x_prev, x0 = motion[:, :w_p], motion[:, w_p:]
    n = torch.randint(1, schedule.N + 1, (motion.shape[0],), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_noisy = q_sample(x0, n, noise, schedule)
    pred = model(batch["h_self"], batch["h_other"], batch["indicator"], x_prev, x_noisy, n, batch["beta"])
    return stage1_loss(pred, motion.to(pred.dtype), batch["beta"], morphable, weights)


def _stage2_frames(
    renderer: MetaGaussianRenderer,
    data: _ClipData,
    frames: Sequence[int],
    weights: Stage2Weights,
    motion: Optional[torch.Tensor] = None,
    backward: bool = True,
) -> dict[str, float]:
    """Render frames of one clip against its ground truth; gradients are accumulated per frame.

    The first frame of the clip with its ground-truth motion serves as reference image.
    `motion` replaces the ground-truth motion of the rendered frames when given.
    """
    clip = data.clip
    morphable = renderer.model
    state = renderer.prepare(clip.frames[0], data.beta, clip.camera, data.motion[0])
    totals: dict[str, float] = {}
    for i, frame in enumerate(frames):
        params = torch.as_tensor(data.motion[frame]) if motion is None else motion[i]
        vertices = decode(morphable, data.beta, params.to(renderer.dtype))
        losses = stage2_loss(renderer.render(vertices, state, clip.camera), clip.frames[frame], weights)
        if backward:
            (losses["total"] / len(frames)).backward(retain_graph=i < len(frames) - 1 or motion is not None)
        for key, value in losses.items():
            totals[key] = totals.get(key, 0.0) + float(value) / len(frames)
    return totals


def pretrain_stage1(
    data: Union[DialogueDataset, Sequence[DialogueClip]],
    config: TrainConfig,
    out_dir: Optional[PathLike] = None,
    morphable: Optional[MorphableModel] = None,
) -> TrainingRun:
    """Train the motion model on windows of ground-truth motion.

    Args:
        data: A dataset (its train split is used) or a list of clips.
        config: Training settings.
        out_dir: If given, the checkpoint is written there.
        morphable: The morphable model of the clips; taken from the dataset if omitted.

    Raises:
        ConfigurationError: If there are no training clips or the dimensions do not match.
    """
    clips = _training_clips(data)
    morphable = _morphable(data, morphable)
    _check_motion_dims(config.motion, morphable)
    _seed_everything(config)
    model = MotionModel(config.motion)
    schedule = DiffusionSchedule(config.motion.steps)
    prepared = _prepare_clips(clips, config.audio_encoder)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = _lr_scheduler(optimizer, config.lr_schedule_stage1, config.iterations, config.warmup)
    log = _LossLog(config.log_path, config.log_every)
    model.train()
    try:
        for iteration in range(config.iterations):
            batch = _window_batch(prepared, config.batch_stage1, config, rng)
            losses = _stage1_terms(model, batch, schedule, morphable, config.stage1_weights, generator)
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            scheduler.step()
            log.record(iteration, "pretrain1", losses)
    finally:
        log.close()
    if out_dir is not None:
        save_stage1(out_dir, model, schedule, config)
    return TrainingRun(motion_model=model, schedule=schedule, history=log.entries)


def _frame_clips(prepared: list[_ClipData]) -> list[_ClipData]:
    with_frames = [data for data in prepared if data.clip.frames is not None]
    if not with_frames:
        raise ConfigurationError("Stage-2 training needs clips with frames.")
    return with_frames


def pretrain_stage2(
    data: Union[DialogueDataset, Sequence[DialogueClip]],
    config: TrainConfig,
    out_dir: Optional[PathLike] = None,
    morphable: Optional[MorphableModel] = None,
) -> TrainingRun:
    """Train the renderer on ground-truth motion against ground-truth frames.

    Raises:
        ConfigurationError: If there are no training clips or none of them has frames.
    """
    clips = _training_clips(data)
    if any(clip.frames is None for clip in clips):
        raise ConfigurationError("Stage-2 training needs frames for every clip.")
    morphable = _morphable(data, morphable)
    _seed_everything(config)
    renderer = MetaGaussianRenderer(morphable, config.renderer)
    prepared = [
        _ClipData(clip, None, None, clip.indicator.bits, np.asarray(clip.motion.params, np.float32),
                  np.asarray(clip.beta.beta, np.float32))
        for clip in clips
    ]
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(renderer.parameters(), lr=config.lr)
    scheduler = _lr_scheduler(optimizer, config.lr_schedule_stage2, config.iterations, config.warmup)
    log = _LossLog(config.log_path, config.log_every)
    try:
        for iteration in range(config.iterations):
            data_ = prepared[int(rng.integers(len(prepared)))]
            frames = rng.choice(data_.T, size=min(config.batch_stage2, data_.T), replace=False)
            optimizer.zero_grad()
            losses = _stage2_frames(renderer, data_, frames.tolist(), config.stage2_weights)
            optimizer.step()
            scheduler.step()
            log.record(iteration, "pretrain2", losses)
    finally:
        log.close()
    if out_dir is not None:
        save_stage2(out_dir, renderer, config)
    return TrainingRun(renderer=renderer, history=log.entries)


def joint_train(
    ckpt1: PathLike,
    ckpt2: PathLike,
    data: Union[DialogueDataset, Sequence[DialogueClip]],
    config: TrainConfig,
    out_dir: Optional[PathLike] = None,
    morphable: Optional[MorphableModel] = None,
) -> TrainingRun:
    """Alternate stage-1 and stage-2 updates starting from pretrained checkpoints.

    Each iteration first updates the motion model with L_stage1 + L_stage2, where L_stage2 is
    computed on `n_render_frames` frames drawn without replacement from the windows produced
    by a `sample_steps`-long reverse chain whose final denoiser call carries gradient. It then
    updates the renderer with L_stage2 on ground-truth motion. The renderer is frozen during
    the first step and the motion model during the second.

    Args:
        ckpt1: Stage-1 checkpoint directory.
        ckpt2: Stage-2 checkpoint directory.
        data: A dataset (its train split is used) or a list of clips with frames.
        config: Training settings.
        out_dir: If given, the checkpoints are written to `out_dir/stage1` and `out_dir/stage2`.
        morphable: The morphable model of the clips; taken from the dataset if omitted.

    Raises:
        ConfigurationError: If a checkpoint cannot be loaded or does not match the data.
    """
    clips = _training_clips(data)
    morphable = _morphable(data, morphable)
    model, schedule = load_stage1(ckpt1)
    renderer = load_stage2(ckpt2, morphable)
    _check_motion_dims(model.config, morphable)
    config = replace(config, motion=model.config, renderer=renderer.config)
    _seed_everything(config)
    prepared = _frame_clips(_prepare_clips(clips, config.audio_encoder))

    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer1 = torch.optim.Adam(model.parameters(), lr=config.lr)
    optimizer2 = torch.optim.Adam(renderer.parameters(), lr=config.lr)
    scheduler1 = _lr_scheduler(optimizer1, config.lr_schedule_stage1, config.iterations, config.warmup)
    scheduler2 = _lr_scheduler(optimizer2, config.lr_schedule_stage2, config.iterations, config.warmup)
    log = _LossLog(config.log_path, config.log_every)
    w_p = model.config.prev_window
    model.train()
    try:
        for iteration in range(config.iterations):
            optimizer1.zero_grad()
            with frozen(renderer):
                batch = _window_batch(prepared, config.batch_joint, config, rng)
                losses = _stage1_terms(model, batch, schedule, morphable, config.stage1_weights, generator)
                losses["total"].backward()
                fused = model.fuse(batch["h_self"], batch["h_other"], batch["indicator"])
                x_prev = batch["motion"][:, :w_p]
                generated = sample_windows(
                    fused, x_prev, batch["beta"], schedule, model.denoiser, generator, config.sample_steps, grad_last=True
                )
                image_terms: dict[str, float] = {}
                for b, (index, frames) in enumerate(zip(batch["clip"], batch["frames"])):
                    data_ = prepared[index]
                    current = frames[w_p:]
                    valid = np.flatnonzero((current >= 0) & (current < data_.T))
                    chosen = rng.choice(valid, size=min(config.n_render_frames, valid.size), replace=False)
                    motion = generated[b, torch.as_tensor(chosen)]
                    terms = _stage2_frames(renderer, data_, current[chosen].tolist(), config.stage2_weights, motion)
                    for key, value in terms.items():
                        image_terms[key] = image_terms.get(key, 0.0) + value / len(batch["clip"])
            optimizer1.step()
            scheduler1.step()
            log.record(iteration, "joint-stage1", {**losses, **{f"image_{k}": v for k, v in image_terms.items()}})

            optimizer2.zero_grad()
            with frozen(model):
                data_ = prepared[int(rng.integers(len(prepared)))]
                frames = rng.choice(data_.T, size=min(config.batch_stage2, data_.T), replace=False)
                losses2 = _stage2_frames(renderer, data_, frames.tolist(), config.stage2_weights)
            optimizer2.step()
            scheduler2.step()
            log.record(iteration, "joint-stage2", losses2)
    finally:
        log.close()
    if out_dir is not None:
        save_stage1(Path(out_dir) / "stage1", model, schedule, config)
        save_stage2(Path(out_dir) / "stage2", renderer, config)
    return TrainingRun(motion_model=model, schedule=schedule, renderer=renderer, history=log.entries)


def save_stage1(directory: PathLike, model: MotionModel, schedule: DiffusionSchedule, config: TrainConfig = None):
    meta = {
        "stage": "stage1",
        "motion": model.config.to_dict(),
        "schedule": {"N": schedule.N, "s": schedule.s},
        "seed": config.seed if config is not None else None,
    }
    save_checkpoint(directory, model.state_dict(), meta)
    logger.info("Wrote stage-1 checkpoint to %s", directory)


def _load(directory: PathLike, stage: str) -> tuple[dict, dict]:
    try:
        state, meta = load_checkpoint(directory)
    except (OSError, ValueError) as error:
        raise ConfigurationError(f"Cannot load {stage} checkpoint from {directory}: {error}") from error
    if meta.get("stage") != stage:
        raise ConfigurationError(f"{directory} holds a {meta.get('stage')} checkpoint, expected {stage}")
    return state, meta


def load_stage1(directory: PathLike) -> tuple[MotionModel, DiffusionSchedule]:
    """Rebuild the motion model and its schedule from a checkpoint.

    Raises:
        ConfigurationError: If the directory does not hold a compatible stage-1 checkpoint.
    """
    state, meta = _load(directory, "stage1")
    model = MotionModel(DenoiserConfig.from_dict(meta["motion"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as error:
        raise ConfigurationError(f"Incompatible stage-1 checkpoint {directory}: {error}") from error
    return model, DiffusionSchedule(**meta["schedule"])


def save_stage2(directory: PathLike, renderer: MetaGaussianRenderer, config: TrainConfig = None):
    meta = {
        "stage": "stage2",
        "renderer": renderer.config.to_dict(),
        "vertices": renderer.model.V,
        "seed": config.seed if config is not None else None,
    }
    save_checkpoint(directory, renderer.state_dict(), meta)
    logger.info("Wrote stage-2 checkpoint to %s", directory)


def load_stage2(directory: PathLike, morphable: MorphableModel) -> MetaGaussianRenderer:
    """Rebuild the renderer for a morphable model from a checkpoint.

    Raises:
        ConfigurationError: If the checkpoint does not fit the morphable model.
    """
    state, meta = _load(directory, "stage2")
    if meta.get("vertices") != morphable.V:
        raise ConfigurationError(
            f"Stage-2 checkpoint was trained for {meta.get('vertices')} vertices, the model has {morphable.V}"
        )
    renderer = MetaGaussianRenderer(morphable, RendererConfig.from_dict(meta["renderer"]))
    try:
        renderer.load_state_dict(state)
    except RuntimeError as error:
        raise ConfigurationError(f"Incompatible stage-2 checkpoint {directory}: {error}") from error
    return renderer
