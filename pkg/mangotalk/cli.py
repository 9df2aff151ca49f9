"""Command-line entry point.

Every subcommand validates its inputs before writing anything. Exit codes: 0 on success,
2 for invalid arguments or data, 1 for any other failure. Logs go to stderr.
"""

from __future__ import annotations
import argparse
from dataclasses import replace
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from mangotalk import __version__
import mangotalk.io
from mangotalk.audio import encode
from mangotalk.dataset import MODEL_DIR, DialogueDataset, build_synthetic_dataset, default_data_root
from mangotalk.errors import ConfigurationError
from mangotalk.io import DialogueClip
from mangotalk.metrics import (
    LIP_SOURCES,
    distribution_metrics,
    evaluate_clip,
    lip_curve,
    merge_reports,
    plot_lip_curves,
    run_external_scorer,
)
from mangotalk.morphable import MorphableModel, decode
from mangotalk.motion import MotionSequence
from mangotalk.motiongen import generate_from_features
from mangotalk.perturb import perturb_indicator, robustness_sweep
from mangotalk.synth import MIN_FRAMES, default_model
from mangotalk.training import TrainConfig, joint_train, load_stage1, load_stage2, pretrain_stage1, pretrain_stage2

logger = logging.getLogger(__name__)


def _existing(path: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"No such file or directory: {path}")
    return path


def _morphable_for(clip_dir: Path) -> MorphableModel:
    """The model stored next to a clip in its dataset root, else the synthetic mini model."""
    model_dir = clip_dir.parent / MODEL_DIR
    if (model_dir / "model.json").is_file():
        return mangotalk.io.load_model(model_dir)
    return default_model()


def _deep_update(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _train_config(args, phase: str) -> TrainConfig:
    """Settings from flags, overridden by the --config file."""
    config = TrainConfig(phase=phase, seed=args.seed, deterministic=args.deterministic)
    settings = config.to_dict()
    for flag, key in (
        ("iterations", "iterations"),
        ("ddim_steps", "sample_steps"),
        ("audio_encoder", "audio_encoder"),
        ("log", "log_path"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = str(value) if key == "log_path" else value
    for flag in ("window", "prev_window", "steps"):
        value = getattr(args, flag, None)
        if value is not None:
            settings["motion"][flag] = value
    if args.config is not None:
        with open(_existing(args.config), encoding="utf-8") as file:
            _deep_update(settings, json.load(file))
    return TrainConfig.from_dict(settings)


def _open_dataset(args) -> DialogueDataset:
    return DialogueDataset.from_root(_existing(args.data) if args.data else default_data_root())


def cmd_synth_data(args) -> int:
    if args.clips < 1:
        raise ValueError(f"--clips must be positive, got {args.clips}")
    if args.frames < MIN_FRAMES:
        raise ValueError(f"--frames must be at least {MIN_FRAMES}, got {args.frames}")
    dataset = build_synthetic_dataset(args.out, args.clips, args.seed, args.frames, args.image_size)
    logger.info("Wrote %d clips to %s", len(dataset), args.out)
    return 0


def cmd_train_stage1(args) -> int:
    config = _train_config(args, "pretrain1")
    dataset = _open_dataset(args)
    pretrain_stage1(dataset, config, args.out)
    return 0


def cmd_train_stage2(args) -> int:
    config = _train_config(args, "pretrain2")
    dataset = _open_dataset(args)
    pretrain_stage2(dataset, config, args.out)
    return 0


def cmd_train_joint(args) -> int:
    config = _train_config(args, "joint")
    ckpt1, ckpt2 = _existing(args.ckpt1), _existing(args.ckpt2)
    dataset = _open_dataset(args)
    joint_train(ckpt1, ckpt2, dataset, config, args.out)
    return 0


def _generate(args, clip: DialogueClip) -> MotionSequence:
    model, schedule = load_stage1(_existing(args.ckpt))
    if args.window is not None or args.prev_window is not None:
        model.config = replace(
            model.config,
            window=args.window or model.config.window,
            prev_window=model.config.prev_window if args.prev_window is None else args.prev_window,
        )
    T = clip.frame_count
    h_self = encode(clip.audio_self, args.audio_encoder, T).features
    h_other = encode(clip.audio_other, args.audio_encoder, T).features
    return generate_from_features(
        h_self, h_other, clip.indicator, clip.beta, model, schedule, args.seed, args.ddim_steps
    )


def _render_frames(ckpt: Path, clip: DialogueClip, motion: MotionSequence, morphable: MorphableModel) -> np.ndarray:
    renderer = load_stage2(ckpt, morphable)
    if clip.frames is None:
        raise ConfigurationError(f"Clip {clip.clip_id} has no reference frame to render from.")
    frames = []
    with torch.no_grad():
        state = renderer.prepare(clip.frames[0], clip.beta, clip.camera, clip.motion.params[0])
        for params in motion.params:
            vertices = decode(morphable, clip.beta, torch.as_tensor(params, dtype=renderer.dtype))
            frames.append(renderer.render(vertices, state, clip.camera).numpy())
    return np.stack(frames)


def cmd_generate(args) -> int:
    clip_dir = _existing(args.clip)
    clip = mangotalk.io.load_clip(clip_dir)
    render_ckpt = _existing(args.render_ckpt) if args.render_ckpt else None
    motion = _generate(args, clip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mangotalk.io.write_motion(out / "motion.f32", motion)
    if render_ckpt is not None:
        frames = _render_frames(render_ckpt, clip, motion, _morphable_for(clip_dir))
        mangotalk.io.write_frames(out / "frames", frames)
    logger.info("Generated %d frames for %s", len(motion), clip.clip_id)
    return 0


def cmd_render(args) -> int:
    clip_dir = _existing(args.clip)
    clip = mangotalk.io.load_clip(clip_dir)
    motion = clip.motion
    if args.motion:
        motion = mangotalk.io.read_motion(_existing(args.motion), clip.frame_count, clip.motion.params.shape[1])
    frames = _render_frames(_existing(args.ckpt), clip, motion, _morphable_for(clip_dir))
    mangotalk.io.write_frames(args.out, frames)
    return 0


def _read_prediction(pred_dir: Path, clip: DialogueClip) -> tuple[MotionSequence, Optional[np.ndarray]]:
    motion = mangotalk.io.read_motion(_existing(pred_dir / "motion.f32"), clip.frame_count, clip.motion.params.shape[1])
    frames = mangotalk.io.read_frames(pred_dir / "frames") if (pred_dir / "frames").is_dir() else None
    return motion, frames


def cmd_evaluate(args) -> int:
    if len(args.pred) != len(args.gt):
        raise ValueError(f"Got {len(args.pred)} prediction and {len(args.gt)} ground-truth directories")
    pred_dirs = [_existing(path) for path in args.pred]
    gt_dirs = [_existing(path) for path in args.gt]
    clips = [mangotalk.io.load_clip(path) for path in gt_dirs]
    predictions = [_read_prediction(path, clip) for path, clip in zip(pred_dirs, clips)]
    morphable = _morphable_for(gt_dirs[0])
    samples = None
    if args.samples:
        samples = np.stack(
            [_read_prediction(_existing(path), clips[0])[0].params for path in args.samples]
        )

    reports = [
        evaluate_clip(motion, clip, morphable, frames, samples if index == 0 else None)
        for index, ((motion, frames), clip) in enumerate(zip(predictions, clips))
    ]
    report = merge_reports(reports, [clip.clip_id for clip in clips])
    if len(clips) >= 2:
        report.flags = [flag for flag in report.flags if "FD: needs" not in flag]
        report.update(
            distribution_metrics(
                [motion for motion, _ in predictions],
                [clip.motion for clip in clips],
                [clip.indicator for clip in clips],
                expr_dim=morphable.E,
            )
        )
    if args.external_scorer:
        frame_dir = pred_dirs[0] / "frames"
        if not frame_dir.is_dir():
            raise ValueError(f"The external scorer needs rendered frames in {frame_dir}")
        report.external = run_external_scorer(args.external_scorer, frame_dir)

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(report_path)
    report.to_csv(report_path.with_suffix(".csv"))
    logger.info("Wrote %s", report_path)
    return 0


def cmd_perturb_indicator(args) -> int:
    clip = mangotalk.io.load_clip(_existing(args.clip))
    perturbed = perturb_indicator(clip.indicator, args.alpha, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mangotalk.io.write_indicator(out, perturbed)
    logger.info("Flipped %d of %d frames", int(np.sum(perturbed.bits != clip.indicator.bits)), len(perturbed))
    return 0


def cmd_robustness_sweep(args) -> int:
    clip_dir = _existing(args.clip)
    clip = mangotalk.io.load_clip(clip_dir)
    model, schedule = load_stage1(_existing(args.ckpt))
    for alpha in args.alphas or []:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"Perturbation fractions must lie in [0, 1], got {alpha}")
    robustness_sweep(
        model,
        schedule,
        clip,
        _morphable_for(clip_dir),
        args.alphas,
        args.seed,
        args.ddim_steps,
        args.audio_encoder,
        args.out,
    )
    return 0


def cmd_lip_curve(args) -> int:
    clip_dir = _existing(args.clip)
    clip = mangotalk.io.load_clip(clip_dir)
    morphable = _morphable_for(clip_dir)
    motion = clip.motion
    if args.motion:
        motion = mangotalk.io.read_motion(_existing(args.motion), clip.frame_count, clip.motion.params.shape[1])
    if args.source == "annotated-2D" and clip.keypoints is None:
        raise ValueError(f"Clip {clip.clip_id} has no lip keypoint annotations.")
    curves = {}
    if clip.keypoints is not None:
        curves["annotated-2D"] = lip_curve(clip.keypoints, "annotated-2D")
    curves["projected-3D"] = lip_curve(motion, "projected-3D", morphable, clip.camera, clip.beta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curves[args.source].to_csv(out)
    if args.plot:
        plot_lip_curves(curves, args.plot, clip.fps)
    return 0


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument("--deterministic", action="store_true", help="use deterministic kernels only")
    parser.add_argument("--verbose", "-v", action="store_true", help="log debug messages")


def _add_model_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--audio-encoder", default="desk", help="registered audio encoder")
    parser.add_argument("--ddim-steps", type=int, default=None, help="strided sampling steps (default: all)")
    parser.add_argument("--window", type=int, default=None, help="frames generated per window")
    parser.add_argument("--prev-window", type=int, default=None, help="conditioning frames per window")


def _add_training_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--data", default=None, help="dataset root (default: $MANGO_DATA)")
    parser.add_argument("--out", required=True, help="checkpoint directory")
    parser.add_argument("--config", default=None, help="JSON file with training settings; overrides flags")
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None, help="diffusion steps N")
    parser.add_argument("--log", default=None, help="JSON-lines loss log")
    _add_model_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mangotalk", description="Conversational 3D talking-head pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("synth-data", help="write a synthetic dialogue dataset")
    sub.add_argument("--out", required=True)
    sub.add_argument("--clips", type=int, default=40)
    sub.add_argument("--frames", type=int, default=250)
    sub.add_argument("--image-size", type=int, default=128)
    sub.set_defaults(handler=cmd_synth_data)

    for name, handler in (("train-stage1", cmd_train_stage1), ("train-stage2", cmd_train_stage2)):
        sub = commands.add_parser(name, help=f"pretrain {name[-6:]}")
        _add_training_flags(sub)
        sub.set_defaults(handler=handler)

    sub = commands.add_parser("train-joint", help="alternate stage-1 and stage-2 training")
    sub.add_argument("--ckpt1", required=True)
    sub.add_argument("--ckpt2", required=True)
    _add_training_flags(sub)
    sub.set_defaults(handler=cmd_train_joint)

    sub = commands.add_parser("generate", help="generate motion for a clip")
    sub.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    sub.add_argument("--clip", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--render-ckpt", default=None, help="stage-2 checkpoint; also render frames")
    _add_model_flags(sub)
    sub.set_defaults(handler=cmd_generate)

    sub = commands.add_parser("render", help="render motion with a stage-2 checkpoint")
    sub.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    sub.add_argument("--clip", required=True)
    sub.add_argument("--motion", default=None, help="motion.f32 to render (default: ground truth)")
    sub.add_argument("--out", required=True, help="frame directory")
    sub.set_defaults(handler=cmd_render)

    sub = commands.add_parser("evaluate", help="compute metrics of predictions")
    sub.add_argument("--pred", required=True, nargs="+", help="prediction directories with motion.f32")
    sub.add_argument("--gt", required=True, nargs="+", help="ground-truth clip directories")
    sub.add_argument("--report", required=True, help="report JSON; a CSV is written next to it")
    sub.add_argument("--samples", nargs="*", default=None, help="independent generations of the first clip")
    sub.add_argument("--external-scorer", default=None, help="command scoring a frame directory")
    sub.set_defaults(handler=cmd_evaluate)

    sub = commands.add_parser("perturb-indicator", help="flip a random indicator segment")
    sub.add_argument("--clip", required=True)
    sub.add_argument("--alpha", type=float, required=True)
    sub.add_argument("--out", required=True, help="indicator.bin to write")
    sub.set_defaults(handler=cmd_perturb_indicator)

    sub = commands.add_parser("robustness-sweep", help="MVE under increasing indicator noise")
    sub.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    sub.add_argument("--clip", required=True)
    sub.add_argument("--out", required=True, help="directory for robustness.csv and robustness.png")
    sub.add_argument("--alphas", type=float, nargs="*", default=None)
    sub.add_argument("--audio-encoder", default="desk")
    sub.add_argument("--ddim-steps", type=int, default=None)
    sub.set_defaults(handler=cmd_robustness_sweep)

    sub = commands.add_parser("lip-curve", help="export a lip-opening curve")
    sub.add_argument("--clip", required=True)
    sub.add_argument("--source", choices=LIP_SOURCES, default="projected-3D")
    sub.add_argument("--motion", default=None, help="motion.f32 for the projected curve (default: ground truth)")
    sub.add_argument("--out", required=True, help="curve CSV")
    sub.add_argument("--plot", default=None, help="PNG comparing the available sources")
    sub.set_defaults(handler=cmd_lip_curve)

    for sub in commands.choices.values():
        _add_common(sub)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.manual_seed(args.seed)
    torch.use_deterministic_algorithms(args.deterministic)
    try:
        return args.handler(args)
    except (ValueError, ConfigurationError) as error:
        logger.error("%s", error)
        return 2
    except Exception:
        logger.exception("Command %s failed", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
