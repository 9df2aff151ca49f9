"""Evaluation metrics over meshes, motion-parameter distributions and images.

Mesh metrics compare zero-head-posed meshes decoded from predicted and ground-truth motion
and are reported in millimetres. Synchronization metrics work on lip-opening curves; MTM is
reported in frames. Distribution metrics compare per-frame motion parameters separately for
the expression, jaw and head-pose groups and separately for speaking (S) and listening (L)
frames.

Classes:
    LipCurve: Per-frame lip opening with a validity mask.
    MetricReport: All metric values plus flags, curves and segment sizes.

Functions:
    vertex_metrics: LVE, MVE, FDD and MOD on vertex arrays.
    mesh_metrics: Vertex metrics for motion sequences, in millimetres.
    pearson: Correlation with a degenerate-input flag.
    temporal_misalignment: Lag maximizing the correlation of two curves.
    sync_metrics: MTM and SLCC.
    frechet_from_stats / frechet_distance: Frechet distance of Gaussian fits.
    sample_diversity: Mean pairwise distance of independent generations.
    distribution_metrics: FD per group and state, SID per group.
    psnr / ssim / image_metrics: Image quality.
    lip_curve: Lip-opening curve from annotated 2D keypoints or projected 3D vertices.
    plot_lip_curves: Line chart of lip curves as PNG.
    run_external_scorer: Run a user-provided scorer on a frame directory.
    evaluate_clip: Collect every applicable metric for one clip.
    merge_reports: Average the reports of several clips.
"""

from __future__ import annotations
import csv
from dataclasses import dataclass, field
import json
import logging
import shlex
import subprocess
from pathlib import Path
from typing import Optional, Sequence

from matplotlib.figure import Figure
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg
from scipy.spatial.distance import pdist
import torch

from mangotalk.audio import frame_energy
from mangotalk.camera import CameraPose, project
from mangotalk.errors import FormatError
from mangotalk.morphable import MorphableModel, decode, decode_zero_pose, lip_opening
from mangotalk.motion import MotionSequence

logger = logging.getLogger(__name__)

METRIC_KEYS = (
    "LVE", "MVE", "FDD", "MOD", "MTM", "SLCC", "PSNR", "SSIM",
    "FD_exp_S", "FD_exp_L", "FD_jaw_S", "FD_jaw_L", "FD_pose_S", "FD_pose_L",
    "SID_exp", "SID_jaw", "SID_pose",
)
MM_PER_M = 1000.0
PSNR_CAP = 100.0
MAX_LAG = 12


def vertex_metrics(pred: np.ndarray, gt: np.ndarray, model: MorphableModel, neutral: Optional[np.ndarray] = None) -> dict:
    """LVE, MVE, FDD and MOD for vertex sequences of shape (T, V, 3), in input units.

    LVE is the mean over frames of the largest lip-vertex error, MVE the mean vertex error.
    FDD compares, per upper-face vertex, the temporal standard deviation of the displacement
    magnitude from the `neutral` mesh (the template if omitted). MOD is the mean absolute
    difference of the lip openings.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape.")
    neutral = model.template if neutral is None else neutral
    error = np.linalg.norm(pred - gt, axis=-1)
    upper = model.upper_face_idx
    pred_motion = np.linalg.norm(pred[:, upper] - neutral[upper], axis=-1)
    gt_motion = np.linalg.norm(gt[:, upper] - neutral[upper], axis=-1)
    return {
        "LVE": float(error[:, model.lip_all_idx].max(axis=1).mean()),
        "MVE": float(error.mean()),
        "FDD": float(np.abs(pred_motion.std(axis=0) - gt_motion.std(axis=0)).mean()) if upper.size else 0.0,
        "MOD": float(np.abs(lip_opening(model, pred) - lip_opening(model, gt)).mean()),
    }


def _zero_pose_mm(model: MorphableModel, beta, motion) -> np.ndarray:
    params = motion.params if isinstance(motion, MotionSequence) else motion
    with torch.no_grad():
        vertices = decode_zero_pose(model, beta, torch.as_tensor(np.asarray(params), dtype=torch.float64))
    return vertices.numpy() * MM_PER_M


def mesh_metrics(pred: MotionSequence, gt: MotionSequence, beta, model: MorphableModel) -> dict:
    """LVE, MVE, FDD and MOD in millimetres on zero-head-posed meshes."""
    if len(pred) != len(gt):
        raise ValueError(f"Predicted motion has {len(pred)} frames, ground truth {len(gt)}")
    neutral = _zero_pose_mm(model, beta, np.zeros((1, model.E + 6)))[0]
    return vertex_metrics(_zero_pose_mm(model, beta, pred), _zero_pose_mm(model, beta, gt), model, neutral)


def _is_flat(values: np.ndarray) -> bool:
    return bool(np.ptp(values) <= 1e-9 * max(1.0, float(np.max(np.abs(values)))))


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; returns (0.0, True) when either input is constant.

    Inputs whose spread is below 1e-9 of their magnitude count as constant.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2 or _is_flat(x) or _is_flat(y):
        return 0.0, True
    x, y = x - x.mean(), y - y.mean()
    denominator = np.sqrt(np.sum(x * x) * np.sum(y * y))
    return float(np.sum(x * y) / denominator), False


def temporal_misalignment(pred_curve: np.ndarray, gt_curve: np.ndarray, max_lag: int = MAX_LAG) -> tuple[int, bool]:
    """Lag of the prediction behind the ground truth that maximizes their correlation.

    For lag tau the prediction frames tau.. are compared with the ground-truth frames
    ..T-tau on their overlap. Ties go to the smallest absolute lag.

    Returns:
        The absolute lag in frames and a flag set when every correlation was degenerate.
    """
    T = len(pred_curve)
    if len(gt_curve) != T:
        raise ValueError("Curves differ in length.")
    best_lag, best_r, degenerate = 0, -np.inf, True
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda tau: (abs(tau), tau)):
        if T - abs(lag) < 2:
            continue
        if lag >= 0:
            r, flat = pearson(pred_curve[lag:], gt_curve[: T - lag])
        else:
            r, flat = pearson(pred_curve[: T + lag], gt_curve[-lag:])
        if flat:
            continue
        degenerate = False
        if r > best_r:
            best_lag, best_r = lag, r
    return abs(best_lag), degenerate


MTM_STRATEGIES = {"xcorr": temporal_misalignment}


def sync_metrics(
    pred: MotionSequence,
    gt: MotionSequence,
    audio_energy: np.ndarray,
    model: MorphableModel,
    beta,
    mtm_strategy: str = "xcorr",
) -> dict:
    """MTM (frames) and SLCC with degenerate-correlation flags.

    The lip-opening curves are taken from zero-head-posed meshes. `mtm_strategy` selects the
    misalignment estimator from MTM_STRATEGIES.
    """
    if mtm_strategy not in MTM_STRATEGIES:
        raise ValueError(f"Unknown MTM strategy '{mtm_strategy}', expected one of {sorted(MTM_STRATEGIES)}")
    if not len(pred) == len(gt) == len(audio_energy):
        raise ValueError(f"Lengths differ: pred {len(pred)}, gt {len(gt)}, energy {len(audio_energy)}")
    pred_curve = lip_opening(model, _zero_pose_mm(model, beta, pred))
    gt_curve = lip_opening(model, _zero_pose_mm(model, beta, gt))
    mtm, mtm_flat = MTM_STRATEGIES[mtm_strategy](pred_curve, gt_curve)
    slcc, slcc_flat = pearson(pred_curve, audio_energy)
    flags = []
    if mtm_flat:
        flags.append("MTM: constant lip curve, correlation undefined")
    if slcc_flat:
        flags.append("SLCC: constant input, correlation undefined")
    for flag in flags:
        logger.warning(flag)
    return {"MTM": mtm, "SLCC": slcc, "flags": flags}


def frechet_from_stats(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> tuple[float, bool]:
    """Frechet distance between two Gaussians.

    d = |mu1 - mu2|^2 + Tr(sigma1 + sigma2 - 2 sqrt(sigma1 sigma2)). Singular covariances are
    regularized by eps * I, which is reported by the returned flag.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ValueError("Gaussian statistics differ in dimension.")
    diff = mu1 - mu2
    singular = min(np.linalg.eigvalsh(sigma1).min(), np.linalg.eigvalsh(sigma2).min()) <= eps * 1e-3
    covmean = None
    if not singular:
        covmean = linalg.sqrtm(sigma1.dot(sigma2))
        singular = not np.isfinite(covmean).all()
    if singular:
        offset = np.eye(sigma1.shape[0]) * eps
        sigma1, sigma2 = sigma1 + offset, sigma2 + offset
        covmean = linalg.sqrtm(sigma1.dot(sigma2))
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    value = diff.dot(diff) + np.trace(sigma1) + np.trace(sigma2) - 2 * np.trace(covmean)
    return float(max(value, 0.0)), bool(singular)


def frechet_distance(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """Frechet distance between Gaussian fits of the rows of x and y."""
    x, y = np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("Frechet distance needs at least two samples per side.")
    return frechet_from_stats(
        x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)), y.mean(axis=0), np.atleast_2d(np.cov(y, rowvar=False))
    )


def _groups(expr_dim: int) -> dict[str, slice]:
    return {"exp": slice(0, expr_dim), "jaw": slice(expr_dim, expr_dim + 3), "pose": slice(expr_dim + 3, expr_dim + 6)}


def sample_diversity(samples: np.ndarray) -> float:
    """Mean pairwise L2 distance across K generations (K, T, d), averaged over frames."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ValueError("Diversity needs at least two generations.")
    return float(np.mean([pdist(samples[:, t]).mean() for t in range(samples.shape[1])]))


def distribution_metrics(
    generated: Sequence,
    reference: Sequence,
    indicators: Sequence,
    samples: Optional[Sequence] = None,
    expr_dim: int = 50,
) -> dict:
    """FD per parameter group and speaking state, SID per group.

    Args:
        generated: Generated motion sequences (T_i, D).
        reference: Ground-truth sequences, one per generated sequence.
        indicators: Speaking indicator per sequence (1 = speaking, S; 0 = listening, L).
        samples: Optional K independent generations (K, T, D) per clip for SID.
        expr_dim: Number of expression coefficients.

    Returns:
        FD_<group>_<state> and SID_<group> values (None when unavailable) and flags.
    """
    if len(generated) < 2 or len(reference) < 2:
        raise ValueError("Distribution metrics need at least two sequences per side.")
    if not len(generated) == len(reference) == len(indicators):
        raise ValueError("Generated, reference and indicator lists differ in length.")
    as_params = lambda s: np.asarray(s.params if isinstance(s, MotionSequence) else s, dtype=np.float64)  # noqa: E731
    as_bits = lambda b: np.asarray(getattr(b, "bits", b)).astype(bool)  # noqa: E731
    gen = np.concatenate([as_params(s) for s in generated])
    ref = np.concatenate([as_params(s) for s in reference])
    bits = np.concatenate([as_bits(b) for b in indicators])
    if not gen.shape[0] == ref.shape[0] == bits.shape[0]:
        raise ValueError("Sequences and indicators cover different numbers of frames.")

    result, flags = {}, []
    for group, columns in _groups(expr_dim).items():
        for state, mask in (("S", bits), ("L", ~bits)):
            key = f"FD_{group}_{state}"
            if mask.sum() < 2:
                result[key] = None
                flags.append(f"{key}: fewer than two frames in state {state}")
                continue
            result[key], regularized = frechet_distance(gen[mask][:, columns], ref[mask][:, columns])
            if regularized:
                flags.append(f"{key}: singular covariance regularized")
        result[f"SID_{group}"] = (
            float(np.mean([sample_diversity(np.asarray(k)[..., columns]) for k in samples])) if samples else None
        )
    for flag in flags:
        logger.warning(flag)
    result["flags"] = flags
    return result


def _as_float_frames(frames) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames.astype(np.float64) / 255.0
    return frames.astype(np.float64)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """PSNR with peak 1.0, capped at 100 dB."""
    mse = np.mean((pred - gt) ** 2)
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred: np.ndarray, gt: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over channels and valid window positions of (H, W, C) images in [0, 1]."""
    if pred.shape[0] < size or pred.shape[1] < size:
        raise ValueError(f"SSIM needs images of at least {size}x{size}")
    window = _gaussian_window(size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    local = lambda image: np.einsum("ijkl,kl->ij", sliding_window_view(image, window.shape), window)  # noqa: E731
    values = []
    for channel in range(pred.shape[2]):
        x, y = pred[..., channel], gt[..., channel]
        mu_x, mu_y = local(x), local(y)
        var_x = local(x * x) - mu_x**2
        var_y = local(y * y) - mu_y**2
        cov = local(x * y) - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
        values.append(ssim_map.mean())
    return float(np.mean(values))


def image_metrics(pred_frames, gt_frames) -> dict:
    """PSNR and SSIM averaged over frames (T, H, W, 3)."""
    pred, gt = _as_float_frames(pred_frames), _as_float_frames(gt_frames)
    if pred.shape != gt.shape:
        raise ValueError(f"Predicted frames {pred.shape} and ground truth {gt.shape} differ in shape.")
    return {
        "PSNR": float(np.mean([psnr(p, g) for p, g in zip(pred, gt)])),
        "SSIM": float(np.mean([ssim(p, g) for p, g in zip(pred, gt)])),
    }


@dataclass
class LipCurve:
    """Per-frame lip opening in pixels.

    Attributes:
        values: Opening per frame; 0 where invalid.
        valid: Whether the frame had the keypoints needed.
        source: "annotated-2D" or "projected-3D".
    """

    values: np.ndarray
    valid: np.ndarray
    source: str

    def to_csv(self, path):
        with open(path, "w", newline="") as file:
            writer = csv.writer(file)
            writer.writerow(["frame", "value"])
            for frame, (value, valid) in enumerate(zip(self.values, self.valid)):
                writer.writerow([frame, f"{value:.6f}" if valid else ""])


LIP_SOURCES = ("annotated-2D", "projected-3D")


def lip_curve(
    data,
    source: str,
    model: Optional[MorphableModel] = None,
    camera: Optional[CameraPose] = None,
    beta=None,
) -> LipCurve:
    """Lip-opening curve from annotations or from a reconstructed mesh.

    Args:
        data: For "annotated-2D", keypoints (T, pairs, 2, 2) with NaN for missing points. For
            "projected-3D", a motion sequence or vertices (T, V, 3).
        source: "annotated-2D" or "projected-3D".
        model: Morphable model, required for "projected-3D".
        camera: Clip camera, required for "projected-3D".
        beta: Shape coefficients, required when `data` is a motion sequence.

    Returns:
        Mean distance between paired upper and lower keypoints per frame.
    """
    if source not in LIP_SOURCES:
        raise ValueError(f"Unknown lip curve source '{source}', expected one of {LIP_SOURCES}")
    if source == "annotated-2D":
        if data is None:
            raise ValueError("No annotated lip keypoints available.")
        keypoints = np.asarray(data, dtype=np.float64)
        distances = np.linalg.norm(keypoints[:, :, 0] - keypoints[:, :, 1], axis=-1)
    else:
        if model is None or camera is None:
            raise ValueError("Projected lip curves need the morphable model and the camera.")
        if isinstance(data, MotionSequence):
            with torch.no_grad():
                data = decode(model, beta, torch.as_tensor(data.params, dtype=torch.float64))
        uv, in_front = project(torch.as_tensor(np.asarray(data, dtype=np.float64)), camera)
        uv = uv.numpy()
        distances = np.linalg.norm(uv[:, model.lip_upper_idx] - uv[:, model.lip_lower_idx], axis=-1)
        in_front = in_front.numpy()
        distances[~(in_front[:, model.lip_upper_idx] & in_front[:, model.lip_lower_idx])] = np.nan
    present = np.isfinite(distances)
    valid = present.any(axis=1)
    values = np.zeros(distances.shape[0])
    values[valid] = np.nanmean(distances[valid], axis=1)
    return LipCurve(values, valid, source)


def plot_lip_curves(curves: dict[str, LipCurve], path, fps: float = 25.0):
    """Write a PNG line chart with one line per curve; invalid frames leave gaps."""
    figure = Figure(figsize=(8, 3))
    axes = figure.add_subplot()
    for name, curve in curves.items():
        t = np.arange(curve.values.shape[0]) / fps
        axes.plot(t, np.where(curve.valid, curve.values, np.nan), label=name, linewidth=1.2)
    axes.set_xlabel("time (s)")
    axes.set_ylabel("lip opening (px)")
    axes.legend(loc="upper right")
    figure.tight_layout()
    figure.savefig(str(path), format="png", dpi=100)


def run_external_scorer(command: str, frames_dir) -> dict:
    """Run `command <frames_dir>` and parse the JSON object it prints.

    Raises:
        RuntimeError: If the command fails.
        FormatError: If the output is not a JSON object.
    """
    result = subprocess.run(shlex.split(command) + [str(frames_dir)], capture_output=True, text=True, check=False)
    if result.returncode != 0:
        raise RuntimeError(f"External scorer failed with exit code {result.returncode}: {result.stderr.strip()}")
    try:
        scores = json.loads(result.stdout)
    except json.JSONDecodeError as error:
        raise FormatError(f"External scorer output is not JSON: {error}") from error
    if not isinstance(scores, dict):
        raise FormatError("External scorer output must be a JSON object.")
    return scores


@dataclass
class MetricReport:
    """Metric values with their provenance.

    Attributes:
        values: One entry per key of METRIC_KEYS; None when the metric was not computed.
            Vertex metrics are in millimetres, MTM in frames.
        flags: Warnings raised while computing (degenerate correlation, regularization).
        curves: Lip-opening curves by name.
        segments: Number of speaking and listening frames used.
        external: Scores returned by an external scorer.
    """

    values: dict = field(default_factory=lambda: {key: None for key in METRIC_KEYS})
    flags: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    segments: dict = field(default_factory=dict)
    external: dict = field(default_factory=dict)

    def update(self, results: dict):
        for key, value in results.items():
            if key == "flags":
                self.flags.extend(value)
            elif key in self.values:
                self.values[key] = None if value is None else float(value)

    def to_dict(self) -> dict:
        return {
            "metrics": dict(self.values),
            "flags": list(self.flags),
            "curves": {name: [float(v) for v in curve] for name, curve in self.curves.items()},
            "segments": dict(self.segments),
            "external": dict(self.external),
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def to_csv(self, path):
        with open(path, "w", newline="") as file:
            writer = csv.writer(file)
            writer.writerow(["metric", "value"])
            for key in METRIC_KEYS:
                value = self.values[key]
                writer.writerow([key, "" if value is None else repr(value)])


def evaluate_clip(
    pred: MotionSequence,
    clip,
    model: MorphableModel,
    pred_frames: Optional[np.ndarray] = None,
    samples: Optional[np.ndarray] = None,
) -> MetricReport:
    """Mesh, synchronization, image and diversity metrics of one generated clip.

    FD needs several clips and is left empty here (see `distribution_metrics`).
    """
    report = MetricReport()
    report.update(mesh_metrics(pred, clip.motion, clip.beta.beta, model))
    energy = frame_energy(clip.audio_self, clip.frame_count, clip.fps)
    report.update(sync_metrics(pred, clip.motion, energy, model, clip.beta.beta))
    if pred_frames is not None and clip.frames is not None:
        report.update(image_metrics(pred_frames, clip.frames))
    if samples is not None:
        for group, columns in _groups(model.E).items():
            report.values[f"SID_{group}"] = sample_diversity(np.asarray(samples)[..., columns])
    report.flags.append("FD: needs at least two clips")
    report.curves["pred"] = lip_opening(model, _zero_pose_mm(model, clip.beta.beta, pred))
    report.curves["gt"] = lip_opening(model, _zero_pose_mm(model, clip.beta.beta, clip.motion))
    bits = clip.indicator.bits
    report.segments = {"speaking": int(bits.sum()), "listening": int((1 - bits).sum())}
    return report


def merge_reports(reports: Sequence[MetricReport], names: Optional[Sequence[str]] = None) -> MetricReport:
    """Average per-clip reports; curves are prefixed with the clip name."""
    if not reports:
        raise ValueError("No reports to merge.")
    names = names or [f"clip{index}" for index in range(len(reports))]
    merged = MetricReport()
    for key in METRIC_KEYS:
        values = [report.values[key] for report in reports if report.values[key] is not None]
        merged.values[key] = float(np.mean(values)) if values else None
    for name, report in zip(names, reports):
        merged.flags.extend(f"{name}: {flag}" for flag in report.flags)
        merged.curves.update({f"{name}/{curve}": values for curve, values in report.curves.items()})
        for segment, count in report.segments.items():
            merged.segments[segment] = merged.segments.get(segment, 0) + count
    return merged
