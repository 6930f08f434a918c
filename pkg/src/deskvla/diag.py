"""Vision-influence measurement and failure-mode detectors over recorded episodes and deployment logs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import RangeError
from .data import Episode, InputError
from .policy import VLAPolicy, preprocess_joints, tokenize
from .runtime import frames_to_unit

LABELS = ("Weak", "Moderate", "Strong", "VeryStrong")


@dataclass
class VisionInfluenceReport:
    delta: float
    percent: float
    label: str
    per_step: np.ndarray = field(repr=False)


def classify_influence(delta: float) -> str:
    if not delta >= 0:
        raise RangeError(f"vision influence must be non-negative, got {delta}")
    if delta < 1.0:
        return "Weak"
    if delta <= 3.0:
        return "Moderate"
    if delta <= 6.0:
        return "Strong"
    return "VeryStrong"


def paired_inputs(policy: VLAPolicy, ep: Episode, frames: np.ndarray):
    """Inputs of the with-vision and zeroed-vision passes; only the image payloads differ."""
    top = torch.from_numpy(frames_to_unit(ep.top[frames]))
    wrist = torch.from_numpy(frames_to_unit(ep.wrist[frames]))
    joints = torch.from_numpy(preprocess_joints(ep.states[frames], policy.limits))
    ids = torch.from_numpy(np.tile(tokenize(ep.task, policy.cfg), (len(frames), 1)))
    return (top, wrist, joints, ids), (torch.zeros_like(top), torch.zeros_like(wrist), joints, ids)


@torch.no_grad()
def vision_influence(policy: VLAPolicy, ep: Episode, stride: int = 1, batch_size: int = 64) -> VisionInfluenceReport:
    """Mean L2 gap between first chunk actions with real and all-zero images, in physical units.

    Joint actions are compared in degrees and the gripper in its own unit, so
    the magnitudes are comparable to a robot-space action norm.
    """
    n = len(ep)
    if n == 0:
        raise InputError("episode has no steps")
    frames = np.arange(0, n, stride)
    scale = np.append(policy.limits.half_range[:5], 1.0)
    diffs, norms = [], []
    for i in range(0, len(frames), batch_size):
        real, blank = paired_inputs(policy, ep, frames[i : i + batch_size])
        a_with = policy(*real)[:, 0].numpy() * scale
        a_without = policy(*blank)[:, 0].numpy() * scale
        diffs.append(np.linalg.norm(a_with - a_without, axis=1))
        norms.append(np.linalg.norm(a_with, axis=1))
    per_step = np.concatenate(diffs)
    delta = float(per_step.mean())
    mean_norm = float(np.concatenate(norms).mean())
    percent = 100.0 * delta / mean_norm if mean_norm > 0 else 0.0
    return VisionInfluenceReport(delta=delta, percent=percent, label=classify_influence(delta), per_step=per_step)


@dataclass
class OscillationReport:
    reversals: int
    oscillatory: bool
    ticks: list[int]


def detect_oscillation(distances, success: bool = False, window: int = 5, threshold: int = 6) -> OscillationReport:
    """Count sign changes of the moving-averaged distance derivative."""
    d = np.asarray(distances, dtype=np.float64)
    if len(d) < window:
        raise InputError(f"trace of {len(d)} ticks is shorter than the {window}-tick window")
    smooth = np.convolve(d, np.ones(window) / window, mode="valid")
    slope = np.sign(np.diff(smooth))
    ticks, last = [], 0.0
    for i, s in enumerate(slope):
        if s == 0:
            continue
        if last and s != last:
            ticks.append(i + window // 2)
        last = s
    return OscillationReport(reversals=len(ticks), oscillatory=len(ticks) >= threshold and not success, ticks=ticks)


@dataclass
class ConfigInfluence:
    """Vision influence of one configuration aggregated over episodes."""
    config: str
    episodes: int
    reports: list[VisionInfluenceReport]

    @property
    def deltas(self) -> np.ndarray:
        return np.array([r.delta for r in self.reports])

    @property
    def delta_mean(self) -> float:
        return float(self.deltas.mean()) if self.reports else 0.0

    @property
    def delta_std(self) -> float:
        return float(self.deltas.std()) if self.reports else 0.0

    @property
    def label(self) -> str:
        return classify_influence(self.delta_mean)


def influence_over(policy: VLAPolicy, episodes: list[Episode], config: str, n_train_episodes: int,
                   stride: int = 1) -> ConfigInfluence:
    return ConfigInfluence(config, n_train_episodes, [vision_influence(policy, ep, stride) for ep in episodes])


def _g(x: float) -> str:
    return f"{x:.6g}"


def emit_report(reports: list[ConfigInfluence], path) -> tuple[Path, Path]:
    """Summary CSV ``config,episodes,delta_mean,delta_std,label`` and a per-episode detail CSV."""
    path = Path(path)
    summary = ["config,episodes,delta_mean,delta_std,label"]
    detail = ["config,episode,delta,percent,label"]
    for r in reports:
        summary.append(f"{r.config},{r.episodes},{_g(r.delta_mean)},{_g(r.delta_std)},{r.label}")
        for i, e in enumerate(r.reports):
            detail.append(f"{r.config},{i},{_g(e.delta)},{_g(e.percent)},{e.label}")
    detail_path = path.with_name(path.stem + "_detail.csv")
    path.write_text("\n".join(summary) + "\n")
    detail_path.write_text("\n".join(detail) + "\n")
    return path, detail_path
