"""Imitation training: chunk MSE, cosine learning rate, clipping, AdamW, accumulation, checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckio
from .core import NumericError, RangeError, ShapeError
from .data import Episode, InputError, chunk_targets
from .policy import PolicyConfig, VLAPolicy, preprocess_joints, quantize_policy, set_trainable, tokenize, \
    trainable_parameters
from .runtime import frames_to_unit

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1
    accum_steps: int = 8
    total_steps: int = 5000
    lr_max: float = 5e-5
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_threshold: float = 1.0
    clip_norm: str = "l2"  # "l2" or "inf"
    checkpoint_interval: int = 1000
    val_fraction: float = 0.1
    val_stride: int = 1
    seed: int = 0
    freeze_vision: bool = True
    quantize_base: bool = False
    control_rate: float = 20.0
    fps: float = 30.0

    def __post_init__(self):
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("batch_size and accum_steps must be >= 1")
        if not self.lr_max > self.lr_min > 0:
            raise ValueError("need lr_max > lr_min > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.clip_norm not in ("l2", "inf"):
            raise ValueError("clip_norm must be 'l2' or 'inf'")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accum_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        conv = {"int": int, "float": float, "str": str,
                "bool": lambda v: v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")}
        return cls(**{f.name: conv[f.type](d[f.name]) for f in fields(cls) if f.name in d})


# -- primitives -------------------------------------------------------------


def action_loss(pred, target):
    """(1/T) * sum_t ||pred_t - target_t||^2 over the last two axes; works on numpy and torch."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.shape[-2] < 1:
        raise ShapeError("empty action sequence")
    return ((pred - target) ** 2).sum(-1).mean(-1)


def lr_at(t: float, cfg: TrainConfig) -> float:
    if not 0 <= t <= cfg.total_steps:
        raise RangeError(f"step {t} outside [0, {cfg.total_steps}]")
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * t / cfg.total_steps)) / 2


def grad_norm(grads: dict[str, torch.Tensor], kind: str = "l2") -> float:
    if kind == "inf":
        return max((float(g.abs().max()) for g in grads.values() if g.numel()), default=0.0)
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads: dict[str, torch.Tensor], threshold: float, kind: str = "l2") -> dict[str, torch.Tensor]:
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    norm = grad_norm(grads, kind)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {n: g * scale for n, g in grads.items()}


def decays(name: str) -> bool:
    """Weight decay skips biases and normalization parameters."""
    return not (name.endswith("bias") or "norm" in name)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls({n: torch.zeros_like(p) for n, p in params.items()},
                   {n: torch.zeros_like(p) for n, p in params.items()})


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState, t: int,
               cfg: TrainConfig, lr: float | None = None) -> AdamState:
    """In-place AdamW update at step ``t`` (1-based) with decoupled weight decay."""
    if t < 1:
        raise RangeError("AdamW step index starts at 1")
    lr = lr_at(t, cfg) if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {tuple(g.shape)} vs parameter {tuple(p.shape)}")
        m = state.m[name].mul_(b1).add_(g, alpha=1 - b1)
        v = state.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        if cfg.weight_decay and decays(name):
            p.mul_(1 - lr * cfg.weight_decay)
        p.sub_(lr * m_hat / (v_hat.sqrt() + cfg.eps))
    state.step = t
    return state


# -- batches ----------------------------------------------------------------


@dataclass
class Batch:
    top: torch.Tensor
    wrist: torch.Tensor
    joints: torch.Tensor
    lang: torch.Tensor
    target: torch.Tensor


def make_batch(episodes: list[Episode], index: list[tuple[int, int]], pcfg: PolicyConfig,
               tcfg: TrainConfig) -> Batch:
    tops, wrists, joints, targets, langs = [], [], [], [], []
    for e, f in index:
        ep = episodes[e]
        tops.append(ep.top[f])
        wrists.append(ep.wrist[f])
        joints.append(preprocess_joints(ep.states[f]))
        targets.append(preprocess_joints(chunk_targets(ep, f, pcfg.n_chunk, tcfg.control_rate, tcfg.fps)))
        langs.append(tokenize(ep.task, pcfg))
    return Batch(
        top=torch.from_numpy(frames_to_unit(np.stack(tops))),
        wrist=torch.from_numpy(frames_to_unit(np.stack(wrists))),
        joints=torch.from_numpy(np.stack(joints)),
        lang=torch.from_numpy(np.stack(langs)),
        target=torch.from_numpy(np.stack(targets)),
    )


def split_episodes(episodes: list[Episode], val_fraction: float) -> tuple[list[Episode], list[Episode]]:
    """Last ``val_fraction`` of episodes by index (at least one) form the validation split."""
    if not episodes:
        raise InputError("dataset is empty")
    n_val = max(1, int(round(len(episodes) * val_fraction)))
    if n_val >= len(episodes):
        raise InputError(f"{len(episodes)} episodes leave nothing to train on after the validation split")
    return episodes[:-n_val], episodes[-n_val:]


def frame_index(episodes: list[Episode], stride: int = 1) -> list[tuple[int, int]]:
    return [(e, f) for e, ep in enumerate(episodes) for f in range(0, len(ep), stride)]


def batch_loss(policy: VLAPolicy, b: Batch, drop_mask: torch.Tensor | None = None) -> torch.Tensor:
    pred = policy(b.top, b.wrist, b.joints, b.lang, drop_mask)
    return action_loss(pred, b.target).mean()


@torch.no_grad()
def evaluate(policy: VLAPolicy, episodes: list[Episode], tcfg: TrainConfig = TrainConfig(),
             stride: int = 1, batch_size: int = 64) -> float:
    """Mean chunk loss over every ``stride``-th frame of the split; parameters untouched."""
    idx = frame_index(episodes, stride)
    if not idx:
        raise InputError("evaluation split is empty")
    total = 0.0
    for i in range(0, len(idx), batch_size):
        b = make_batch(episodes, idx[i : i + batch_size], policy.cfg, tcfg)
        pred = policy(b.top, b.wrist, b.joints, b.lang)
        total += float(action_loss(pred, b.target).sum())
    return total / len(idx)


# -- loop -----------------------------------------------------------------------


@dataclass
class TrainResult:
    best: ckio.Checkpoint
    final: ckio.Checkpoint
    best_step: int
    best_val: float
    train_loss: list[float]
    val_history: list[tuple[int, float]]
    lr: list[float]


def build_policy(pcfg: PolicyConfig, tcfg: TrainConfig) -> VLAPolicy:
    policy = VLAPolicy(pcfg)
    if tcfg.quantize_base:
        quantize_policy(policy)
    return policy


def _drop_masks(policy: VLAPolicy, n: int, rng: np.random.Generator) -> torch.Tensor | None:
    cfg = policy.cfg
    n_vis = cfg.n_tokens("top") + cfg.n_tokens("wrist")
    # drawn per sample in order, so masks do not depend on how samples are grouped
    draws = rng.random((n, n_vis))
    if cfg.p_drop <= 0:
        return None
    return torch.from_numpy(draws < cfg.p_drop)


def _snapshot(policy: VLAPolicy, tcfg: TrainConfig, adam: AdamState, step: int, train_loss: list[float],
              val_history: list[tuple[int, float]]) -> ckio.Checkpoint:
    extra: dict[str, object] = {
        "meta.train_config": ckio.dict_to_text(tcfg.to_dict()),
        "meta.step": np.array([step], dtype=np.int64),
        "history.train_loss": np.array(train_loss, dtype=np.float64),
        "history.val_step": np.array([s for s, _ in val_history], dtype=np.int64),
        "history.val_loss": np.array([v for _, v in val_history], dtype=np.float64),
    }
    for n in adam.m:
        extra[f"optim.m.{n}"] = adam.m[n].numpy().copy()
        extra[f"optim.v.{n}"] = adam.v[n].numpy().copy()
    return ckio.checkpoint_from_policy(policy, extra)


def train_loop(episodes: list[Episode], pcfg: PolicyConfig, tcfg: TrainConfig, out_dir=None,
               policy: VLAPolicy | None = None, progress: bool = False) -> TrainResult:
    if not episodes:
        raise InputError("dataset is empty")
    train_eps, val_eps = split_episodes(episodes, tcfg.val_fraction)
    torch.manual_seed(tcfg.seed)
    pcfg = PolicyConfig(**{**pcfg.to_dict(), "freeze_vision": tcfg.freeze_vision})
    policy = policy or build_policy(pcfg, tcfg)
    params = trainable_parameters(policy)
    set_trainable(policy, params)
    adam = AdamState.zeros_like({n: p.detach() for n, p in params.items()})
    rng = np.random.default_rng(tcfg.seed)
    index = frame_index(train_eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_loss: list[float] = []
    lrs: list[float] = []
    val_history: list[tuple[int, float]] = []
    best_val, best_step, best = math.inf, 0, None
    B, G = tcfg.batch_size, tcfg.accum_steps

    for step in range(1, tcfg.total_steps + 1):
        picks = rng.integers(len(index), size=B * G)
        masks = _drop_masks(policy, B * G, rng)
        grads = {n: torch.zeros_like(p) for n, p in params.items()}
        step_loss = 0.0
        for g in range(G):
            sel = slice(g * B, (g + 1) * B)
            b = make_batch(train_eps, [index[i] for i in picks[sel]], pcfg, tcfg)
            loss = batch_loss(policy, b, None if masks is None else masks[sel])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            mb_grads = torch.autograd.grad(loss, list(params.values()))
            for (n, _), gr in zip(params.items(), mb_grads):
                grads[n] += gr / G
            step_loss += float(loss.detach()) / G
        grads = clip_gradients(grads, tcfg.clip_threshold, tcfg.clip_norm)
        lr = lr_at(step, tcfg)
        adamw_step({n: p.data for n, p in params.items()}, grads, adam, step, tcfg, lr)
        train_loss.append(step_loss)
        lrs.append(lr)

        if step % tcfg.checkpoint_interval == 0 or step == tcfg.total_steps:
            val = evaluate(policy, val_eps, tcfg, stride=tcfg.val_stride)
            val_history.append((step, val))
            snap = _snapshot(policy, tcfg, adam, step, train_loss, val_history)
            if out is not None:
                ckio.save(out / f"step_{step:06d}", snap)
            if val < best_val:
                best_val, best_step, best = val, step, snap
            if progress:
                log.info("step %d train %.5f val %.5f lr %.3g", step, step_loss, val, lr)

    final = _snapshot(policy, tcfg, adam, tcfg.total_steps, train_loss, val_history)
    if out is not None:
        ckio.save(out / "best", best)
        write_loss_csv(out / "loss.csv", train_loss, val_history, lrs)
    return TrainResult(best=best, final=final, best_step=best_step, best_val=best_val,
                       train_loss=train_loss, val_history=val_history, lr=lrs)


def write_loss_csv(path, train_loss: list[float], val_history: list[tuple[int, float]], lrs: list[float]) -> None:
    val = dict(val_history)
    rows = ["step,train_loss,val_loss,lr"]
    for i, (tl, lr) in enumerate(zip(train_loss, lrs), 1):
        v = f"{val[i]:.6g}" if i in val else ""
        rows.append(f"{i},{tl:.6g},{v},{lr:.6g}")
    Path(path).write_text("\n".join(rows) + "\n")
