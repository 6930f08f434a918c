"""Desk-scale vision-language-action policy with LoRA-adapted attention and a chunked action head.

Token order is ``[top patches, wrist patches, language tokens, joint-state token]``;
the hidden state of the final (joint-state) token feeds the action head,
which emits ``n_chunk`` normalized actions squashed into range (tanh for
the five joints, logistic for the gripper).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from . import quant
from .core import ACTION_LOW, DEFAULT_LIMITS, JointLimits, ShapeError, normalize_batch
from .lora import LoraLinear

PAD_ID = 0


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    top_shape: tuple[int, int] = (64, 64)
    wrist_shape: tuple[int, int] = (32, 32)
    patch: int = 8
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 256
    n_lang: int = 8
    n_chunk: int = 50
    lora_rank: int = 8
    lora_alpha: float = 16.0
    p_drop: float = 0.0
    freeze_vision: bool = True
    head_hidden: int = 256
    ffn_mult: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_chunk < 1:
            raise ValueError("n_chunk must be >= 1")
        if not 0 <= self.p_drop < 1:
            raise ValueError("p_drop must lie in [0, 1)")
        for h, w in (self.top_shape, self.wrist_shape):
            if h % self.patch or w % self.patch:
                raise ValueError(f"image {h}x{w} not divisible into {self.patch}px patches")

    def n_tokens(self, view: str) -> int:
        h, w = self.top_shape if view == "top" else self.wrist_shape
        return (h // self.patch) * (w // self.patch)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in ("top_shape", "wrist_shape"):
                v = parse_shape(v)
            elif f.type in ("int",):
                v = int(v)
            elif f.type in ("float",):
                v = float(v)
            elif f.type in ("bool",):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            kw[f.name] = v
        return cls(**kw)


def parse_shape(v) -> tuple[int, int]:
    """``(h, w)`` from a pair or from text such as ``"64 64"`` or ``"64x64"``."""
    if isinstance(v, str):
        v = v.replace("x", " ").replace(",", " ").split()
    h, w = (int(x) for x in v)
    return h, w


@dataclass
class Observation:
    top: np.ndarray | None  # (H, W, 3) floats in [0, 1]
    wrist: np.ndarray | None
    joints: np.ndarray  # 6 physical joint values
    task: str
    degraded: bool = False


def tokenize(text: str, cfg: PolicyConfig) -> np.ndarray:
    """Whitespace tokens hashed (CRC-32) into ids 1..vocab_size-1, padded with PAD_ID."""
    ids = [zlib.crc32(tok.encode("utf-8")) % (cfg.vocab_size - 1) + 1 for tok in text.split()]
    ids = ids[: cfg.n_lang]
    return np.array(ids + [PAD_ID] * (cfg.n_lang - len(ids)), dtype=np.int64)


def _sinusoid_grid(gh: int, gw: int, d: int) -> np.ndarray:
    q = d // 4
    freqs = math.pi / (2.0 * np.arange(1, q + 1))
    rows, cols = np.meshgrid(np.arange(gh) + 0.5, np.arange(gw) + 0.5, indexing="ij")
    rows, cols = rows.reshape(-1, 1) / gh * 8, cols.reshape(-1, 1) / gw * 8
    pe = np.concatenate(
        [np.sin(rows * freqs), np.cos(rows * freqs), np.sin(cols * freqs), np.cos(cols * freqs)], axis=1
    )
    out = np.zeros((gh * gw, d))
    out[:, : pe.shape[1]] = pe
    return out


def patchify(img: torch.Tensor, p: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C), patches in row-major order."""
    b, h, w, c = img.shape
    x = img.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class ViewEncoder(nn.Module):
    def __init__(self, cfg: PolicyConfig, view: str, seed: int):
        super().__init__()
        self.view = view
        self.shape = cfg.top_shape if view == "top" else cfg.wrist_shape
        self.patch = cfg.patch
        patch_dim = cfg.patch * cfg.patch * 3
        self.proj = LoraLinear(patch_dim, cfg.d_model, cfg.lora_rank, cfg.lora_alpha, seed=seed)
        gh, gw = self.shape[0] // cfg.patch, self.shape[1] // cfg.patch
        rng = np.random.default_rng(seed + 1)
        pos = _sinusoid_grid(gh, gw, cfg.d_model) + rng.normal(0.0, 0.5, size=cfg.d_model)
        self.pos = nn.Parameter(torch.from_numpy(pos))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if tuple(img.shape[1:3]) != tuple(self.shape):
            raise ShapeError(f"{self.view} image {tuple(img.shape[1:3])} != configured {self.shape}")
        return self.proj(patchify(img, self.patch)) + self.pos


class Block(nn.Module):
    def __init__(self, cfg: PolicyConfig, seed: int):
        super().__init__()
        d, r, a = cfg.d_model, cfg.lora_rank, cfg.lora_alpha
        self.n_heads = cfg.n_heads
        self.norm1 = nn.LayerNorm(d, dtype=torch.float64)
        self.norm2 = nn.LayerNorm(d, dtype=torch.float64)
        self.q = LoraLinear(d, d, r, a, seed=seed + 1)
        self.k = LoraLinear(d, d, r, a, seed=seed + 2)
        self.v = LoraLinear(d, d, r, a, seed=seed + 3)
        self.o = LoraLinear(d, d, r, a, seed=seed + 4)
        self.ff1 = LoraLinear(d, cfg.ffn_mult * d, 0, seed=seed + 5)
        self.ff2 = LoraLinear(cfg.ffn_mult * d, d, 0, seed=seed + 6)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.n_heads
        dh = d // h

        def split(t):
            return t.reshape(b, n, h, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.ff2(torch.nn.functional.gelu(self.ff1(self.norm2(x))))


class VLAPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig = PolicyConfig(), limits: JointLimits = DEFAULT_LIMITS):
        super().__init__()
        self.cfg = cfg
        self.limits = limits
        s = cfg.seed * 1000
        d = cfg.d_model
        self.vision = nn.ModuleDict({"top": ViewEncoder(cfg, "top", s + 10), "wrist": ViewEncoder(cfg, "wrist", s + 20)})
        rng = np.random.default_rng(s + 30)
        self.lang_embed = nn.Parameter(torch.from_numpy(rng.normal(0.0, 1.0, size=(cfg.vocab_size, d))))
        self.lang_pos = nn.Parameter(torch.from_numpy(0.5 * rng.normal(0.0, 1.0, size=(cfg.n_lang, d))))
        self.state_proj = LoraLinear(6, d, 0, seed=s + 40, init_std=1.0)
        self.blocks = nn.ModuleList([Block(cfg, s + 100 * (i + 1)) for i in range(cfg.n_layers)])
        self.norm_f = nn.LayerNorm(d, dtype=torch.float64)
        self.head1 = LoraLinear(d, cfg.head_hidden, 0, seed=s + 50)
        self.head2 = LoraLinear(cfg.head_hidden, cfg.n_chunk * 6, 0, seed=s + 51, init_std=0.01)

    # -- inputs ------------------------------------------------------------

    def encode_views(self, top: torch.Tensor | None, wrist: torch.Tensor | None,
                     drop_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Visual tokens of the available views; ``drop_mask`` (B, n_tokens) zeroes tokens where True."""
        parts = []
        if top is not None:
            parts.append(self.vision["top"](top))
        if wrist is not None:
            parts.append(self.vision["wrist"](wrist))
        if not parts:
            raise InputError("both camera views are missing")
        tokens = torch.cat(parts, dim=1)
        if drop_mask is not None:
            tokens = tokens.masked_fill(drop_mask[..., None], 0.0)
        return tokens

    def encode_task(self, ids: torch.Tensor) -> torch.Tensor:
        return self.lang_embed[ids] + self.lang_pos

    def forward(self, top, wrist, joints_norm: torch.Tensor, lang_ids: torch.Tensor,
                drop_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Batched forward; returns (B, n_chunk, 6) normalized actions."""
        vis = self.encode_views(top, wrist, drop_mask)
        lang = self.encode_task(lang_ids)
        state = self.state_proj(joints_norm)[:, None, :]
        x = torch.cat([vis, lang, state], dim=1)
        for blk in self.blocks:
            x = blk(x)
        h_last = self.norm_f(x[:, -1])
        raw = self.head2(torch.nn.functional.gelu(self.head1(h_last)))
        raw = raw.reshape(-1, self.cfg.n_chunk, 6)
        return squash(raw)

    # -- parameter groups --------------------------------------------------

    def vision_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("vision.")]

    def quantizable_layers(self) -> dict[str, LoraLinear]:
        """Frozen base linear layers that may be stored as NF4."""
        return {n: m for n, m in self.named_modules()
                if isinstance(m, LoraLinear) and not n.startswith("head")}


def squash(raw: torch.Tensor) -> torch.Tensor:
    return torch.cat([torch.tanh(raw[..., :5]), torch.sigmoid(raw[..., 5:])], dim=-1)


def trainable_parameters(policy: VLAPolicy, freeze_vision: bool | None = None) -> dict[str, nn.Parameter]:
    """Named trainable set: trunk attention LoRA pairs and the action head, plus the
    vision group (patch-projection LoRA pair, projection bias, position embeddings)
    when vision is unfrozen."""
    frozen = policy.cfg.freeze_vision if freeze_vision is None else freeze_vision
    out = {}
    for name, p in policy.named_parameters():
        if name.startswith("blocks.") and ".lora_" in name:
            out[name] = p
        elif name.startswith("head"):
            out[name] = p
        elif not frozen and name.startswith("vision.") and (".lora_" in name or name.endswith(".pos")
                                                          or name.endswith("proj.bias")):
            out[name] = p
    return out


def count_parameters(params: dict[str, torch.Tensor]) -> int:
    return int(sum(p.numel() for p in params.values()))


def set_trainable(policy: VLAPolicy, names) -> None:
    names = set(names)
    for n, p in policy.named_parameters():
        p.requires_grad_(n in names)


def quantize_policy(policy: VLAPolicy, block_size: int = quant.DEFAULT_BLOCK_SIZE, double_quant: bool = True,
                    group_size: int = quant.DEFAULT_GROUP_SIZE) -> dict[str, quant.QuantizedTensor]:
    """Replace every frozen base weight with its NF4 reconstruction, in place."""
    out = {}
    for name, layer in policy.quantizable_layers().items():
        out[f"{name}.weight"] = layer.quantize_base(block_size, double_quant, group_size)
    return out


# -- single-observation helpers -------------------------------------------------


def preprocess_joints(joints, limits: JointLimits = DEFAULT_LIMITS) -> np.ndarray:
    return normalize_batch(np.clip(np.asarray(joints, dtype=np.float64), limits.lo, limits.hi), limits)


def to_tensor(img: np.ndarray | None) -> torch.Tensor | None:
    if img is None:
        return None
    return torch.as_tensor(np.asarray(img, dtype=np.float64))[None]


@torch.no_grad()
def predict_chunk(policy: VLAPolicy, obs: Observation) -> np.ndarray:
    """(n_chunk, 6) normalized actions for one observation."""
    if obs.top is None and obs.wrist is None:
        raise InputError("both camera views are missing")
    ids = torch.from_numpy(tokenize(obs.task, policy.cfg))[None]
    j = torch.from_numpy(preprocess_joints(obs.joints, policy.limits))[None]
    out = policy(to_tensor(obs.top), to_tensor(obs.wrist), j, ids)
    chunk = out[0].numpy()
    # guard the closed interval against round-off at saturation
    return np.clip(chunk, ACTION_LOW, 1.0)
