"""Low-rank adapters over frozen (optionally NF4-quantized) base matrices.

``y = W x + (alpha / r) * B (A x)`` with A (r x k) and B (d x r). The numpy
functions are the reference path; :class:`LoraLinear` is the torch layer the
policy is built from and shares the same initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import quant
from .core import RangeError, ShapeError

DEFAULT_RANK = 8
DEFAULT_ALPHA = 16.0


@dataclass
class LoraAdapter:
    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)
    alpha: float
    trainable: bool = True

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class AdaptedLinear:
    base: np.ndarray | quant.QuantizedTensor
    adapter: LoraAdapter

    def __post_init__(self):
        d, k = self.base.shape
        if self.adapter.A.shape[1] != k or self.adapter.B.shape[0] != d:
            raise ShapeError(
                f"adapter A{self.adapter.A.shape} B{self.adapter.B.shape} does not fit base {d}x{k}"
            )

    def base_weight(self) -> np.ndarray:
        if isinstance(self.base, quant.QuantizedTensor):
            return quant.dequantize(self.base)
        return np.asarray(self.base, dtype=np.float64)


def init_A(r: int, k: int, seed: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(k)
    return np.random.default_rng(seed).uniform(-bound, bound, size=(r, k))


def init_adapter(d: int, k: int, r: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, seed: int = 0) -> LoraAdapter:
    if not 1 <= r <= min(d, k):
        raise RangeError(f"rank {r} must be within [1, min({d}, {k})]")
    if alpha <= 0:
        raise RangeError("alpha must be positive")
    return LoraAdapter(A=init_A(r, k, seed), B=np.zeros((d, r)), alpha=float(alpha))


def lora_forward(layer: AdaptedLinear, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = layer.base.shape[1]
    if x.shape[-1] != k:
        raise ShapeError(f"input has {x.shape[-1]} features, layer expects {k}")
    ad = layer.adapter
    W = layer.base_weight()
    # two rank-r products; the d x k update is never formed; rows of a 2-D x are inputs
    return x @ W.T + ad.scaling * ((x @ ad.A.T) @ ad.B.T)


def merge_adapter(layer: AdaptedLinear) -> np.ndarray:
    ad = layer.adapter
    return layer.base_weight() + ad.scaling * (ad.B @ ad.A)


@dataclass(frozen=True)
class ParamCount:
    lora_per_layer: int
    full_per_layer: int
    ratio: float
    lora_total: int
    full_total: int


def count_trainable(d: int, k: int, r: int, n_projections: int = 4, n_layers: int = 1) -> ParamCount:
    if min(d, k, r, n_projections, n_layers) <= 0:
        raise RangeError("all arguments must be positive")
    lora = n_projections * r * (d + k)
    full = n_projections * d * k
    return ParamCount(
        lora_per_layer=lora,
        full_per_layer=full,
        ratio=full / lora,
        lora_total=lora * n_layers,
        full_total=full * n_layers,
    )


class LoraLinear(nn.Module):
    """Linear layer with a frozen base weight and an optional trainable LoRA pair.

    The base may be swapped for a dequantized NF4 copy with :meth:`quantize_base`.
    """

    def __init__(self, d_in: int, d_out: int, rank: int = 0, alpha: float = DEFAULT_ALPHA,
                 bias: bool = True, seed: int = 0, init_std: float | None = None):
        super().__init__()
        rng = np.random.default_rng(seed)
        std = init_std if init_std is not None else 1.0 / np.sqrt(d_in)
        self.weight = nn.Parameter(torch.from_numpy(rng.normal(0.0, std, size=(d_out, d_in))))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=torch.float64)) if bias else None
        self.rank = rank
        self.alpha = float(alpha)
        if rank > 0:
            ad = init_adapter(d_out, d_in, rank, alpha, seed=seed + 7919)
            self.lora_A = nn.Parameter(torch.from_numpy(ad.A))
            self.lora_B = nn.Parameter(torch.from_numpy(ad.B))
        else:
            self.lora_A = None
            self.lora_B = None
        self.quantized: quant.QuantizedTensor | None = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank if self.rank else 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x @ self.weight.T
        if self.lora_A is not None:
            y = y + self.scaling * ((x @ self.lora_A.T) @ self.lora_B.T)
        if self.bias is not None:
            y = y + self.bias
        return y

    def quantize_base(self, block_size: int = quant.DEFAULT_BLOCK_SIZE, double_quant: bool = True,
                      group_size: int = quant.DEFAULT_GROUP_SIZE) -> quant.QuantizedTensor:
        qt = quant.quantize(self.weight.detach().cpu().numpy(), block_size, double_quant=double_quant,
                            group_size=group_size)
        self.load_quantized(qt)
        return qt

    def load_quantized(self, qt: quant.QuantizedTensor) -> None:
        if tuple(qt.shape) != tuple(self.weight.shape):
            raise ShapeError(f"quantized shape {qt.shape} != {tuple(self.weight.shape)}")
        with torch.no_grad():
            self.weight.copy_(torch.from_numpy(quant.dequantize(qt)))
        self.quantized = qt

    def to_adapted(self) -> AdaptedLinear:
        base = self.quantized if self.quantized is not None else self.weight.detach().numpy().copy()
        if self.lora_A is None:
            raise ValueError("layer has no adapter")
        ad = LoraAdapter(self.lora_A.detach().numpy().copy(), self.lora_B.detach().numpy().copy(), self.alpha)
        return AdaptedLinear(base, ad)
