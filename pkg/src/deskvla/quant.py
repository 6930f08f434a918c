"""Blockwise 4-bit NormalFloat (NF4) quantization with optional double quantization.

Weights are flattened row-major and cut into blocks of ``block_size``. Each
block is scaled by its absmax and every scaled weight is replaced by the index
of the nearest NF4 level. With double quantization the per-block scales are
themselves stored as 8-bit codes, one float32 step per group of scales.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .core import NumericError, RangeError

# Mirrors the offset used by the reference NF4 construction: the outermost
# quantile sits halfway between the 1/(2*15) and 1/(2*16) tail masses.
NF4_OFFSET = 0.5 * ((1 - 1 / (2 * 15)) + (1 - 1 / (2 * 16)))

DEFAULT_BLOCK_SIZE = 64
DEFAULT_GROUP_SIZE = 256

FLAG_DOUBLE_QUANT = 1


class FormatError(ValueError):
    pass


def build_nf4_levels() -> np.ndarray:
    """16 levels: 8 negative, an exact zero, 7 positive, extremes at -1 and +1.

    Each sign side uses equally spaced probability masses of N(0, 1) and is
    rescaled separately so its outermost quantile lands on the unit endpoint.
    """
    nd = NormalDist()
    neg_p = np.linspace(1 - NF4_OFFSET, 0.5, 9)[:-1]
    pos_p = np.linspace(0.5, NF4_OFFSET, 8)[1:]
    neg = np.array([nd.inv_cdf(p) for p in neg_p])
    pos = np.array([nd.inv_cdf(p) for p in pos_p])
    neg = neg / -neg[0]
    pos = pos / pos[-1]
    levels = np.concatenate([neg, [0.0], pos])
    levels[0], levels[-1] = -1.0, 1.0
    return levels


NF4_LEVELS = build_nf4_levels()


def uniform4_levels() -> np.ndarray:
    """16 evenly spaced levels on [-1, 1]; baseline for comparing NF4."""
    return np.linspace(-1.0, 1.0, 16)


@dataclass
class DoubleQuantMeta:
    codes: np.ndarray  # uint8, one per block scale
    group_size: int
    group_steps: np.ndarray  # float32, one per group
    offset: float  # float32 value shared by the whole tensor

    def reconstruct(self) -> np.ndarray:
        steps = np.repeat(self.group_steps.astype(np.float64), self.group_size)[: self.codes.size]
        return np.float64(self.offset) + self.codes.astype(np.float64) * steps


@dataclass
class QuantizedTensor:
    shape: tuple[int, int]
    block_size: int
    codes: np.ndarray  # uint8 in [0, 15], one per weight, row-major
    scales: np.ndarray | None  # float32 absmax per block, when not double quantized
    dq: DoubleQuantMeta | None = None

    @property
    def double_quantized(self) -> bool:
        return self.dq is not None

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.codes.size / self.block_size)

    def block_scales(self) -> np.ndarray:
        if self.dq is not None:
            return self.dq.reconstruct()
        return self.scales.astype(np.float64)

    def to_bytes(self) -> bytes:
        return serialize(self)


def nearest_level(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest level; exact midpoints resolve to the lower index."""
    mids = 0.5 * (levels[1:] + levels[:-1])
    return np.searchsorted(mids, x, side="left").astype(np.uint8)


def _double_quantize(scales: np.ndarray, group_size: int) -> DoubleQuantMeta:
    offset = np.float32(scales.min()) if scales.size else np.float32(0.0)
    centered = scales.astype(np.float64) - np.float64(offset)
    n_groups = math.ceil(scales.size / group_size)
    padded = np.zeros(n_groups * group_size)
    padded[: scales.size] = centered
    gmax = padded.reshape(n_groups, group_size).max(axis=1)
    steps = (gmax / 255.0).astype(np.float32)
    step_per_scale = np.repeat(steps.astype(np.float64), group_size)[: scales.size]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(step_per_scale > 0, np.rint(centered / step_per_scale), 0.0)
    codes = np.clip(q, 0, 255).astype(np.uint8)
    return DoubleQuantMeta(codes=codes, group_size=group_size, group_steps=steps, offset=float(offset))


def quantize(
    w: np.ndarray,
    block_size: int = DEFAULT_BLOCK_SIZE,
    levels: np.ndarray = NF4_LEVELS,
    double_quant: bool = False,
    group_size: int = DEFAULT_GROUP_SIZE,
) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    if w.ndim != 2:
        raise ValueError("quantize expects a matrix")
    if block_size < 1:
        raise RangeError("block_size must be >= 1")
    if group_size < 1:
        raise RangeError("group_size must be >= 1")
    if not np.all(np.isfinite(w)):
        raise NumericError("cannot quantize non-finite weights")
    flat = w.reshape(-1)
    n = flat.size
    n_blocks = math.ceil(n / block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    # scales are stored as float32; codes are assigned against the stored value
    scales = np.abs(blocks).max(axis=1).astype(np.float32)
    s64 = scales.astype(np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(s64 > 0, blocks / s64, 0.0)
    codes = nearest_level(scaled, levels).reshape(-1)[:n]
    qt = QuantizedTensor(shape=(w.shape[0], w.shape[1]), block_size=block_size, codes=codes, scales=scales)
    if double_quant:
        qt.dq = _double_quantize(scales, group_size)
        qt.scales = None
    return qt


def dequantize(q: QuantizedTensor, levels: np.ndarray = NF4_LEVELS) -> np.ndarray:
    """w~ = level[code] * scale + zero_point, with the zero point fixed at 0."""
    if q.codes.size and int(q.codes.max()) > 15:
        raise FormatError(f"corrupt 4-bit code {int(q.codes.max())}")
    if q.codes.size != q.shape[0] * q.shape[1]:
        raise FormatError("code count does not match shape")
    zero_point = 0.0
    per_weight = np.repeat(q.block_scales(), q.block_size)[: q.codes.size]
    return (levels[q.codes] * per_weight + zero_point).reshape(q.shape)


def max_level_gap(levels: np.ndarray = NF4_LEVELS) -> float:
    return float(np.max(np.diff(levels)))


@dataclass(frozen=True)
class FootprintReport:
    payload_bits: float
    scale_bits: float
    total_bits: float
    reduction_vs_fp32: float
    payload_reduction_vs_fp32: float
    scale_bits_without_dq: float
    scale_storage_saving: float  # fraction of scale storage removed by double quantization
    total_saving_from_dq: float  # fraction of total storage removed by double quantization


def memory_footprint(
    rows: int,
    cols: int,
    block_size: int = DEFAULT_BLOCK_SIZE,
    group_size: int = DEFAULT_GROUP_SIZE,
    double_quant: bool = False,
) -> FootprintReport:
    """Bits per weight of the storage layout, ignoring the fixed 16-byte header.

    The single float32 offset used by double quantization is amortized over
    the tensor, which makes it vanish for realistic matrix sizes.
    """
    if rows <= 0 or cols <= 0 or block_size <= 0 or group_size <= 0:
        raise RangeError("dimensions, block size and group size must be positive")
    n = rows * cols
    n_blocks = math.ceil(n / block_size)
    payload = 4.0
    plain_scales = 32.0 * n_blocks / n
    if double_quant:
        n_groups = math.ceil(n_blocks / group_size)
        scales = (8.0 * n_blocks + 32.0 * n_groups + 32.0) / n
    else:
        scales = plain_scales
    total = payload + scales
    return FootprintReport(
        payload_bits=payload,
        scale_bits=scales,
        total_bits=total,
        reduction_vs_fp32=32.0 / total,
        payload_reduction_vs_fp32=32.0 / payload,
        scale_bits_without_dq=plain_scales,
        scale_storage_saving=1.0 - scales / plain_scales,
        total_saving_from_dq=1.0 - total / (payload + plain_scales),
    )


# -- binary layout ---------------------------------------------------------
# header: rows u32, cols u32, block_size u32, flags u32 (little-endian)
# codes: ceil(n/2) bytes, first weight in the low nibble
# scales: plain -> n_blocks float32
#         double quantized -> group_size u32, offset f32,
#                             n_groups float32 steps, n_blocks uint8 codes

_HEADER = struct.Struct("<IIII")


def pack_codes(codes: np.ndarray) -> bytes:
    c = codes.astype(np.uint8)
    if c.size % 2:
        c = np.concatenate([c, np.zeros(1, np.uint8)])
    return ((c[1::2] << 4) | c[0::2]).astype(np.uint8).tobytes()


def unpack_codes(buf: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(b.size * 2, dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out[:n]


def serialize(q: QuantizedTensor) -> bytes:
    flags = FLAG_DOUBLE_QUANT if q.double_quantized else 0
    parts = [_HEADER.pack(q.shape[0], q.shape[1], q.block_size, flags), pack_codes(q.codes)]
    if q.dq is None:
        parts.append(q.scales.astype("<f4").tobytes())
    else:
        parts.append(struct.pack("<If", q.dq.group_size, q.dq.offset))
        parts.append(q.dq.group_steps.astype("<f4").tobytes())
        parts.append(q.dq.codes.astype(np.uint8).tobytes())
    return b"".join(parts)


def deserialize(buf: bytes) -> QuantizedTensor:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated quantized tensor header")
    rows, cols, block_size, flags = _HEADER.unpack_from(buf, 0)
    if block_size == 0:
        raise FormatError("block size 0 in header")
    n = rows * cols
    n_blocks = math.ceil(n / block_size)
    pos = _HEADER.size
    code_bytes = (n + 1) // 2
    codes = unpack_codes(buf[pos : pos + code_bytes], n)
    pos += code_bytes
    if codes.size != n:
        raise FormatError("truncated code section")
    if flags & FLAG_DOUBLE_QUANT:
        group_size, offset = struct.unpack_from("<If", buf, pos)
        pos += 8
        n_groups = math.ceil(n_blocks / group_size)
        steps = np.frombuffer(buf, dtype="<f4", count=n_groups, offset=pos).astype(np.float32)
        pos += 4 * n_groups
        sc = np.frombuffer(buf, dtype=np.uint8, count=n_blocks, offset=pos).copy()
        pos += n_blocks
        dq = DoubleQuantMeta(codes=sc, group_size=group_size, group_steps=steps, offset=float(np.float32(offset)))
        qt = QuantizedTensor((rows, cols), block_size, codes, None, dq)
    else:
        scales = np.frombuffer(buf, dtype="<f4", count=n_blocks, offset=pos).astype(np.float32)
        pos += 4 * n_blocks
        qt = QuantizedTensor((rows, cols), block_size, codes, scales)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after quantized tensor")
    return qt
