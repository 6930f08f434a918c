"""Binary checkpoint format.

Little-endian throughout::

    b"VLAC"  u32 version (=1)  u32 entry_count
    entry:   u32 name_len, name (utf-8), u32 dtype code, u32 rank, rank x u32 dims, raw data

Quantized base weights are stored with dtype ``NF4`` as a rank-1 byte blob in
the quantized-tensor layout of :mod:`deskvla.quant`. Configuration echoes are
``TEXT`` entries holding ``key = value`` lines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import quant
from .policy import PolicyConfig, VLAPolicy

MAGIC = b"VLAC"
VERSION = 1

F64, F32, I64, U8, NF4, TEXT = range(6)
_NP = {F64: "<f8", F32: "<f4", I64: "<i8", U8: "u1"}
_CODE = {np.dtype("float64"): F64, np.dtype("float32"): F32, np.dtype("int64"): I64, np.dtype("uint8"): U8}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    entries: dict[str, object] = field(default_factory=dict)

    def tensors(self, prefix: str) -> dict[str, object]:
        return {k[len(prefix):]: v for k, v in self.entries.items() if k.startswith(prefix)}

    def text(self, name: str) -> str:
        v = self.entries.get(name)
        if not isinstance(v, str):
            raise CheckpointError(f"checkpoint has no text entry {name!r}")
        return v


def _encode(name: str, value) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb
    if isinstance(value, quant.QuantizedTensor):
        blob = quant.serialize(value)
        return head + struct.pack("<III", NF4, 1, len(blob)) + blob
    if isinstance(value, str):
        blob = value.encode("utf-8")
        return head + struct.pack("<III", TEXT, 1, len(blob)) + blob
    arr = np.asarray(value)
    if arr.dtype not in _CODE:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    code = _CODE[arr.dtype]
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<II", code, arr.ndim) + dims + np.ascontiguousarray(arr, dtype=_NP[code]).tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.entries))]
    parts += [_encode(k, v) for k, v in ckpt.entries.items()]
    return b"".join(parts)


def from_bytes(buf: bytes, where: str = "<bytes>") -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{where}: bad magic {buf[:4]!r}")
    try:
        version, n = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{where}: unsupported version {version}")
        pos = 12
        out = Checkpoint()
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + ln].decode("utf-8")
            pos += ln
            code, rank = struct.unpack_from("<II", buf, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            if code == NF4:
                out.entries[name] = quant.deserialize(buf[pos : pos + dims[0]])
                pos += dims[0]
            elif code == TEXT:
                out.entries[name] = buf[pos : pos + dims[0]].decode("utf-8")
                pos += dims[0]
            elif code in _NP:
                dt = np.dtype(_NP[code])
                count = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
                out.entries[name] = arr
                pos += count * dt.itemsize
            else:
                raise CheckpointError(f"{where}: entry {name!r} has unknown dtype code {code}")
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{where}: truncated or corrupt checkpoint ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{where}: {len(buf) - pos} trailing bytes")
    return out


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint file")
    return from_bytes(path.read_bytes(), str(path))


def dict_to_text(d: dict) -> str:
    lines = []
    for k, v in d.items():
        if isinstance(v, (tuple, list)):
            v = " ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def text_to_dict(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        parts = v.split()
        out[k] = parts if len(parts) > 1 else v
    return out


def policy_entries(policy: VLAPolicy, prefix: str = "param.") -> dict[str, object]:
    """Named parameter tensors; layers holding an NF4 base contribute the quantized blob."""
    quantized = {f"{n}.weight": m.quantized for n, m in policy.quantizable_layers().items()
                 if m.quantized is not None}
    out: dict[str, object] = {}
    for name, p in policy.named_parameters():
        out[prefix + name] = quantized.get(name, p.detach().numpy().copy())
    return out


def checkpoint_from_policy(policy: VLAPolicy, extra: dict[str, object] | None = None) -> Checkpoint:
    ck = Checkpoint()
    ck.entries["meta.policy_config"] = dict_to_text(policy.cfg.to_dict())
    ck.entries.update(policy_entries(policy))
    if extra:
        ck.entries.update(extra)
    return ck


def load_policy_params(policy: VLAPolicy, ck: Checkpoint, prefix: str = "param.") -> None:
    layers = {f"{n}.weight": m for n, m in policy.quantizable_layers().items()}
    params = dict(policy.named_parameters())
    stored = ck.tensors(prefix)
    missing = set(params) - set(stored)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, value in stored.items():
            if name not in params:
                raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
            if isinstance(value, quant.QuantizedTensor):
                if name not in layers:
                    raise CheckpointError(f"{name!r} cannot hold a quantized tensor")
                layers[name].load_quantized(value)
                continue
            if tuple(value.shape) != tuple(params[name].shape):
                raise CheckpointError(f"{name}: shape {value.shape} != {tuple(params[name].shape)}")
            params[name].copy_(torch.from_numpy(np.array(value, dtype=np.float64)))


def policy_from_checkpoint(ck: Checkpoint) -> VLAPolicy:
    cfg = PolicyConfig.from_dict(text_to_dict(ck.text("meta.policy_config")))
    policy = VLAPolicy(cfg)
    load_policy_params(policy, ck)
    return policy
