"""Binary checkpoint format for model bundles.

Layout (all little-endian):
  magic "GWAI" | format version u32 | JSON blob (u32 length + UTF-8, holds
  the architecture and the training metadata) | tensor count u32 | per
  tensor: name (u32 length + UTF-8), dtype code u8 (0=f32, 1=f64), rank u8,
  dims u64[rank], raw values | CRC32 u32 of all preceding bytes.

Tensors are written in sorted-name order so save(load(f)) is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .networks import ArchConfig, ModelBundle, parameter_shapes
from .tensor import Tensor, ValidationError

MAGIC = b"GWAI"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(bundle: ModelBundle, path) -> None:
    blob = _canonical_json({"arch": bundle.arch.to_json_dict(), "meta": bundle.meta})
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(bundle.params))]
    for name in sorted(bundle.params):
        t = bundle.params[name]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[t.data.dtype], t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ValidationError("checkpoint truncated")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> ModelBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a GWAI checkpoint")
    body, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ValidationError(f"{path}: CRC mismatch, file corrupt")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    blob = json.loads(r.take(r.u32()).decode("utf-8"))
    arch = ArchConfig.from_json_dict(blob["arch"])
    n = r.u32()
    params: dict[str, Tensor] = {}
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2))
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise ValidationError(f"{path}: unknown dtype code {code}")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        if name in params:
            raise ValidationError(f"{path}: duplicate tensor name {name!r}")
        params[name] = Tensor(data.astype(dtype.newbyteorder("=")), requires_grad=True)
    if r.off != len(body):
        raise ValidationError(f"{path}: trailing bytes after tensor table")
    expected = parameter_shapes(arch)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))[:5]
        extra = sorted(set(params) - set(expected))[:5]
        raise ValidationError(
            f"{path}: parameter names do not match architecture "
            f"(missing {missing}, unexpected {extra})")
    for name, (shape, _) in expected.items():
        if params[name].shape != tuple(shape):
            raise ValidationError(
                f"{path}: tensor {name!r} has shape {params[name].shape}, "
                f"architecture expects {tuple(shape)}")
    return ModelBundle(params=params, arch=arch, meta=blob["meta"])
