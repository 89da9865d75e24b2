"""Binary checkpoint format shared by the denoiser and the user encoder.

Layout (little endian)::

    b"PPDCKPT1"  u32 version  u32 n_params
    repeated n_params times:
        u32 name_len  name (utf-8)  u32 rank  u32 dims[rank]  f64 data[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore

MAGIC = b"PPDCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> ParamStore:
    reader = _Reader(blob)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = ParamStore()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64)
        params.add(name, data.reshape(dims))
    if reader.pos != len(blob):
        raise CheckpointError(f"trailing bytes at offset {reader.pos}")
    return params


def save(params: ParamStore, path: str | Path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path: str | Path) -> ParamStore:
    return loads(Path(path).read_bytes())


class _Reader:
    def __init__(self, blob: bytes, error=CheckpointError):
        self.blob = blob
        self.pos = 0
        self.error = error

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise self.error(
                f"truncated file: need {n} bytes at offset {self.pos}, "
                f"have {len(self.blob) - self.pos}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
