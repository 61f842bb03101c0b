"""Flat binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"CFUSECKP"
    version      u32       1
    config_len   u32       byte length of the config block
    config       utf-8     key = value lines (see config.dump_config)
    n_tensors    u32
    n_tensors times:
        name_len u32, name utf-8, rank u32, rank x u64 extents,
        prod(extents) x f64 (little-endian, row-major)

Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import dump_config, parse_config
from .pipeline import ModelParams, init_params

MAGIC = b"CFUSECKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    cfg_bytes = dump_config(params.cfg).encode()
    named = params.named()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(named))]
    for name, t in named.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{t.ndim}Q", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> ModelParams:
    r = _Reader(Path(path).read_bytes())
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = parse_config(r.take(cfg_len).decode()).pipeline
    params = init_params(cfg, 0)
    expected = params.named()
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(shape) != expected[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, expected {expected[name].shape}")
        expected[name].data = data
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return params
