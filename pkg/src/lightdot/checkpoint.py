"""Versioned binary checkpoints for encoder (and scorer) parameters.

Layout, little-endian::

    b"LDOT" | u32 version | u32 L, d, A, V, C, d_v, N_max, T_max
    | u64 step | f64 val_ar | u32 len + config-hash bytes
    | u32 tensor count
    | per tensor: u32 name len, name (utf-8), u32 ndim, u32 shape[ndim], f64 data
    | u32 CRC-32 of everything before it
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoders import ModelConfig

MAGIC = b"LDOT"
VERSION = 1
_CONFIG = struct.Struct("<4sI8I")
_META = struct.Struct("<Qd")


class CheckpointError(Exception):
    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class CheckpointMeta:
    step: int
    config_hash: str
    val_ar: float = math.nan


def save_checkpoint(params: Mapping[str, np.ndarray], config: ModelConfig, meta: CheckpointMeta, path) -> None:
    if meta.config_hash != config.hash():
        raise ValueError(f"meta hash {meta.config_hash} does not match config hash {config.hash()}")
    parts = [_CONFIG.pack(MAGIC, VERSION, *config.as_tuple()), _META.pack(meta.step, meta.val_ar)]
    h = meta.config_hash.encode()
    parts += [struct.pack("<I", len(h)), h, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _read(buf: bytes, off: int, fmt: str, path):
    size = struct.calcsize(fmt)
    if off + size > len(buf):
        raise CheckpointError(path, "truncated file")
    return struct.unpack_from(fmt, buf, off), off + size


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[dict[str, np.ndarray], ModelConfig, CheckpointMeta]:
    """Read a checkpoint; with ``expect`` set, any config difference is rejected."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError(path, f"bad magic {buf[:4]!r}")
    if len(buf) < _CONFIG.size + 4:
        raise CheckpointError(path, "truncated file")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    body = buf[:-4]
    fields = _CONFIG.unpack_from(body)
    if fields[1] != VERSION:
        raise CheckpointError(path, f"unsupported version {fields[1]}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(path, "checksum mismatch (corrupt or truncated file)")
    config = ModelConfig(*fields[2:])
    if expect is not None and expect != config:
        raise ConfigMismatchError(path, f"config {config.as_tuple()} (hash {config.hash()}) "
                                        f"!= expected {expect.as_tuple()} (hash {expect.hash()})")
    off = _CONFIG.size
    (step, val_ar), off = _read(body, off, "<Qd", path)
    (hlen,), off = _read(body, off, "<I", path)
    config_hash = body[off:off + hlen].decode()
    off += hlen
    if config_hash != config.hash():
        raise ConfigMismatchError(path, f"embedded hash {config_hash} != config hash {config.hash()}")
    (count,), off = _read(body, off, "<I", path)
    params = {}
    for _ in range(count):
        (nlen,), off = _read(body, off, "<I", path)
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,), off = _read(body, off, "<I", path)
        shape, off = _read(body, off, f"<{ndim}I", path)
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(body):
            raise CheckpointError(path, "truncated file")
        params[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(body):
        raise CheckpointError(path, "trailing bytes after tensors")
    return params, config, CheckpointMeta(int(step), config_hash, float(val_ar))
