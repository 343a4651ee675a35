"""Adapter-only binary checkpoints.

Layout (all integers little-endian)::

    b"PETL"  u32 version=1  u32 count
    count x { u16 name_len, name (utf-8), u8 dtype (0=f32, 1=f64), u8 rank,
              rank x u64 dim, payload (row-major) }
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptionError, FormatError, IncompatibleCheckpoint

MAGIC = b"PETL"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(getattr(arr, "data", arr))
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not a PETL checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint CRC mismatch; file is corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", body, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dt = _DTYPES[code]
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype=dt, count=n, offset=off).reshape(dims)
            off += n * dt.itemsize
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            out[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint record: {exc}") from None
    if off != len(body):
        raise FormatError("trailing bytes after the last tensor record")
    return out


def save_adapter(state: Mapping[str, np.ndarray], path: str | Path) -> Path:
    from .former import atomic_write

    path = Path(path)
    atomic_write(path, encode(state))
    return path


def load_adapter(path: str | Path, expected: Mapping[str, tuple] | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; with ``expected`` (name -> shape) also check compatibility."""
    state = decode(Path(path).read_bytes())
    if expected is not None:
        for name, shape in expected.items():
            if name not in state:
                raise IncompatibleCheckpoint(f"checkpoint has no tensor {name!r}")
            if tuple(state[name].shape) != tuple(shape):
                raise IncompatibleCheckpoint(
                    f"tensor {name!r} has shape {tuple(state[name].shape)}, config expects {tuple(shape)}"
                )
        extra = sorted(set(state) - set(expected))
        if extra:
            raise IncompatibleCheckpoint(f"checkpoint carries tensors the config does not: {extra}")
    return state
