"""``TADW`` parameter checkpoint files.

Layout (little-endian): magic ``TADW``, u16 version, u32 tensor count, then
per tensor a u16 name length, UTF-8 name, u8 rank, u32 extents and raw f32
values.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FileFormatError

MAGIC = b"TADW"
VERSION = 1


def save_checkpoint(path, tensors: dict):
    """Write ``{name: array-like}`` in insertion order."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Read a checkpoint into ``{name: float32 ndarray}``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FileFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        off = 10
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise FileFormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except struct.error as exc:
        raise FileFormatError(f"{path}: truncated header ({exc})") from None
    return out
