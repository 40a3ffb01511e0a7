"""``TVOL`` volume and ``TMSK`` label files.

Both share a header: 4-byte magic, u16 version, three u32 extents and an f32
voxel spacing, all little-endian. ``TVOL`` payload is f32 intensities,
``TMSK`` payload one u8 region label per voxel.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FileFormatError

VOLUME_MAGIC = b"TVOL"
MASK_MAGIC = b"TMSK"
VERSION = 1
_HEADER = struct.Struct("<4sH3If")


def _write(path, magic, arr, spacing, dtype):
    header = _HEADER.pack(magic, VERSION, *arr.shape, float(spacing))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    except OSError as exc:
        raise FileFormatError(f"cannot write {path}: {exc}") from exc


def _read(path, magic, dtype):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    if len(buf) < _HEADER.size:
        raise FileFormatError(f"{path}: file too short for header")
    got, version, d, h, w, spacing = _HEADER.unpack_from(buf)
    if got != magic:
        raise FileFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    n = d * h * w
    itemsize = np.dtype(dtype).itemsize
    if len(buf) != _HEADER.size + n * itemsize:
        raise FileFormatError(f"{path}: payload size does not match extents {(d, h, w)}")
    arr = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size, count=n).reshape(d, h, w).copy()
    return arr, spacing


def write_volume(path, volume):
    _write(path, VOLUME_MAGIC, volume.data, volume.spacing, "<f4")


def read_volume(path):
    from .phantom import Volume

    arr, spacing = _read(path, VOLUME_MAGIC, "<f4")
    return Volume(arr.astype(np.float32), float(spacing))


def write_mask(path, masks, spacing=1.0):
    _write(path, MASK_MAGIC, masks.labels, spacing, "u1")


def read_mask(path):
    from .phantom import RegionMasks

    arr, _ = _read(path, MASK_MAGIC, "u1")
    return RegionMasks(arr)
