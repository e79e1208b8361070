"""``DLVC`` checkpoint files: a named table of float32 parameter arrays.

Layout (little endian)::

    b"DLVC" | u32 version | u32 count
    repeated count times:
        u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f32 payload
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .errors import BadMagicError, FormatError, VersionError

MAGIC = b"DLVC"
VERSION = 1


def dumps(params: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(raw: bytes, source="<bytes>") -> dict:
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise VersionError(f"{source}: unsupported checkpoint version {version}")
        off, out = 12, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(raw):
                raise FormatError(f"{source}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"{source}: truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{source}: {len(raw) - off} trailing bytes")
    return out


def save(path, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read(), source=str(path))
