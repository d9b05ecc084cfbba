"""Versioned binary container of named float64 arrays plus a config block.

Layout (little-endian)::

    magic "SGCKPT" | u16 version
    u32 config_len | config as UTF-8 JSON (sorted keys)
    u32 array_count
    per array: u16 name_len | name UTF-8 | u8 ndim | ndim x u32 dims | f64 data
    u32 crc32 of everything above
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from collections import OrderedDict

import numpy as np

from ..errors import ChecksumError, FormatError, VersionError

MAGIC = b"SGCKPT"
VERSION = 1


def dumps(arrays, config: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack("<" + "I" * arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 14:
        raise FormatError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is incompatible with this build (expects {VERSION})")
    (clen,) = struct.unpack_from("<I", body, off)
    off += 4
    config = json.loads(body[off : off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from("<" + "I" * ndim, body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, "<f8", size, off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return arrays, config


def save(path: str, arrays, config: dict) -> None:
    with open(path, "wb") as f:
        f.write(dumps(arrays, config))


def load(path: str):
    with open(path, "rb") as f:
        return loads(f.read())
