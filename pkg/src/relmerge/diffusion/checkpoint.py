"""Binary checkpoint container.

Layout (little-endian)::

    b"MIPW"  u32 version (=1)  u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim], f32 data
    u32 CRC32 of every preceding byte

The run configuration rides along as the pseudo-tensor ``__config__``: the
UTF-8 bytes of its JSON, one byte per f32 value.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"MIPW"
VERSION = 1
CONFIG_KEY = "__config__"


def _encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: dict, path, config: dict | None = None) -> None:
    """Write ``params`` (stored as f32) and an optional JSON-able ``config``.

    The file is written to a temporary name and renamed into place.
    """
    tensors = dict(params)
    if CONFIG_KEY in tensors:
        raise ValueError(f"{CONFIG_KEY!r} is reserved")
    if config is not None:
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        tensors[CONFIG_KEY] = np.frombuffer(blob, dtype=np.uint8).astype(np.float32)
    data = _encode(tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple[dict, dict | None]:
    """Returns ``(params, config)``; ``config`` is None if none was stored."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}; this reader handles version {VERSION}", 4)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        start = r.pos
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(n, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"tensor {i} name is not UTF-8", start + 2) from e
        (ndim,) = r.unpack("<B", f"ndim of {name!r}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name!r}")
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(4 * size, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    body_end = r.pos
    (crc,) = r.unpack("<I", "CRC32")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after CRC32", r.pos)
    if zlib.crc32(data[:body_end]) != crc:
        raise FormatError("CRC32 mismatch", body_end)
    config = None
    if CONFIG_KEY in tensors:
        blob = tensors.pop(CONFIG_KEY).astype(np.uint8).tobytes()
        config = json.loads(blob.decode("utf-8"))
    return tensors, config


def load_checkpoint(path) -> dict:
    return read_checkpoint(path)[0]
