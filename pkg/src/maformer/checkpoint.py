"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"MAFCKPT\\0"
    version u32
    config  u32 length + UTF-8 JSON (the ModelConfig)
    meta    u32 length + UTF-8 JSON (free-form run metadata)
    count   u32
    count records of:
        name   u16 length + UTF-8
        dtype  u8   (0 = float32, 1 = float64)
        ndim   u8
        dims   ndim x u64
        data   raw little-endian, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .params import ParameterStore

MAGIC = b"MAFCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(config: ModelConfig, params: ParameterStore, meta: dict | None = None) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION),
           _blob(json.dumps(config.to_dict(), sort_keys=True)),
           _blob(json.dumps(meta or {}, sort_keys=True)),
           struct.pack("<I", len(params))]
    for name, arr in params.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def from_bytes(buf: bytes):
    """Inverse of :func:`to_bytes`; returns ``(config, params, meta)``."""
    view = memoryview(buf)
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(read(8)) != MAGIC:
        raise CheckpointError("not a MAFormer checkpoint (bad magic)")
    (version,) = struct.unpack("<I", read(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def text():
        (n,) = struct.unpack("<I", read(4))
        return bytes(read(n)).decode("utf-8")

    config = ModelConfig.from_dict(json.loads(text()))
    meta = json.loads(text())
    (count,) = struct.unpack("<I", read(4))
    store = ParameterStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = bytes(read(nlen)).decode("utf-8")
        code, ndim = struct.unpack("<BB", read(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(read(n)), dtype=dt).reshape(shape)
        store.add(name, arr.astype(dt.newbyteorder("="), copy=True))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint records")
    return config, store, meta


def save(path, config: ModelConfig, params: ParameterStore, meta: dict | None = None):
    path = Path(path)
    path.write_bytes(to_bytes(config, params, meta))
    config.save(path.with_suffix(path.suffix + ".config.json"))


def load(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
