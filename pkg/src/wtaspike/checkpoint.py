"""Flat binary checkpoints.

Layout, all integers little-endian::

    magic    8 bytes  b"WTACKPT\\0"
    version  u32
    config   u32 byte length, then UTF-8 ``key=value`` lines
    params   u32 count, then blobs
    optim    u64 step, u32 count, then blobs

    blob     u16 name length, UTF-8 name, u8 dtype code, u8 ndim,
             ndim x u32 dims, raw little-endian data

dtype codes: 1 float64, 2 float32, 3 int8, 4 int64.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"WTACKPT\0"
VERSION = 1

DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("i1"), 4: np.dtype("<i8")}
CODES = {(dt.kind, dt.itemsize): code for code, dt in DTYPES.items()}


def _write_blob(buf, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = CODES.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self):
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        code, ndim = self.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError(f"{self.path}: {name} has unknown dtype code {code}")
        shape = self.unpack(f"<{ndim}I")
        dt = DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="), copy=True)


def encode(config: dict, params: dict, optim_step: int = 0, optim: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        _write_blob(buf, name, arr)
    optim = optim or {}
    buf.write(struct.pack("<QI", int(optim_step), len(optim)))
    for name, arr in optim.items():
        _write_blob(buf, name, arr)
    return buf.getvalue()


def decode(data: bytes, path="<bytes>"):
    """Inverse of :func:`encode`: ``(config, params, optim_step, optim)``."""
    rd = _Reader(data, path)
    magic = rd.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = rd.unpack("<I")
    try:
        text = rd.take(n).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: config header is not valid UTF-8") from None
    config = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed config line {line!r}")
        config[key] = value
    (count,) = rd.unpack("<I")
    params = dict(rd.blob() for _ in range(count))
    step, count = rd.unpack("<QI")
    optim = dict(rd.blob() for _ in range(count))
    if rd.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - rd.pos} trailing bytes")
    return config, params, step, optim


def save(path, config: dict, params: dict, optim_step: int = 0, optim: dict | None = None) -> None:
    """Write atomically (temp file then rename) so a crash never leaves half a checkpoint."""
    path = Path(path)
    data = encode(config, params, optim_step, optim)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(data, path)
