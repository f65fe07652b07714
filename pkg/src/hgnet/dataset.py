"""Binary shard format for SceneSample datasets.

Layout (little-endian): magic ``HGN1``, version u32, sample count u32, then per
sample and per field in ``FIELD_NAMES`` order: dtype code u8, rank u8,
dims u32 x rank, raw payload.  A directory holds shards plus ``index.txt``
listing shard file names in order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scenegen import FIELD_NAMES, SceneSample

MAGIC = b"HGN1"
VERSION = 1
INDEX_NAME = "index.txt"
SHARD_PATTERN = "shard_{:05d}.hgn"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class DatasetFormatError(ValueError):
    pass


def _encode_field(arr: np.ndarray) -> bytes:
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def write_shard(samples: Sequence[SceneSample], path) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(samples))]
    for s in samples:
        for name in FIELD_NAMES:
            parts.append(_encode_field(getattr(s, name)))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"{self.path}: truncated payload at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_shard(path) -> list[SceneSample]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    out = []
    for _ in range(count):
        values = {}
        for name in FIELD_NAMES:
            code, rank = r.unpack("<BB")
            if code not in _DTYPES:
                raise DatasetFormatError(f"{path}: unknown dtype code {code} in field {name}")
            dims = r.unpack(f"<{rank}I")
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims)
            values[name] = arr.astype(dtype.newbyteorder("="))
        out.append(SceneSample(**values))
    if r.pos != len(r.buf):
        raise DatasetFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return out


def write_dataset(samples: Iterable[SceneSample], path, shard_size: int = 256) -> list[Path]:
    """Write samples as shards under directory ``path``; returns shard paths."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    shards = []
    for i in range(0, max(len(samples), 1), shard_size):
        shard = root / SHARD_PATTERN.format(len(shards))
        write_shard(samples[i:i + shard_size], shard)
        shards.append(shard)
    (root / INDEX_NAME).write_text("".join(p.name + "\n" for p in shards))
    return shards


def read_dataset(path) -> list[SceneSample]:
    root = Path(path)
    if root.is_file():
        return read_shard(root)
    index = root / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"{root}: no {INDEX_NAME}")
    out = []
    for line in index.read_text().splitlines():
        if line.strip():
            out.extend(read_shard(root / line.strip()))
    return out
