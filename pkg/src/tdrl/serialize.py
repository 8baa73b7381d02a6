"""Flat binary records for parameter checkpoints and clip caches.

Layout: magic bytes, then repeated records of
``u32 name_len | name (utf-8) | u32 rank | u32 extents[rank] | f32 data[...]``,
all little-endian, until end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_MAGIC = b"TDRL1"
CLIPS_MAGIC = b"CLIPS1"


class FormatError(ValueError):
    pass


def write_records(path: str | Path, arrays: Mapping[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_records(path: str | Path, magic: bytes = CHECKPOINT_MAGIC) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(magic):
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated record at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        if name in out:
            raise FormatError(f"{path}: duplicate record {name!r}")
        out[name] = data
    return out
