"""The CYCK container: an ordered list of named little-endian arrays.

Layout: magic "CYCK", version u32, entry count u32, then per entry
name length u16, UTF-8 name, dtype tag u8 (0 f32, 1 f64, 2 u64), rank u8,
rank x u32 extents and the raw payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import FormatError

CYCK_MAGIC = b"CYCK"
CYCK_VERSION = 1
_DTYPES = (np.dtype("<f4"), np.dtype("<f8"), np.dtype("<u8"))


class VersionError(FormatError):
    pass


def _tag(arr: np.ndarray) -> int:
    kind = arr.dtype
    if kind == np.float32:
        return 0
    if kind == np.float64:
        return 1
    if kind == np.uint64:
        return 2
    raise TypeError(f"CYCK stores float32, float64 or uint64 arrays, not {kind}")


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [CYCK_MAGIC, struct.pack("<II", CYCK_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} cannot be represented")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}I", tag, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a whole container; nothing is returned unless every byte checks out."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CYCK_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CYCK_MAGIC!r}", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CYCK_VERSION:
        raise VersionError(f"unsupported CYCK version {version} (expected {CYCK_VERSION})", 4)
    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", start + 2) from None
        tag, rank = take(2, "dtype/rank")
        if tag >= len(_DTYPES):
            raise FormatError(f"entry {name!r}: unknown dtype tag {tag}", pos - 2)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        dtype = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = take(size, f"payload of {name!r}")
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}", start)
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if pos != len(buf):
        raise FormatError("trailing bytes after last entry", pos)
    return entries


def save_entries(entries: Mapping[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode(entries))


def load_entries(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
