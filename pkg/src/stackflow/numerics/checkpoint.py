"""Binary checkpoint records: ``HTFM`` magic, u32 version, u32 count, then
per record a u32 name length, UTF-8 name, u64 rows, u64 cols and the raw
little-endian float64 payload in row-major order."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HTFM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name in sorted(records):
        a = np.asarray(records[name], dtype="<f8")
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(1, -1)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<QQ", a.shape[0], a.shape[1]))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + n].decode("utf-8")
        off += n
        rows, cols = struct.unpack_from("<QQ", blob, off)
        off += 16
        size = rows * cols * 8
        if off + size > len(blob):
            raise CheckpointError(f"truncated record {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += size
    if off != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def save(path: str | Path, records: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(records))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def with_prefix(prefix: str, records: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in records.items()}


def strip_prefix(prefix: str, records: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in records.items() if k.startswith(prefix)}
