"""Binary checkpoint container.

Layout (little-endian throughout)::

    b"P2VC"  u32 version
    u64 metadata length, metadata as UTF-8 JSON (sorted keys, compact)
    u32 entry count
    per entry: u32 name length, UTF-8 name, u8 dtype code, u32 rank,
               rank x u64 dims, raw payload

Entries are written in the order given and read back in file order, so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import DataError

MAGIC = b"P2VC"
VERSION = 1

_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u8"): 4,
    np.dtype("bool"): 5,
    np.dtype("<i4"): 6,
}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class CheckpointError(DataError):
    """Malformed, truncated or incompatible checkpoint."""


def encode_metadata(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = encode_metadata(metadata)
    parts += [struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt metadata: {exc}") from None
    (count,) = r.unpack("<I", "entry count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        code, rank = r.unpack("<BI", f"tensor {name!r} header")
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q", f"tensor {name!r} dims")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        payload = r.take(nbytes, f"tensor {name!r} payload")
        if name in tensors:
            raise CheckpointError(f"{source}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes after the last entry")
    return tensors, metadata


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, metadata))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(buf, str(path))


def prefixed(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Entries under ``prefix`` with the prefix removed."""
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
