"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"ACKP" u32 version
    b"TNSR" u32 count, then per tensor:
        u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f32 data
    b"STAT" u32 length, JSON (sorted keys)
    b"END!"
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..datapipe.formats import atomic_write_bytes

MAGIC = b"ACKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointRecord:
    tensors: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)

    def params(self, prefix: str = "param/") -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def dumps(record: CheckpointRecord) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), b"TNSR", struct.pack("<I", len(record.tensors))]
    for name, arr in record.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    blob = json.dumps(record.state, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += [b"STAT", struct.pack("<I", len(blob)), blob, b"END!"]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0
        self.section = "header"

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: section {self.section!r} needs {n} bytes "
                                  f"at offset {self.off}, file has {len(self.data)}")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def expect(self, tag: bytes, section: str) -> None:
        self.section = section
        got = self.take(len(tag))
        if got != tag:
            raise CheckpointError(f"corrupt checkpoint: expected {tag!r} at offset {self.off - len(tag)}, got {got!r}")


def loads(data: bytes) -> CheckpointRecord:
    r = _Reader(data)
    r.expect(MAGIC, "header")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    r.expect(b"TNSR", "tensors")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    r.expect(b"STAT", "state")
    (slen,) = r.unpack("<I")
    try:
        state = json.loads(r.take(slen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: state section does not parse ({exc})") from None
    r.expect(b"END!", "trailer")
    if r.off != len(data):
        raise CheckpointError(f"corrupt checkpoint: {len(data) - r.off} trailing bytes after offset {r.off}")
    return CheckpointRecord(tensors, state)


def save_checkpoint(path, record: CheckpointRecord) -> None:
    atomic_write_bytes(path, dumps(record))


def load_checkpoint(path) -> CheckpointRecord:
    return loads(Path(path).read_bytes())
