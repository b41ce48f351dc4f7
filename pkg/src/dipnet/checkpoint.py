"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DIPNETCK"                      magic
    u32 version
    u32 n, n bytes                   header JSON (config, fingerprint, step, RNG state, ...)
    u32 count                        number of blobs
    per blob:
        u16 n, n bytes               UTF-8 name
        u8 ndim, ndim * u32          shape
        float32 LE data              prod(shape) values
    u32 crc32                        of every preceding byte

The header is serialized with sorted keys and no whitespace, and blobs are
written in insertion order, so equal contents give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

MAGIC = b"DIPNETCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for unreadable or incompatible checkpoint files."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


def fingerprint(descriptor: dict) -> str:
    """Stable hash of an architecture descriptor."""
    text = json.dumps(descriptor, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    header: dict
    blobs: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def section(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Blobs whose name starts with ``prefix``, with the prefix stripped."""
        return OrderedDict((k[len(prefix):], v) for k, v in self.blobs.items() if k.startswith(prefix))


def to_bytes(ckpt: Checkpoint, version: int = FORMAT_VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<I", version)]
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(header)), header, struct.pack("<I", len(ckpt.blobs))]
    for name, arr in ckpt.blobs.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes, expected_fingerprint: str = None) -> Checkpoint:
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CorruptCheckpointError("checkpoint CRC mismatch")
    r = _Reader(buf[:-4])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (n,) = r.unpack("<I")
    try:
        header = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    if expected_fingerprint is not None and header.get("fingerprint") != expected_fingerprint:
        raise FingerprintMismatchError("checkpoint was written for a different architecture")
    (count,) = r.unpack("<I")
    blobs = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CorruptCheckpointError("trailing bytes after last blob")
    return Checkpoint(header, blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected_fingerprint: str = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), expected_fingerprint)


def blobs_from_state(prefix: str, state: Dict[str, np.ndarray]) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((prefix + k, np.asarray(v, dtype=np.float32)) for k, v in state.items())
