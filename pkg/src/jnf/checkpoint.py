"""Binary checkpoints.

Layout (all integers little-endian)::

    b"JNFCKPT1"                       magic, the last byte is the format version
    u32 metadata length, UTF-8 JSON metadata
    records until EOF:
        u16 name length, name bytes, u8 rank, rank x u32 dims, prod(dims) x f64 values

The content hash of a checkpoint is the SHA-256 of the whole file.  Later
stages store the hash of the checkpoint they were trained against under
``metadata["parent"]``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC_PREFIX = b"JNFCKPT"
VERSION = b"1"
MAGIC = MAGIC_PREFIX + VERSION


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleVersionError(CheckpointError):
    pass


class ParentMismatchError(CheckpointError):
    """A checkpoint was trained against a different upstream checkpoint."""


@dataclass
class Checkpoint:
    kind: str
    metadata: dict
    state: dict[str, np.ndarray] = field(default_factory=dict)
    digest: str = ""

    @property
    def parent(self) -> str | None:
        return self.metadata.get("parent")


def encode(kind: str, metadata: Mapping, state: Mapping[str, np.ndarray]) -> bytes:
    meta = {**metadata, "kind": kind}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(blob)), blob]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"record {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(path, kind: str, metadata: Mapping, state: Mapping[str, np.ndarray]) -> str:
    """Write a checkpoint and return its content hash."""
    data = encode(kind, metadata, state)
    Path(path).write_bytes(data)
    return digest(data)


def _take(data: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(data):
        raise CheckpointError(f"truncated checkpoint while reading {what}", pos)
    return data[pos:pos + n]


def decode(data: bytes) -> Checkpoint:
    head = _take(data, 0, len(MAGIC), "magic")
    if head[:len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise CheckpointError("bad magic, not a checkpoint", 0)
    if head != MAGIC:
        raise IncompatibleVersionError(
            f"checkpoint format version {head[-1:].decode(errors='replace')!r} is not supported "
            f"(expected {VERSION.decode()})", len(MAGIC) - 1)
    pos = len(MAGIC)
    (n_meta,) = struct.unpack("<I", _take(data, pos, 4, "metadata length"))
    pos += 4
    try:
        meta = json.loads(_take(data, pos, n_meta, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable metadata: {err}", pos) from err
    pos += n_meta
    state: dict[str, np.ndarray] = {}
    while pos < len(data):
        start = pos
        (n_name,) = struct.unpack("<H", _take(data, pos, 2, "record name length"))
        pos += 2
        try:
            name = _take(data, pos, n_name, "record name").decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointError(f"record name is not UTF-8: {err}", pos) from err
        pos += n_name
        (rank,) = struct.unpack("<B", _take(data, pos, 1, f"rank of {name!r}"))
        pos += 1
        dims = struct.unpack(f"<{rank}I", _take(data, pos, 4 * rank, f"shape of {name!r}"))
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        raw = _take(data, pos, 8 * count, f"values of {name!r}")
        pos += 8 * count
        if name in state:
            raise CheckpointError(f"duplicate record {name!r}", start)
        state[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    kind = meta.pop("kind", None)
    if kind is None:
        raise CheckpointError("metadata lacks a kind", len(MAGIC) + 4)
    return Checkpoint(kind, meta, state, digest(data))


def load_checkpoint(path, kind: str | None = None, parent: str | None = None) -> Checkpoint:
    """Read a checkpoint; optionally insist on its kind and on the hash of its parent."""
    ckpt = decode(Path(path).read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {ckpt.kind!r}")
    if parent is not None and ckpt.parent != parent:
        raise ParentMismatchError(
            f"{path} was trained against checkpoint {ckpt.parent}, not {parent}")
    return ckpt


def file_digest(path) -> str:
    return digest(Path(path).read_bytes())
