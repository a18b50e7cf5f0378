"""Binary checkpoint: config echo, vocabularies, named float32 tensors.

Layout (all integers little-endian unsigned 32-bit unless noted):

    magic   6 bytes  b"POITWR"
    version 1 byte   0x01
    config  u32 byte length + UTF-8 key=value text
    vocabs  2 blocks (user, business): u32 entry count, then per entry
            u32 byte length + UTF-8 id, in index order (entry 0 is the
            empty OOV sentinel)
    tensors u32 tensor count, then per tensor: u32 name length + UTF-8
            name, u32 rank, u32 dims, float32 values row-major

Round-trips are bit-exact; any version or structural mismatch is a hard
error.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .features import Vocabulary

MAGIC = b"POITWR"
VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


def _write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def _write_bytes(f: BinaryIO, data: bytes) -> None:
    _write_u32(f, len(data))
    f.write(data)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CorruptFile(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def _read_bytes(f: BinaryIO) -> bytes:
    return _read_exact(f, _read_u32(f))


def save_checkpoint(
    path: str,
    tensors: dict[str, np.ndarray],
    user_vocab: Vocabulary,
    business_vocab: Vocabulary,
    config_text: str,
) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([VERSION]))
    _write_bytes(buf, config_text.encode("utf-8"))
    for vocab in (user_vocab, business_vocab):
        _write_u32(buf, len(vocab))
        for ident in vocab.ids:
            _write_bytes(buf, ident.encode("utf-8"))
    _write_u32(buf, len(tensors))
    for name in sorted(tensors):
        tensor = np.ascontiguousarray(tensors[name], dtype="<f4")
        _write_bytes(buf, name.encode("utf-8"))
        _write_u32(buf, tensor.ndim)
        for dim in tensor.shape:
            _write_u32(buf, dim)
        buf.write(tensor.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(
    path: str,
) -> tuple[dict[str, np.ndarray], Vocabulary, Vocabulary, str]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CorruptFile(f"bad magic: {magic!r}")
        version = _read_exact(f, 1)[0]
        if version != VERSION:
            raise VersionMismatch(f"format version {version}, expected {VERSION}")
        config_text = _read_bytes(f).decode("utf-8")
        vocabs = []
        for _ in range(2):
            count = _read_u32(f)
            if count < 1:
                raise CorruptFile("vocabulary without OOV entry")
            ids = [_read_bytes(f).decode("utf-8") for _ in range(count)]
            if ids[0] != "":
                raise CorruptFile("vocabulary index 0 is not the OOV sentinel")
            vocabs.append(Vocabulary(ids[1:]))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(_read_u32(f)):
            name = _read_bytes(f).decode("utf-8")
            rank = _read_u32(f)
            shape = tuple(_read_u32(f) for _ in range(rank))
            n_values = int(np.prod(shape)) if shape else 1
            data = _read_exact(f, 4 * n_values)
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CorruptFile("trailing bytes after tensor section")
    return tensors, vocabs[0], vocabs[1], config_text
