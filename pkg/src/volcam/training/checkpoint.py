"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"VOLCAMCK"  magic
    u32          format version
    sections     repeated: 4-byte ASCII tag, u64 payload length, payload
    b"END!"      trailer tag
    u32          CRC-32 of every preceding byte

Sections: ``ARCH`` (architecture descriptor text), ``PARM`` (parameters),
``BUFS`` (normalization running stats), ``OPTM`` (Adam step + moments),
``BEST`` (best-so-far parameters and buffers, optional), ``STAT`` (JSON:
history, scheduler, early-stop, RNG state, epoch, train config).

Tensor tables: u32 count, then per entry u16 name length, UTF-8 name, u8 rank,
u32 extents, raw little-endian float32 data.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"VOLCAMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def pack_table(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(out)


def unpack_table(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated tensor table")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError("trailing bytes in tensor table")
    return out


def write_container(path, sections: list[tuple[str, bytes]]) -> None:
    body = [MAGIC, struct.pack("<I", VERSION)]
    for tag, payload in sections:
        t = tag.encode()
        if len(t) != 4:
            raise ValueError(f"section tag must be 4 bytes, got {tag!r}")
        body.append(t + struct.pack("<Q", len(payload)) + payload)
    body.append(b"END!")
    data = b"".join(body)
    data += struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_container(path) -> dict[str, bytes]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version} unsupported (expected {VERSION})")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc or data[-8:-4] != b"END!":
        raise CheckpointError(f"{path}: checkpoint is truncated or corrupt (checksum mismatch)")
    pos = 12
    end = len(data) - 8
    sections = {}
    while pos < end:
        if pos + 12 > end:
            raise CheckpointError(f"{path}: truncated section header")
        tag = data[pos : pos + 4].decode(errors="replace")
        (length,) = struct.unpack("<Q", data[pos + 4 : pos + 12])
        pos += 12
        if pos + length > end:
            raise CheckpointError(f"{path}: section {tag} overruns the file")
        sections[tag] = data[pos : pos + length]
        pos += length
    return sections


def dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
