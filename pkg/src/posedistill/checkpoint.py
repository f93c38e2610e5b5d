"""DPCK parameter files: magic, u32 version, then (name, rank, extents, float32 data) records."""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DPCK"
VERSION = 1
MAX_RANK = 32  # numpy supports at most 64 dimensions


def encode_checkpoint(named_arrays):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in named_arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, named_arrays):
    Path(path).write_bytes(encode_checkpoint(named_arrays))


def decode_checkpoint(buf):
    if len(buf) < 8:
        raise FormatError("file too short for DPCK header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 8
    out = {}

    def need(n, what):
        if off + n > len(buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - off} left", off)

    while off < len(buf):
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(nlen, "name")
        try:
            name = bytes(buf[off:off + nlen]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", off) from None
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}", off)
        off += nlen
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, off)
        if rank > MAX_RANK:
            raise FormatError(f"rank {rank} of {name!r} exceeds {MAX_RANK}", off)
        off += 4
        need(4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = math.prod(shape)
        need(4 * count, f"data of {name!r}")
        out[name] = np.frombuffer(buf, "<f4", count, off).reshape(shape).astype(np.float32)
        off += 4 * count
    return out


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
