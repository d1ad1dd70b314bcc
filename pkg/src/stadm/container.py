"""The "STPK" container: a JSON header plus named float64 arrays.

Layout (little-endian)::

    magic "STPK" | u32 version | u32 header length | header (UTF-8 JSON)
    u32 array count | per array: u16 name length, name, u8 ndim, u32 dims..., f64 data
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes
from .errors import DataError, ParseError

MAGIC = b"STPK"
VERSION = 1


def encode_container(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    return b"".join(parts)


def decode_container(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise ParseError("not a parameter container (bad magic)")
    off = 4

    def read(fmt: str, what: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if len(blob) < off + size:
            raise ParseError(f"truncated container: missing {what}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    def read_bytes(n: int, what: str) -> bytes:
        nonlocal off
        if len(blob) < off + n:
            raise ParseError(f"truncated container: missing {what}")
        out = blob[off:off + n]
        off += n
        return out

    version, head_len = read("<II", "version/header length")
    if version != VERSION:
        raise ParseError(f"unsupported container version {version}")
    try:
        header = json.loads(read_bytes(head_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("container header is not valid JSON") from None
    (count,) = read("<I", "array count")
    arrays = {}
    for _ in range(count):
        (klen,) = read("<H", "array name length")
        name = read_bytes(klen, "array name").decode("utf-8")
        (ndim,) = read("<B", f"rank of {name}")
        shape = read(f"<{ndim}I", f"shape of {name}") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        raw = read_bytes(8 * n, f"data of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(blob):
        raise ParseError("container has trailing bytes")
    return header, arrays


def write_container(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_container(header, arrays))


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_container(blob)
