"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MT4S" | version u32 | step u64
    meta_len u32 | meta (UTF-8 JSON, sorted keys)
    count u32 | count x (name_len u16, name UTF-8, dtype u8, ndim u8, dims u32 x ndim)
    tensor payloads in name-table order (little-endian, row-major)
    rng_len u32 | rng state blob
    crc32 u32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ChecksumError

MAGIC = b"MT4S"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    step: int
    meta: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng: bytes = b""


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, ckpt.step)]
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    payloads = []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", _CODES[dt], arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape)]
        payloads.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    parts += payloads
    parts += [struct.pack("<I", len(ckpt.rng)), ckpt.rng]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic or truncated header)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{source}: CRC32 mismatch (file corrupted or truncated)")
    version, step = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    try:
        off = 16
        (n,) = struct.unpack_from("<I", body, off)
        meta = json.loads(body[off + 4 : off + 4 + n].decode("utf-8"))
        off += 4 + n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        table = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, off)
            name = body[off + 2 : off + 2 + ln].decode("utf-8")
            off += 2 + ln
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            table.append((name, _DTYPES[code], shape))
        tensors = OrderedDict()
        for name, dt, shape in table:
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(body):
                raise CheckpointError(f"{source}: tensor {name} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
            off += size
        (rl,) = struct.unpack_from("<I", body, off)
        rng = body[off + 4 : off + 4 + rl]
        if off + 4 + rl != len(body):
            raise CheckpointError(f"{source}: trailing bytes after RNG blob")
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: malformed checkpoint ({e})") from e
    return Checkpoint(step, meta, tensors, rng)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    blob = encode(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    return decode(data, str(path))
