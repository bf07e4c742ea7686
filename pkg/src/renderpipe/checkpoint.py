"""Binary model checkpoints.

Layout, all integers little-endian:

    bytes 0..3   magic "RPN1"
    u32          format version (currently 1)
    u32          metadata length, then that many bytes of UTF-8 JSON
                 holding the model configuration
    u32          number of parameter blocks
    per block:   u16 name length, name bytes,
                 u8 rank, rank x u32 dims,
                 prod(dims) x float32 values
    u64          total file length, a cheap truncation check

Writes go to a sibling temp file followed by os.replace, so a crash mid-save
never leaves a half-written checkpoint at the target path.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import model
from .errors import DataError

MAGIC = b"RPN1"
VERSION = 1


def _pack_array(name: str, a: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    parts = [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim)]
    parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
    parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_bytes(params: model.ModelParams) -> bytes:
    named = params.named_arrays()
    meta = json.dumps({"config": params.config.to_dict()}, sort_keys=True).encode("utf-8")
    body = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta]
    body.append(struct.pack("<I", len(named)))
    for name, a in named.items():
        body.append(_pack_array(name, a))
    total = sum(len(p) for p in body) + 8
    body.append(struct.pack("<Q", total))
    return b"".join(body)


def save_checkpoint(path, params: model.ModelParams) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(params))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"checkpoint {self.path} is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> model.ModelParams:
    """Read a checkpoint back into ModelParams, bitwise identical to what was
    saved.  Any structural problem raises DataError rather than returning a
    partially filled model."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(buf) < 8 + len(MAGIC):
        raise DataError(f"checkpoint {path} is truncated")
    if buf[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    if struct.unpack("<Q", buf[-8:])[0] != len(buf):
        raise DataError(f"checkpoint {path} is truncated or corrupt (length check failed)")

    cur = _Cursor(buf[:-8], path)
    cur.take(len(MAGIC))
    version = cur.u32()
    if version != VERSION:
        raise DataError(f"checkpoint {path} has unsupported format version {version}")
    meta_len = cur.u32()
    try:
        meta = json.loads(cur.take(meta_len).decode("utf-8"))
        config = model.config_from_dict(meta["config"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {path} has unreadable metadata: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u16()).decode("utf-8")
        rank = cur.u8()
        dims = tuple(cur.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        a = np.frombuffer(cur.take(4 * count), dtype="<f4").reshape(dims)
        arrays[name] = a.astype(np.float32, copy=True)
    if cur.pos != len(cur.buf):
        raise DataError(f"checkpoint {path} has {len(cur.buf) - cur.pos} trailing bytes")

    fresh = model.init_params(config, np.random.default_rng(0))
    expected = fresh.named_arrays()
    missing = sorted(set(expected) - set(arrays))
    unknown = sorted(set(arrays) - set(expected))
    if missing or unknown:
        raise DataError(
            f"checkpoint {path} does not match its declared configuration"
            f" (missing {missing}, unknown {unknown})"
        )
    for name, a in arrays.items():
        if a.shape != expected[name].shape:
            raise DataError(
                f"checkpoint {path}: block {name} has shape {a.shape},"
                f" configuration implies {expected[name].shape}"
            )
        expected[name][...] = a
    return fresh
