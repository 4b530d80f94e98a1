"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PANP" | u32 version | u64 body length | body | u32 CRC32

The CRC covers every byte before it. The body is a u32-length-prefixed JSON
header followed by a u32 array count and, per array, a u32-length-prefixed
UTF-8 name, a u32 rank, u32 dims and float64 little-endian data.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig
from .training import AdamState

MAGIC = b"PANP"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    adam: AdamState | None = None
    rng_state: dict | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _pack_array(name, arr):
    shape = np.shape(arr)
    # ascontiguousarray turns 0-d input into shape (1,)
    arr = np.ascontiguousarray(arr, dtype="<f8").reshape(shape)
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def to_bytes(ckpt: Checkpoint, version=VERSION):
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    adam_t = 0
    if ckpt.adam is not None:
        adam_t = ckpt.adam.t
        arrays += [(f"adam_m/{k}", v) for k, v in ckpt.adam.m.items()]
        arrays += [(f"adam_v/{k}", v) for k, v in ckpt.adam.v.items()]
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "adam_t": adam_t if ckpt.adam is not None else None,
        "rng_state": ckpt.rng_state,
        "step": ckpt.step,
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(head)) + head + struct.pack("<I", len(arrays))
    body += b"".join(_pack_array(name, arr) for name, arr in arrays)
    blob = _PREFIX.pack(MAGIC, version, len(body)) + body
    return blob + struct.pack("<I", zlib.crc32(blob))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("checkpoint body ends mid-record")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def from_bytes(blob):
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError(f"checkpoint truncated: {len(blob)} bytes")
    magic, version, body_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    expected = _PREFIX.size + body_len + 4
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"checkpoint truncated: {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise CheckpointFormatError(f"{len(blob) - expected} trailing bytes after checkpoint")
    stored = struct.unpack_from("<I", blob, expected - 4)[0]
    if zlib.crc32(blob[: expected - 4]) != stored:
        raise CheckpointChecksumError("checkpoint checksum mismatch (file corrupted)")

    r = _Reader(blob[_PREFIX.size : expected - 4])
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    adam = None
    if header["adam_t"] is not None:
        adam = AdamState(header["adam_t"], group("adam_m/"), group("adam_v/"))
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=group("param/"),
        adam=adam,
        rng_state=header["rng_state"],
        step=header["step"],
        meta=header["meta"],
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
