"""Versioned binary checkpoints: adapter config echo plus named tensors.

Layout (little-endian):
    magic b"RKCP", u32 version (1), u8 float width (4|8), 3 zero bytes,
    u32 CRC-32 of the body, then the body:
      u32 config JSON byte length, config JSON (UTF-8),
      u32 tensor count, then per tensor:
        u32 name length, name UTF-8,
        u32 ndim, u32 dims..., raw values (file float width).

Round-trips are bit-exact; loading never changes precision.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from . import autodiff as ad
from .model import AdapterConfig, AdapterParams, _param_shapes

MAGIC = b"RKCP"
VERSION = 1
_HEADER = struct.Struct("<4sIB3xI")
_WIDTH_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointFormatError(Exception):
    """Structured checkpoint parse/validation failure."""


def save_checkpoint(path, params: AdapterParams, config: AdapterConfig) -> None:
    width = params.dtype.itemsize
    if width not in _WIDTH_DTYPE:
        raise CheckpointFormatError(f"unsupported parameter dtype {params.dtype}")
    cfg = json.dumps(dataclasses.asdict(config), sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(cfg))
    body += cfg
    body += struct.pack("<I", len(params.tensors))
    for name, t in params.items():
        if t.values.dtype.itemsize != width:
            raise CheckpointFormatError(f"tensor {name} dtype differs from checkpoint width")
        nb = name.encode("utf-8")
        body += struct.pack("<I", len(nb))
        body += nb
        body += struct.pack("<I", t.values.ndim)
        body += struct.pack(f"<{t.values.ndim}I", *t.values.shape)
        body += np.ascontiguousarray(t.values, dtype=_WIDTH_DTYPE[width]).tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, width, zlib.crc32(bytes(body))))
        fh.write(body)


def load_checkpoint(path) -> tuple[AdapterParams, AdapterConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointFormatError(f"file too short for a header ({len(raw)} bytes)")
    magic, version, width, crc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if width not in _WIDTH_DTYPE:
        raise CheckpointFormatError(f"bad float width {width}")
    body = raw[_HEADER.size:]
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("body checksum mismatch")

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointFormatError(f"truncated while reading {what}")
        piece = body[pos:pos + n]
        pos += n
        return piece

    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        cfg_dict = json.loads(take(cfg_len, "config").decode("utf-8"))
        config = AdapterConfig(**cfg_dict)
    except (ValueError, TypeError) as e:
        raise CheckpointFormatError(f"bad config block: {e}") from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for k in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"name length of tensor {k}"))
        name = take(nlen, f"name of tensor {k}").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
        n_vals = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(take(n_vals * width, f"values of {name}"),
                               dtype=_WIDTH_DTYPE[width]).reshape(shape).copy()
        tensors[name] = ad.tensor(values, requires_grad=True,
                                  dtype=_WIDTH_DTYPE[width])
    if pos != len(body):
        raise CheckpointFormatError(f"{len(body) - pos} trailing bytes after last tensor")
    expected = dict(_param_shapes(config))
    if set(tensors) != set(expected):
        raise CheckpointFormatError("tensor names do not match the embedded config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointFormatError(f"tensor {name} has shape {tensors[name].shape}, "
                                        f"config implies {shape}")
    return AdapterParams(tensors), config
