"""Standalone writer for the ranking embedding file format.

Byte layout (little-endian throughout):

    header  <4sIB3xIIIQQI>: magic b"RKAD", u32 version (1), u8 precision
            tag (4 = float32, 8 = float64), 3 reserved zero bytes, u32 p,
            u32 d, u32 t, u64 item count, u64 query count, u32 CRC-32 of
            the body
    body    query table then item records:
            query entry: u32 query_id; u32 prompt byte length + UTF-8
                         bytes; t*d floats, row-major
            item record: u64 item_id; u32 query_id; p*d floats, row-major;
                         f64 target score; u8 bin flag (+ i32 bin when 1)

This module is written against the documented layout, independently of any
reader implementation, so it double-checks the contract from the producing
side.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"RKAD"
VERSION = 1
_HEADER = struct.Struct("<4sIB3xIIIQQI")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ExportError(Exception):
    """Invalid export request or inconsistent record geometry."""


@dataclass
class QueryEntry:
    query_id: int
    prompt: str
    tokens: np.ndarray  # (t, d)


@dataclass
class ItemEntry:
    item_id: int
    query_id: int
    patches: np.ndarray  # (p, d)
    score: float
    bin: int | None = None


def write_embedding_file(path, p: int, d: int, t: int, queries, items,
                         precision: int = 4) -> None:
    """Serialize query and item entries under a fixed (p, d, t) geometry."""
    if precision not in _DTYPES:
        raise ExportError(f"precision tag must be 4 or 8, got {precision}")
    if min(p, d, t) < 1:
        raise ExportError(f"geometry must be positive, got p={p} d={d} t={t}")
    dtype = _DTYPES[precision]

    known = set()
    body = bytearray()
    for q in sorted(queries, key=lambda q: q.query_id):
        if q.query_id in known:
            raise ExportError(f"duplicate query id {q.query_id}")
        known.add(q.query_id)
        tok = np.ascontiguousarray(q.tokens, dtype=dtype)
        if tok.shape != (t, d):
            raise ExportError(f"query {q.query_id}: token matrix {tok.shape} "
                              f"does not match header ({t}, {d})")
        if not np.all(np.isfinite(tok)):
            raise ExportError(f"query {q.query_id}: non-finite token values")
        prompt = q.prompt.encode("utf-8")
        body += struct.pack("<II", q.query_id, len(prompt))
        body += prompt
        body += tok.tobytes()

    seen_items = set()
    for it in items:
        if it.item_id in seen_items:
            raise ExportError(f"duplicate item id {it.item_id}")
        seen_items.add(it.item_id)
        if it.query_id not in known:
            raise ExportError(f"item {it.item_id}: unknown query id {it.query_id}")
        mat = np.ascontiguousarray(it.patches, dtype=dtype)
        if mat.shape != (p, d):
            raise ExportError(f"item {it.item_id}: patch matrix {mat.shape} "
                              f"does not match header ({p}, {d})")
        if not np.all(np.isfinite(mat)) or not np.isfinite(it.score):
            raise ExportError(f"item {it.item_id}: non-finite values")
        body += struct.pack("<QI", it.item_id, it.query_id)
        body += mat.tobytes()
        body += struct.pack("<d", float(it.score))
        if it.bin is None:
            body += struct.pack("<B", 0)
        else:
            body += struct.pack("<Bi", 1, int(it.bin))

    header = _HEADER.pack(MAGIC, VERSION, precision, p, d, t,
                          len(seen_items), len(known), zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bytes(body))
