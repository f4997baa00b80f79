"""Embedding file format, dataset splits, and synthetic data generators.

File layout (all integers little-endian, floats IEEE-754 little-endian):

    offset  size  field
    0       4     magic  b"RKAD"
    4       4     u32    format version (1)
    8       1     u8     precision tag: 4 = float32, 8 = float64
    9       3     -      reserved, must be zero
    12      4     u32    p   patch tokens per item        (>= 1)
    16      4     u32    d   embedding width              (>= 1)
    20      4     u32    t   text tokens per query        (>= 1)
    24      8     u64    item count
    32      8     u64    query count
    40      4     u32    CRC-32 (zlib) of the body
    44      ...          body

    body = query table then item records, tightly packed:
      query entry:  u32 query_id
                    u32 prompt byte length, then that many UTF-8 bytes
                    t*d floats (precision tag), row-major token matrix
      item record:  u64 item_id
                    u32 query_id (must exist in the query table)
                    p*d floats (precision tag), row-major patch matrix
                    f64 target score y
                    u8  bin flag; if 1, i32 ordinal bin follows

Readers validate the header, the checksum, and full body consumption, so
truncation or byte corruption anywhere surfaces as EmbeddingFormatError
with a byte offset instead of a panic or a silent misread. Values round-trip
bit-exactly in both precisions; no implicit 32<->64 conversion happens on
read. Target scores are always stored as float64.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Rng

MAGIC = b"RKAD"
VERSION = 1
_HEADER = struct.Struct("<4sIB3xIIIQQI")
_PRECISION_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class EmbeddingFormatError(Exception):
    """Structured parse/validation failure, with a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


@dataclass
class QueryRecord:
    query_id: int
    prompt: str
    tokens: np.ndarray  # (t, d)


@dataclass
class ItemRecord:
    item_id: int
    query_id: int
    patches: np.ndarray  # (p, d)
    score: float
    bin: int | None = None


@dataclass
class Dataset:
    """In-memory embedding collection with a fixed (p, d, t) geometry."""

    patch_tokens: int
    dim: int
    text_tokens: int
    precision: int = 4  # bytes per float: 4 or 8
    queries: dict = field(default_factory=dict)
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def validate(self) -> None:
        if self.precision not in _PRECISION_DTYPE:
            raise EmbeddingFormatError(f"precision tag must be 4 or 8, got {self.precision}")
        if min(self.patch_tokens, self.dim, self.text_tokens) < 1:
            raise EmbeddingFormatError("p, d, and t must all be positive")
        dt = _PRECISION_DTYPE[self.precision]
        for q in self.queries.values():
            if q.tokens.shape != (self.text_tokens, self.dim):
                raise EmbeddingFormatError(
                    f"query {q.query_id}: token matrix {q.tokens.shape} != "
                    f"({self.text_tokens}, {self.dim})")
            if q.tokens.dtype != dt:
                raise EmbeddingFormatError(f"query {q.query_id}: dtype {q.tokens.dtype} "
                                           f"does not match precision tag {self.precision}")
        seen = set()
        for it in self.items:
            if it.item_id in seen:
                raise EmbeddingFormatError(f"duplicate item id {it.item_id}")
            seen.add(it.item_id)
            if it.query_id not in self.queries:
                raise EmbeddingFormatError(f"item {it.item_id}: unknown query id {it.query_id}")
            if it.patches.shape != (self.patch_tokens, self.dim):
                raise EmbeddingFormatError(
                    f"item {it.item_id}: patch matrix {it.patches.shape} != "
                    f"({self.patch_tokens}, {self.dim})")
            if it.patches.dtype != dt:
                raise EmbeddingFormatError(f"item {it.item_id}: dtype {it.patches.dtype} "
                                           f"does not match precision tag {self.precision}")
            if not np.all(np.isfinite(it.patches)) or not np.isfinite(it.score):
                raise EmbeddingFormatError(f"item {it.item_id}: non-finite values")

    def subset(self, item_ids) -> "Dataset":
        wanted = set(int(i) for i in item_ids)
        return replace(self, items=[it for it in self.items if it.item_id in wanted])


def write_file(path, dataset: Dataset) -> None:
    """Serialize a dataset; validation failures name the offending record."""
    dataset.validate()
    dt = _PRECISION_DTYPE[dataset.precision]
    body = bytearray()
    for qid in sorted(dataset.queries):
        q = dataset.queries[qid]
        prompt = q.prompt.encode("utf-8")
        body += struct.pack("<II", qid, len(prompt))
        body += prompt
        body += np.ascontiguousarray(q.tokens, dtype=dt).tobytes()
    for it in dataset.items:
        body += struct.pack("<QI", it.item_id, it.query_id)
        body += np.ascontiguousarray(it.patches, dtype=dt).tobytes()
        body += struct.pack("<d", float(it.score))
        if it.bin is None:
            body += struct.pack("<B", 0)
        else:
            body += struct.pack("<Bi", 1, int(it.bin))
    header = _HEADER.pack(MAGIC, VERSION, dataset.precision, dataset.patch_tokens,
                          dataset.dim, dataset.text_tokens, len(dataset.items),
                          len(dataset.queries), zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


class _Cursor:
    """Sequential reader over the body with offset-labelled errors."""

    def __init__(self, buf: bytes, base: int):
        self.buf = buf
        self.pos = 0
        self.base = base

    @property
    def offset(self) -> int:
        return self.base + self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise EmbeddingFormatError(f"truncated while reading {what}", self.offset)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def read_file(path) -> Dataset:
    """Parse and validate an embedding file written by write_file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError(f"file too short for a header ({len(raw)} bytes)", 0)
    magic, version, precision, p, d, t, n_items, n_queries, crc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported format version {version}", 4)
    if precision not in _PRECISION_DTYPE:
        raise EmbeddingFormatError(f"bad precision tag {precision}", 8)
    if raw[9:12] != b"\x00\x00\x00":
        raise EmbeddingFormatError("reserved header bytes are not zero", 9)
    if min(p, d, t) < 1:
        raise EmbeddingFormatError(f"non-positive dims p={p} d={d} t={t}", 12)

    body = raw[_HEADER.size:]
    if zlib.crc32(body) != crc:
        raise EmbeddingFormatError("body checksum mismatch", _HEADER.size)
    dt = _PRECISION_DTYPE[precision]
    cur = _Cursor(body, _HEADER.size)

    queries = {}
    for k in range(n_queries):
        qid, plen = cur.unpack("<II", f"query entry {k}")
        prompt_bytes = cur.take(plen, f"prompt of query {qid}")
        try:
            prompt = prompt_bytes.decode("utf-8")
        except UnicodeDecodeError:
            raise EmbeddingFormatError(f"query {qid}: prompt is not UTF-8",
                                       cur.offset - plen) from None
        tok = np.frombuffer(cur.take(t * d * precision, f"tokens of query {qid}"),
                            dtype=dt).reshape(t, d).copy()
        if qid in queries:
            raise EmbeddingFormatError(f"duplicate query id {qid}", cur.offset)
        queries[qid] = QueryRecord(query_id=qid, prompt=prompt, tokens=tok)

    items = []
    for k in range(n_items):
        item_id, qid = cur.unpack("<QI", f"item record {k}")
        patches = np.frombuffer(cur.take(p * d * precision, f"patches of item {item_id}"),
                                dtype=dt).reshape(p, d).copy()
        (score,) = cur.unpack("<d", f"score of item {item_id}")
        (flag,) = cur.unpack("<B", f"bin flag of item {item_id}")
        if flag not in (0, 1):
            raise EmbeddingFormatError(f"item {item_id}: bad bin flag {flag}", cur.offset - 1)
        b = None
        if flag:
            (b,) = cur.unpack("<i", f"bin of item {item_id}")
        items.append(ItemRecord(item_id=item_id, query_id=qid, patches=patches,
                                score=score, bin=b))
    if cur.pos != len(body):
        raise EmbeddingFormatError(f"{len(body) - cur.pos} trailing bytes after last record",
                                   cur.offset)

    ds = Dataset(patch_tokens=p, dim=d, text_tokens=t, precision=precision,
                 queries=queries, items=items)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Either shuffled fractions (deterministic under seed) or explicit id lists."""

    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    train_ids: list | None = None
    val_ids: list | None = None
    test_ids: list | None = None


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition items into train/val/test; queries are shared by all parts."""
    if spec.train_ids is not None or spec.val_ids is not None or spec.test_ids is not None:
        parts = (spec.train_ids or [], spec.val_ids or [], spec.test_ids or [])
        claimed = [i for part in parts for i in part]
        if len(set(claimed)) != len(claimed):
            raise ValueError("explicit split id lists overlap")
        return tuple(dataset.subset(part) for part in parts)
    fr = spec.fractions
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative values summing to 1, got {fr}")
    ids = np.array([it.item_id for it in dataset.items], dtype=np.int64)
    order = Rng(spec.seed).split("split").permutation(len(ids))
    shuffled = ids[order]
    n = len(ids)
    n_train = int(n * fr[0])
    n_val = int(n * fr[1])
    return (dataset.subset(shuffled[:n_train]),
            dataset.subset(shuffled[n_train:n_train + n_val]),
            dataset.subset(shuffled[n_train + n_val:]))


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Desk-scale synthetic embedding datasets with known structure.

    linear_pool: the target is a linear functional of the mean-pooled patch
    matrix (plus optional noise), min-max scaled per query to [0, 10]; a
    least-squares fit on pooled features solves the noiseless case exactly.

    pairwise_contrast: each item plants `count` rows drawn near a
    query-specific cluster center among distractor rows that share a random
    per-item offset; the target is the planted count scaled to [0, 10].
    The per-item offset confounds naive mean-pooling, so comparing row
    subsets across items is the reliable signal.
    """

    n_items: int = 1000
    patch_tokens: int = 16
    dim: int = 32
    text_tokens: int = 8
    n_queries: int = 1
    kind: str = "linear_pool"
    noise: float = 0.0
    seed: int = 0
    max_count: int = 8  # pairwise_contrast only
    precision: int = 4


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    if spec.kind not in ("linear_pool", "pairwise_contrast"):
        raise ValueError(f"unknown synthetic kind {spec.kind!r}")
    if spec.n_items < 1 or spec.n_queries < 1:
        raise ValueError("need at least one item and one query")
    if spec.kind == "pairwise_contrast" and spec.max_count >= spec.patch_tokens:
        raise ValueError("max_count must stay below the patch token count")
    dt = _PRECISION_DTYPE[spec.precision]
    rng = Rng(spec.seed).split(f"synthetic/{spec.kind}")

    queries = {}
    latents = {}
    for q in range(spec.n_queries):
        tokens = rng.normal((spec.text_tokens, spec.dim)).astype(dt)
        queries[q] = QueryRecord(query_id=q, prompt=f"synthetic attribute {q}", tokens=tokens)
        u = rng.normal(spec.dim)
        latents[q] = u / np.linalg.norm(u)

    assignments = [i % spec.n_queries for i in range(spec.n_items)]
    items = []
    if spec.kind == "linear_pool":
        raw = np.zeros(spec.n_items)
        mats = []
        for i in range(spec.n_items):
            z = rng.normal((spec.patch_tokens, spec.dim))
            raw[i] = z.mean(axis=0) @ latents[assignments[i]] + rng.normal() * spec.noise
            mats.append(z)
        scores = np.zeros(spec.n_items)
        for q in range(spec.n_queries):
            mask = np.array([a == q for a in assignments])
            if not mask.any():
                continue
            lo, hi = raw[mask].min(), raw[mask].max()
            span = hi - lo if hi > lo else 1.0
            scores[mask] = 10.0 * (raw[mask] - lo) / span
        for i in range(spec.n_items):
            items.append(ItemRecord(item_id=i, query_id=assignments[i],
                                    patches=mats[i].astype(dt), score=float(scores[i])))
    else:
        for i in range(spec.n_items):
            q = assignments[i]
            count = int(rng.integers(0, spec.max_count + 1))
            shift = rng.normal(spec.dim)
            rows = rng.normal((spec.patch_tokens, spec.dim)) + shift
            planted = latents[q] * 2.0 + 0.25 * rng.normal((count, spec.dim))
            rows[:count] = planted
            perm = rng.permutation(spec.patch_tokens)
            y = 10.0 * count / spec.max_count
            items.append(ItemRecord(item_id=i, query_id=q, patches=rows[perm].astype(dt),
                                    score=float(y), bin=count))
    return Dataset(patch_tokens=spec.patch_tokens, dim=spec.dim, text_tokens=spec.text_tokens,
                   precision=spec.precision, queries=queries, items=items)
