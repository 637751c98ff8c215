"""Offline embedding index with exact maximum-inner-product top-K search.

Vectors are stored as a contiguous float32 row-major matrix; scores accumulate
in float64. Ties in score are broken by ascending item id, which makes every
result list deterministic and independent of row storage order.

Index file (little-endian)::

    b"LDIX" | u32 version | u32 d | u64 count | u64 ids[count]
    | f32 vectors[count * d] | u32 CRC-32 of the vector payload
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels

MAGIC = b"LDIX"
VERSION = 1
DEFAULT_BLOCK = 1024
_HEADER = struct.Struct("<4sIIQ")


class EmbeddingIndexError(Exception):
    """Base class for index errors."""


class IndexSealedError(EmbeddingIndexError):
    pass


class IndexFormatError(EmbeddingIndexError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class ChecksumError(IndexFormatError):
    pass


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked ``(id, score)`` pairs, best first."""

    ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.size)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return iter(self.items())

    def items(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]

    def __eq__(self, other):
        if not isinstance(other, RetrievalResult):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.scores, other.scores)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("LIGHTDOT_THREADS", "1")))
    except ValueError:
        return 1


class EmbeddingIndex:
    """Append-only until :meth:`seal`; immutable and thread-safe for readers afterwards."""

    def __init__(self, dim: int, block: int = DEFAULT_BLOCK):
        if dim < 1:
            raise ValueError("index dimension must be >= 1")
        self.dim = dim
        self.block = block
        self._pending_ids: list[int] = []
        self._pending_vecs: list[np.ndarray] = []
        self._id_set: set[int] = set()
        self._ids = np.empty(0, dtype=np.uint64)
        self._vectors = np.empty((0, dim), dtype=np.float32)
        self.sealed = False
        self._lock = threading.Lock()
        self.rows_scanned = 0

    @classmethod
    def from_arrays(cls, ids, vectors, block: int = DEFAULT_BLOCK) -> EmbeddingIndex:
        vectors = np.asarray(vectors)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-d, got shape {vectors.shape}")
        ids = np.asarray(ids, dtype=np.uint64)
        if ids.shape[0] != vectors.shape[0]:
            raise ValueError(f"{ids.shape[0]} ids for {vectors.shape[0]} vectors")
        if np.unique(ids).size != ids.size:
            raise ValueError("duplicate ids")
        idx = cls(vectors.shape[1], block)
        idx._ids = ids.copy()
        idx._id_set = set(int(i) for i in ids)
        idx._vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        return idx.seal()

    def add(self, item_id: int, vector) -> None:
        if self.sealed:
            raise IndexSealedError("index is sealed; no further inserts")
        item_id = int(item_id)
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.size != self.dim:
            raise ValueError(f"vector dimension {vec.size} != index dimension {self.dim}")
        if item_id in self._id_set:
            raise ValueError(f"duplicate id {item_id}")
        self._id_set.add(item_id)
        self._pending_ids.append(item_id)
        self._pending_vecs.append(vec)

    def seal(self) -> EmbeddingIndex:
        if not self.sealed:
            if self._pending_ids:
                self._ids = np.concatenate([self._ids, np.asarray(self._pending_ids, dtype=np.uint64)])
                self._vectors = np.ascontiguousarray(
                    np.concatenate([self._vectors, np.stack(self._pending_vecs).astype(np.float32)]))
            self._pending_ids, self._pending_vecs = [], []
            self._ids.setflags(write=False)
            self._vectors.setflags(write=False)
            self.sealed = True
        return self

    def __len__(self) -> int:
        return int(self._ids.size) + len(self._pending_ids)

    @property
    def count(self) -> int:
        return len(self)

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def vector(self, item_id: int) -> np.ndarray:
        pos = np.flatnonzero(self._ids == np.uint64(item_id))
        if pos.size == 0:
            raise KeyError(item_id)
        return self._vectors[pos[0]]

    def _require_sealed(self) -> None:
        if not self.sealed:
            raise EmbeddingIndexError("index must be sealed before searching")

    def _count_scan(self) -> None:
        with self._lock:
            self.rows_scanned += self.count


def _query_vector(index: EmbeddingIndex, query) -> np.ndarray:
    q = np.ascontiguousarray(query, dtype=np.float64).reshape(-1)
    if q.size != index.dim:
        raise ValueError(f"query dimension {q.size} != index dimension {index.dim}")
    return q


def top_k(index: EmbeddingIndex, query, k: int) -> RetrievalResult:
    """Exact top-``k`` by inner product over every row; returns ``min(k, count)`` entries."""
    index._require_sealed()
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _query_vector(index, query)
    pos, scores = kernels.scan_top_k(index.vectors, index.ids, q, k, index.block)
    index._count_scan()
    return RetrievalResult(index.ids[pos], scores)


def all_scores(index: EmbeddingIndex, query) -> np.ndarray:
    """Score of ``query`` against every row, in storage order."""
    index._require_sealed()
    q = _query_vector(index, query)
    out = np.empty(index.count)
    kernels.scan_scores(index.vectors, q, out)
    return out


def batch_top_k(index: EmbeddingIndex, queries, k: int, threads: int | None = None) -> list[RetrievalResult]:
    """``top_k`` for each row of ``queries``; order-preserving, optionally across threads."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.size == 0:
        return []
    if queries.ndim != 2:
        raise ValueError(f"queries must be 2-d, got shape {queries.shape}")
    threads = default_threads() if threads is None else threads
    if threads <= 1 or queries.shape[0] == 1:
        return [top_k(index, q, k) for q in queries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda q: top_k(index, q, k), queries))


def build_index(vectors, ids: Sequence[int]) -> EmbeddingIndex:
    """Seal precomputed global vectors (float64 in, float32 stored) under ``ids``."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError("cannot build an index from an empty corpus")
    return EmbeddingIndex.from_arrays(ids, vectors)


def build_index_from_encoder(model, items, ids: Sequence[int], modality: str) -> EmbeddingIndex:
    """Encode ``items`` with the image or text encoder of ``model`` and index their globals."""
    from .encoders import encode_images, encode_texts

    if len(items) == 0:
        raise ValueError("cannot build an index from an empty corpus")
    if len(set(int(i) for i in ids)) != len(ids):
        raise ValueError("duplicate ids")
    if modality == "image":
        vecs = encode_images(model, items)
    elif modality == "text":
        vecs = encode_texts(model, items)
    else:
        raise ValueError(f"modality must be 'image' or 'text', got {modality!r}")
    return build_index(vecs, ids)


def save_index(index: EmbeddingIndex, path) -> None:
    index._require_sealed()
    payload = np.ascontiguousarray(index.vectors, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, index.dim, index.count))
        fh.write(np.ascontiguousarray(index.ids, dtype="<u8").tobytes())
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_index(path, block: int = DEFAULT_BLOCK) -> EmbeddingIndex:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise IndexFormatError(path, "truncated header")
    magic, version, dim, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise IndexFormatError(path, f"bad magic {magic!r}")
    if version != VERSION:
        raise IndexFormatError(path, f"unsupported version {version}")
    id_end = _HEADER.size + 8 * count
    vec_end = id_end + 4 * count * dim
    if len(buf) != vec_end + 4:
        raise IndexFormatError(path, f"size {len(buf)} bytes, expected {vec_end + 4}")
    payload = buf[id_end:vec_end]
    (crc,) = struct.unpack_from("<I", buf, vec_end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(path, "payload checksum mismatch")
    ids = np.frombuffer(buf, dtype="<u8", count=count, offset=_HEADER.size).astype(np.uint64)
    vecs = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(count, dim)
    if count == 0:
        raise IndexFormatError(path, "index holds no vectors")
    return EmbeddingIndex.from_arrays(ids, vecs, block)
