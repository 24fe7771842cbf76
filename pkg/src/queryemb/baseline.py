"""Bag-of-trigrams baseline: hashed count vectors with Bray-Curtis retrieval.

Each query becomes a fixed-width count vector by hashing trigram ids into
buckets with splitmix64 (Steele, Lea & Flood's 64-bit finalizer), chosen
because it is tiny, well documented, and bit-stable across platforms.
Retrieval is brute-force nearest neighbours under Bray-Curtis distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Query

HASH_DIM = 300

_M64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MIX_1 = 0xBF58476D1CE4E5B9
_MIX_2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """The splitmix64 output function applied to x + gamma.

    Equivalent to the first output of a splitmix64 stream seeded with x,
    e.g. splitmix64(0) == 0xE220A8397B1DCDAF.
    """
    z = (int(x) + _SPLITMIX_GAMMA) & _M64
    z = ((z ^ (z >> 30)) * _MIX_1) & _M64
    z = ((z ^ (z >> 27)) * _MIX_2) & _M64
    return (z ^ (z >> 31)) & _M64


def bucket_of(trigram_id: int, n_buckets: int = HASH_DIM) -> int:
    return splitmix64(trigram_id) % n_buckets


@dataclass(frozen=True)
class HashedQuery:
    """Bucketed trigram counts for one query; total count equals query length."""

    buckets: np.ndarray
    query_id: int

    def __post_init__(self) -> None:
        b = np.asarray(self.buckets, dtype=np.float64)
        object.__setattr__(self, "buckets", b)
        if b.ndim != 1:
            raise ValueError("buckets must be a 1-d vector")
        if np.any(b < 0):
            raise ValueError("bucket counts must be non-negative")


def hash_query(q: Query, query_id: int = -1, n_buckets: int = HASH_DIM) -> HashedQuery:
    buckets = np.zeros(n_buckets, dtype=np.float64)
    for t in q.trigram_ids:
        buckets[bucket_of(t, n_buckets)] += 1.0
    return HashedQuery(buckets=buckets, query_id=query_id)


def _counts(x: HashedQuery | np.ndarray | Sequence[float]) -> np.ndarray:
    if isinstance(x, HashedQuery):
        return x.buckets
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("count vectors must be non-negative")
    return arr


def bray_curtis(a, b) -> float:
    """sum |a_i - b_i| / sum (a_i + b_i); defined only when some count is positive."""
    va, vb = _counts(a), _counts(b)
    if va.shape != vb.shape:
        raise ValueError(f"shape mismatch: {va.shape} vs {vb.shape}")
    denom = float(np.sum(va + vb))
    if denom == 0.0:
        raise ValueError("Bray-Curtis undefined for two all-zero vectors")
    return float(np.sum(np.abs(va - vb)) / denom)


class TrigramHashStore:
    """Immutable retrieval index of hashed queries."""

    def __init__(self, queries: Sequence[Query], ids: Sequence[int] | None = None,
                 n_buckets: int = HASH_DIM) -> None:
        if ids is None:
            ids = range(len(queries))
        self.ids = np.asarray(list(ids), dtype=np.int64)
        if self.ids.size != len(queries):
            raise ValueError("ids and queries must have equal length")
        self.n_buckets = n_buckets
        self.matrix = np.zeros((len(queries), n_buckets), dtype=np.float64)
        for row, q in enumerate(queries):
            self.matrix[row] = hash_query(q, int(self.ids[row]), n_buckets).buckets
        self._id_set = set(int(i) for i in self.ids)

    def __len__(self) -> int:
        return self.ids.size

    def __contains__(self, query_id: int) -> bool:
        return int(query_id) in self._id_set

    def distances(self, probe: HashedQuery | Query) -> np.ndarray:
        if isinstance(probe, Query):
            probe = hash_query(probe, n_buckets=self.n_buckets)
        pv = probe.buckets
        if pv.shape[0] != self.n_buckets:
            raise ValueError("probe bucket width does not match store")
        num = np.abs(self.matrix - pv).sum(axis=1)
        den = (self.matrix + pv).sum(axis=1)
        if np.any(den == 0.0):
            raise ValueError("Bray-Curtis undefined: all-zero probe against all-zero row")
        return num / den

    def rank(self, probe: HashedQuery | Query, exclude_id: int | None = None) -> np.ndarray:
        """All store ids ordered by (distance, id), optionally dropping one id."""
        dist = self.distances(probe)
        order = np.lexsort((self.ids, dist))
        ranked = self.ids[order]
        if exclude_id is not None:
            ranked = ranked[ranked != exclude_id]
        return ranked


def knn(store: TrigramHashStore, probe: HashedQuery | Query, k: int) -> list[int]:
    """ids of the k nearest stored queries; ties broken by ascending id."""
    if len(store) == 0:
        raise ValueError("store is empty")
    if k > len(store):
        raise ValueError(f"k={k} exceeds store size {len(store)}")
    return [int(i) for i in store.rank(probe)[:k]]
