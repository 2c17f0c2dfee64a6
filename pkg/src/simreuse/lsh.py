"""Sign-random-projection LSH and equal-code clustering of matrix rows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import REAL, ShapeError

MAX_HASH_BITS = 64


@dataclass(frozen=True)
class LshHasher:
    """Frozen projection table.  Only (input_dim, hash_size, seed) is ever
    persisted; the projections are regenerated from a PCG64 stream."""

    input_dim: int
    hash_size: int
    seed: int
    projections: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.hash_size <= MAX_HASH_BITS:
            raise ValueError(f"hash_size must be in [1, 64], got {self.hash_size}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        rng = np.random.Generator(np.random.PCG64(self.seed))
        proj = rng.standard_normal((self.hash_size, self.input_dim)).astype(REAL)
        proj.setflags(write=False)
        object.__setattr__(self, "projections", proj)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hash_size": self.hash_size, "seed": self.seed}


def new_hasher(input_dim: int, hash_size: int, seed: int) -> LshHasher:
    return LshHasher(int(input_dim), int(hash_size), int(seed))


def subsample_indices(row_len: int, input_dim: int) -> np.ndarray:
    if row_len < input_dim:
        raise ShapeError(f"row of length {row_len} is shorter than input_dim {input_dim}")
    return (np.arange(input_dim) * row_len) // input_dim


def hash_rows(h: LshHasher, x: np.ndarray) -> np.ndarray:
    """One uint64 code per row; bit b is set iff the b-th projection dot is >= 0."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    sub = x[:, subsample_indices(x.shape[1], h.input_dim)].astype(np.float64)
    bits = (sub @ h.projections.astype(np.float64).T) >= 0.0
    weights = np.left_shift(np.uint64(1), np.arange(h.hash_size, dtype=np.uint64))
    return (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)


def hash_row(h: LshHasher, row) -> np.ndarray:
    """Code of a single row as a length-`hash_size` 0/1 vector (bit b at index b)."""
    row = np.asarray(row).ravel()
    code = int(hash_rows(h, row[None, :])[0])
    return np.array([(code >> b) & 1 for b in range(h.hash_size)], dtype=np.uint8)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray      # cluster id per row
    centroids: np.ndarray   # (n_clusters, row_len)
    counts: np.ndarray      # members per cluster

    @property
    def n_rows(self) -> int:
        return int(self.labels.size)

    @property
    def n_clusters(self) -> int:
        return int(self.counts.size)

    @property
    def sigma(self) -> float:
        return self.n_rows / self.n_clusters


def labels_from_codes(codes: np.ndarray) -> np.ndarray:
    """Dense ids numbered by first occurrence of each distinct code."""
    _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank[inverse.ravel()].astype(np.int64)


def centroids_for(x: np.ndarray, labels: np.ndarray, n_clusters: int | None = None):
    """Member means (float64 accumulation) and member counts.

    Means are taken around each cluster's first member, so a cluster of
    identical rows reproduces that row bit for bit.
    """
    x = np.asarray(x)
    k = int(labels.max()) + 1 if n_clusters is None else n_clusters
    counts = np.bincount(labels, minlength=k)
    x64 = x.astype(np.float64, copy=False)
    anchor = np.zeros((k, x.shape[1]))
    present, first = np.unique(labels, return_index=True)
    anchor[present] = x64[first]
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x64 - anchor[labels])
    cent = anchor + sums / counts[:, None]
    return cent.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float64), counts


def assign(x: np.ndarray, labels: np.ndarray) -> ClusterAssignment:
    """Build an assignment for `x` from precomputed (e.g. epoch-frozen) labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (np.asarray(x).shape[0],):
        raise ShapeError(f"{labels.size} labels for {np.asarray(x).shape[0]} rows")
    cent, counts = centroids_for(x, labels)
    return ClusterAssignment(labels, cent, counts)


def cluster_rows(h: LshHasher, x: np.ndarray) -> ClusterAssignment:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"need a non-empty 2-D matrix, got shape {x.shape}")
    return assign(x, labels_from_codes(hash_rows(h, x)))


def hashing_macs(h: LshHasher, n_rows: int) -> int:
    return int(n_rows) * h.hash_size * h.input_dim
