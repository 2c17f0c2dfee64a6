"""Dense matrices, exact reference kernels and small numeric helpers.

Matrices are plain row-major numpy arrays.  Stored data (files, streams) is
float32; kernels accumulate in float64 and hand back the input precision, so a
float32 caller gets float32 results and the training code, which runs in
float64, keeps its precision.
"""
from __future__ import annotations

import functools
import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

REAL = np.float32
MATRIX_MAGIC = b"RFM1"


class ShapeError(ValueError):
    """Operand dimensions do not fit together."""


class SimilarityError(ValueError):
    """Cosine similarity of a zero vector was requested."""


def dense(data, dtype=REAL) -> np.ndarray:
    """Validate and return `data` as a contiguous 2-D array of finite reals."""
    m = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return m


def _out_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


@dataclass(frozen=True)
class ConvShape:
    in_h: int
    in_w: int
    in_c: int
    k_h: int
    k_w: int
    n_filters: int

    def __post_init__(self):
        dims = (self.in_h, self.in_w, self.in_c, self.k_h, self.k_w, self.n_filters)
        if min(dims) < 1:
            raise ShapeError(f"all conv dimensions must be >= 1, got {dims}")
        if self.k_h > self.in_h or self.k_w > self.in_w:
            raise ShapeError(
                f"kernel {self.k_h}x{self.k_w} larger than input {self.in_h}x{self.in_w}"
            )

    @property
    def out_h(self) -> int:
        return self.in_h - self.k_h + 1

    @property
    def out_w(self) -> int:
        return self.in_w - self.k_w + 1

    @property
    def patch_len(self) -> int:
        return self.k_h * self.k_w * self.in_c

    @property
    def n_patches(self) -> int:
        return self.out_h * self.out_w


def matmul_macs(n_rows: int, inner: int, n_cols: int) -> int:
    return int(n_rows) * int(inner) * int(n_cols)


def matmul_exact(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Reference product `x @ w`; MAC count is `matmul_macs(*x.shape, w.shape[1])`."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    out = np.dot(x.astype(np.float64, copy=False), w.astype(np.float64, copy=False))
    return out.astype(_out_dtype(x, w), copy=False)


def im2col(x: np.ndarray, shape: ConvShape) -> np.ndarray:
    """Lower a H x W x C map to one row per stride-1 patch.

    Rows are ordered by output position (i, j) row-major; within a row the
    patch is flattened in (kernel row, kernel col, channel) order.
    """
    x = np.asarray(x)
    if x.shape != (shape.in_h, shape.in_w, shape.in_c):
        raise ShapeError(
            f"feature map {x.shape} does not match {(shape.in_h, shape.in_w, shape.in_c)}"
        )
    win = np.lib.stride_tricks.sliding_window_view(x, (shape.k_h, shape.k_w), axis=(0, 1))
    # win: (out_h, out_w, C, k_h, k_w) -> (out_h, out_w, k_h, k_w, C)
    win = win.transpose(0, 1, 3, 4, 2)
    return np.ascontiguousarray(win.reshape(shape.n_patches, shape.patch_len))


def im2col_batch(x: np.ndarray, shape: ConvShape) -> np.ndarray:
    """im2col over a (B, H, W, C) batch, rows stacked frame after frame."""
    if x.ndim != 4 or x.shape[1:] != (shape.in_h, shape.in_w, shape.in_c):
        raise ShapeError(f"batch {x.shape} does not match {shape}")
    win = np.lib.stride_tricks.sliding_window_view(x, (shape.k_h, shape.k_w), axis=(1, 2))
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win.reshape(x.shape[0] * shape.n_patches, shape.patch_len))


def col2im_batch(cols: np.ndarray, shape: ConvShape, batch: int) -> np.ndarray:
    """Adjoint of `im2col_batch`: scatter-add patch rows back onto the maps."""
    out = np.zeros((batch, shape.in_h, shape.in_w, shape.in_c), dtype=cols.dtype)
    c = cols.reshape(batch, shape.out_h, shape.out_w, shape.k_h, shape.k_w, shape.in_c)
    for r in range(shape.k_h):
        for s in range(shape.k_w):
            out[:, r:r + shape.out_h, s:s + shape.out_w, :] += c[:, :, :, r, s, :]
    return out


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise SimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def softmax_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - np.max(v))
    return e / e.sum()


def pool_bounds(n: int, p: int) -> list[tuple[int, int]]:
    """Bucket [start, end) pairs of the adaptive 1-D pooling partition."""
    if p < 1:
        raise ValueError("pooled length must be >= 1")
    if n < 1:
        raise ValueError("cannot pool an empty vector")
    return [((k * n) // p, -(-((k + 1) * n) // p)) for k in range(p)]


@functools.lru_cache(maxsize=64)
def pool_matrix(n: int, p: int) -> np.ndarray:
    """(p, n) averaging matrix with `pool_matrix(n, p) @ v == adaptive_pool_1d(v, p)`.

    Cached and read-only.
    """
    m = np.zeros((p, n))
    for k, (a, b) in enumerate(pool_bounds(n, p)):
        m[k, a:b] = 1.0 / (b - a)
    m.setflags(write=False)
    return m


def adaptive_pool_1d(v, p: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    bounds = pool_bounds(v.size, p)
    if p == v.size:
        return v.copy()
    return np.array([v[a:b].mean() for a, b in bounds])


# -- RFM1 binary matrices -----------------------------------------------------

def write_matrix(fh: BinaryIO, m: np.ndarray) -> None:
    m = dense(m)
    fh.write(MATRIX_MAGIC)
    fh.write(struct.pack("<QQ", *m.shape))
    fh.write(m.astype("<f4").tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MATRIX_MAGIC:
        raise ValueError(f"bad matrix magic {magic!r}")
    header = fh.read(16)
    if len(header) != 16:
        raise ValueError("truncated matrix header")
    rows, cols = struct.unpack("<QQ", header)
    nbytes = rows * cols * 4
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise ValueError("truncated matrix data")
    return np.frombuffer(raw, dtype="<f4").astype(REAL).reshape(rows, cols)


def save_matrix(path, m: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, m)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_matrix(fh)


def matrix_bytes(m: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_matrix(buf, m)
    return buf.getvalue()
