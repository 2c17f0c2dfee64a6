"""Similarity-aware layer kernels.

Every kernel clusters the rows of its matmul input with an `LshHasher`,
multiplies only the centroids and scatters the products back to the member
rows.  Costs are counted in multiply-accumulates (MACs); the hashing dot
products are charged to the reuse side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lsh import ClusterAssignment, LshHasher, assign, cluster_rows, hashing_macs
from .tensor_core import ConvShape, ShapeError, im2col, matmul_exact, matmul_macs


@dataclass
class ReuseStats:
    macs_exact: int = 0
    macs_reuse: int = 0
    n_rows: int = 0        # rows that went through clustering
    n_clusters: int = 0
    recon_mse: float = 0.0
    n_out: int = 0         # output elements behind recon_mse, used as its weight
    parts: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def sigma(self) -> float:
        return self.n_rows / self.n_clusters if self.n_clusters else 1.0

    @property
    def reduction_pct(self) -> float:
        if self.macs_exact == 0:
            return 0.0
        return (1.0 - self.macs_reuse / self.macs_exact) * 100.0

    @property
    def speedup(self) -> float:
        return self.macs_exact / self.macs_reuse if self.macs_reuse else float("inf")

    def __add__(self, other: "ReuseStats") -> "ReuseStats":
        n_out = self.n_out + other.n_out
        mse = (
            (self.recon_mse * self.n_out + other.recon_mse * other.n_out) / n_out
            if n_out else 0.0
        )
        return ReuseStats(
            self.macs_exact + other.macs_exact,
            self.macs_reuse + other.macs_reuse,
            self.n_rows + other.n_rows,
            self.n_clusters + other.n_clusters,
            mse,
            n_out,
        )

    def to_dict(self) -> dict:
        return {
            "macs_exact": self.macs_exact,
            "macs_reuse": self.macs_reuse,
            "n_rows": self.n_rows,
            "n_clusters": self.n_clusters,
            "sigma": self.sigma,
            "recon_mse": self.recon_mse,
            "reduction_pct": self.reduction_pct,
        }


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d)) if d.size else 0.0


def centroid_matmul(a: ClusterAssignment, w: np.ndarray) -> np.ndarray:
    """Multiply the centroids by `w` and scatter rows back to cluster members."""
    return matmul_exact(a.centroids, w)[a.labels]


def reuse_matmul(x, w, h: LshHasher, *, labels=None, with_mse: bool = True):
    """Approximate `x @ w` through LSH centroids.

    `labels` replaces the hashing step with a stored assignment (the hashing
    cost is still charged, it was paid when the labels were computed).
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    a = cluster_rows(h, x) if labels is None else assign(x, labels)
    y = centroid_matmul(a, w)
    n, k = x.shape
    m = w.shape[1]
    stats = ReuseStats(
        macs_exact=matmul_macs(n, k, m),
        macs_reuse=matmul_macs(a.n_clusters, k, m) + hashing_macs(h, n),
        n_rows=n,
        n_clusters=a.n_clusters,
        n_out=y.size,
    )
    if with_mse:
        stats.recon_mse = _mse(y, matmul_exact(x, w))
    return y, stats


def reuse_conv(x, filters, shape: ConvShape, h: LshHasher, *, with_mse: bool = True):
    filters = np.asarray(filters)
    if filters.shape != (shape.patch_len, shape.n_filters):
        raise ShapeError(
            f"filter matrix {filters.shape} != {(shape.patch_len, shape.n_filters)}"
        )
    cols = im2col(x, shape)
    y, stats = reuse_matmul(cols, filters, h, with_mse=with_mse)
    return y.reshape(shape.out_h, shape.out_w, shape.n_filters), stats


# -- attention ----------------------------------------------------------------

@dataclass
class AttentionWeights:
    wq: list          # per head, d_model x d_k
    wk: list
    wv: list
    wo: np.ndarray    # H*d_k x d_model
    w1: np.ndarray    # d_model x d_ff
    w2: np.ndarray    # d_ff x d_model

    def __post_init__(self):
        if not (len(self.wq) == len(self.wk) == len(self.wv) >= 1):
            raise ShapeError("need the same positive number of Q, K and V heads")
        d, dk = np.shape(self.wq[0])
        for m in (*self.wq, *self.wk, *self.wv):
            if np.shape(m) != (d, dk):
                raise ShapeError("all head projections must share one shape")
        if self.n_heads * dk != d:
            raise ShapeError(f"{self.n_heads} heads x d_k={dk} != d_model={d}")
        if np.shape(self.wo) != (d, d):
            raise ShapeError(f"W_O must be {(d, d)}, got {np.shape(self.wo)}")
        if np.shape(self.w1)[0] != d or np.shape(self.w2) != (np.shape(self.w1)[1], d):
            raise ShapeError("MLP weights do not match d_model")

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    @property
    def d_model(self) -> int:
        return int(np.shape(self.wq[0])[0])

    @property
    def d_k(self) -> int:
        return int(np.shape(self.wq[0])[1])

    @property
    def d_ff(self) -> int:
        return int(np.shape(self.w1)[1])

    @classmethod
    def random(cls, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator,
               scale: float = 1.0) -> "AttentionWeights":
        dk = d_model // n_heads
        s = scale / math.sqrt(d_model)
        def g(*shape):
            return rng.standard_normal(shape) * s
        return cls(
            [g(d_model, dk) for _ in range(n_heads)],
            [g(d_model, dk) for _ in range(n_heads)],
            [g(d_model, dk) for _ in range(n_heads)],
            g(d_model, d_model), g(d_model, d_ff), g(d_ff, d_model),
        )


def attention_macs(n_tokens: int, w: AttentionWeights) -> int:
    n, d, dk, ff = n_tokens, w.d_model, w.d_k, w.d_ff
    per_head = 3 * n * d * dk + 2 * n * n * dk
    return w.n_heads * per_head + n * d * d + 2 * n * d * ff


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def exact_attention(x, w: AttentionWeights) -> np.ndarray:
    """Z = MHSA(x) + x; Y = relu(Z W1) W2 + Z.  The reference for `reuse_attention`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.d_model:
        raise ShapeError(f"tokens {x.shape} do not match d_model={w.d_model}")
    heads = []
    for wq, wk, wv in zip(w.wq, w.wk, w.wv):
        q, k, v = x @ wq, x @ wk, x @ wv
        heads.append(_softmax_rows(q @ k.T / math.sqrt(w.d_k)) @ v)
    z = np.concatenate(heads, axis=1) @ w.wo + x
    return np.maximum(z @ w.w1, 0.0) @ w.w2 + z


def reuse_attention(x, w: AttentionWeights, h_qkv: LshHasher | None, h_mlp: LshHasher | None,
                    *, weight_by_count: bool = False, with_mse: bool = True):
    """MHSA + MLP block with per-head Q and joint [K|V] clustering and MLP-input clustering.

    Either hasher may be None to run that part exactly.  With
    `weight_by_count` each key centroid enters the softmax with its member
    count as multiplicity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.d_model:
        raise ShapeError(f"tokens {x.shape} do not match d_model={w.d_model}")
    n, d, dk, ff = x.shape[0], w.d_model, w.d_k, w.d_ff
    stats = ReuseStats(macs_exact=attention_macs(n, w))
    macs = w.n_heads * 3 * n * d * dk + n * d * d
    heads = []
    for i, (wq, wk, wv) in enumerate(zip(w.wq, w.wk, w.wv)):
        q, k, v = x @ wq, x @ wk, x @ wv
        if h_qkv is None:
            heads.append(_softmax_rows(q @ k.T / math.sqrt(dk)) @ v)
            macs += 2 * n * n * dk
            continue
        qa = cluster_rows(h_qkv, q)
        kva = cluster_rows(h_qkv, np.concatenate([k, v], axis=1))
        kc, vc = kva.centroids[:, :dk], kva.centroids[:, dk:]
        scores = qa.centroids @ kc.T / math.sqrt(dk)
        if weight_by_count:
            scores = scores + np.log(kva.counts)[None, :]
        heads.append((_softmax_rows(scores) @ vc)[qa.labels])
        macs += 2 * hashing_macs(h_qkv, n) + 2 * qa.n_clusters * kva.n_clusters * dk
        for name, a in (("q", qa), ("kv", kva)):
            part = ReuseStats(n_rows=a.n_rows, n_clusters=a.n_clusters)
            stats.parts[f"head{i}.{name}"] = part
            stats.n_rows += a.n_rows
            stats.n_clusters += a.n_clusters
    z = np.concatenate(heads, axis=1) @ w.wo + x
    if h_mlp is None:
        t = np.maximum(z @ w.w1, 0.0) @ w.w2
        macs += 2 * n * d * ff
    else:
        za = cluster_rows(h_mlp, z)
        t = (np.maximum(za.centroids @ w.w1, 0.0) @ w.w2)[za.labels]
        macs += hashing_macs(h_mlp, n) + 2 * za.n_clusters * d * ff
        stats.parts["mlp"] = ReuseStats(n_rows=za.n_rows, n_clusters=za.n_clusters)
        stats.n_rows += za.n_rows
        stats.n_clusters += za.n_clusters
    y = t + z
    stats.macs_reuse = macs
    stats.n_out = y.size
    if with_mse:
        stats.recon_mse = _mse(y, exact_attention(x, w))
    return y, stats


# -- 8-bit quantization ---------------------------------------------------------

def quantize_8bit(m):
    """Symmetric per-tensor quantization to int8 codes in [-127, 127]."""
    m = np.asarray(m, dtype=np.float64)
    peak = float(np.max(np.abs(m))) if m.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(m / scale), -127, 127).astype(np.int8)
    return q, scale


def dequantize(q, scale: float, dtype=np.float32) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) * scale).astype(dtype)


def fake_quantize(m) -> np.ndarray:
    """Round-trip through the 8-bit grid, keeping the caller's dtype."""
    m = np.asarray(m)
    q, s = quantize_8bit(m)
    return dequantize(q, s, dtype=m.dtype if m.dtype in (np.float32, np.float64) else np.float64)


def reuse_matmul_quantized(x, w, h: LshHasher, *, with_mse: bool = True):
    """Cluster the 8-bit-grid version of `x`, multiply its centroids in real arithmetic.

    recon_mse is measured against the unquantized exact product.
    """
    x = np.asarray(x)
    y, stats = reuse_matmul(fake_quantize(x), w, h, with_mse=False)
    if with_mse:
        stats.recon_mse = _mse(y, matmul_exact(x, w))
    return y, stats


__all__ = [
    "AttentionWeights", "ReuseStats", "attention_macs", "centroid_matmul", "dequantize",
    "exact_attention", "fake_quantize", "quantize_8bit", "reuse_attention", "reuse_conv",
    "reuse_matmul", "reuse_matmul_quantized",
]
