"""KL-divergence similarity regularizers.

Feature maps are flattened, average-pooled to a common length P and turned
into distributions with a softmax before any divergence is taken.  All
gradients are analytic and returned with respect to the raw flattened maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ShapeError, pool_matrix, softmax_normalize

KL_EPS = 1e-8


class ConfigError(ValueError):
    """Layer sets or settings do not line up."""


@dataclass
class FeatureMapSet:
    """One flattened output map per instrumented layer, all from frame `t`."""

    maps: list
    t: int = 0

    def __post_init__(self):
        self.maps = [np.asarray(m, dtype=np.float64).ravel() for m in self.maps]

    def __len__(self):
        return len(self.maps)


@dataclass
class RunningMeans:
    """Per-layer mean distributions.

    With `momentum=None` the means are exact running averages over every
    update seen so far (`count` tracks how many).
    """

    means: list
    momentum: float | None = 0.99
    count: int = 0

    def __post_init__(self):
        if self.momentum is not None and not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")

    @classmethod
    def uniform(cls, n_layers: int, pool_len: int, momentum: float | None = 0.99):
        return cls([np.full(pool_len, 1.0 / pool_len) for _ in range(n_layers)], momentum)


@dataclass
class RegConfig:
    lam: float = 0.001
    lam_t: float = 0.0
    pairing: str = "same-layer"    # or "cross-layer"
    pair_weights: np.ndarray | None = field(default=None, repr=False)
    pool_len: int = 64
    window: int = 2

    def __post_init__(self):
        if self.lam < 0 or self.lam_t < 0:
            raise ConfigError("regularization strengths must be >= 0")
        if self.pairing not in ("same-layer", "cross-layer"):
            raise ConfigError(f"unknown pairing {self.pairing!r}")
        if self.pool_len < 1 or self.window < 1:
            raise ConfigError("pool_len and window must be >= 1")
        if self.pair_weights is not None:
            self.pair_weights = np.asarray(self.pair_weights, dtype=np.float64)
            if np.any(self.pair_weights < 0):
                raise ConfigError("pair weights must be >= 0")

    def pair_weight(self, i: int, j: int) -> float:
        if self.pair_weights is None:
            return self.lam_t
        return float(self.pair_weights[i, j])

    def pairs(self, n_layers: int) -> list[tuple[int, int]]:
        if self.pairing == "same-layer":
            return [(i, i) for i in range(n_layers)]
        return [(i, j) for i in range(n_layers - 1) for j in range(i + 1, n_layers)]

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "lam_t": self.lam_t,
            "pairing": self.pairing,
            "pair_weights": None if self.pair_weights is None else self.pair_weights.tolist(),
            "pool_len": self.pool_len,
            "window": self.window,
        }


def _check_pair(p, q):
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ShapeError(f"distribution lengths differ: {p.size} vs {q.size}")
    return p, q


def kl_divergence(p, q) -> float:
    """Smoothed D_KL(p || q) = sum p ln((p + eps) / (q + eps))."""
    p, q = _check_pair(p, q)
    # The smoothing can dip a hair below zero for p ~= q; the divergence cannot.
    return max(float(np.sum(p * np.log((p + KL_EPS) / (q + KL_EPS)))), 0.0)


def kl_grads(p, q):
    """Partial derivatives of the smoothed divergence w.r.t. p and q."""
    p, q = _check_pair(p, q)
    dp = np.log((p + KL_EPS) / (q + KL_EPS)) + p / (p + KL_EPS)
    dq = -p / (q + KL_EPS)
    return dp, dq


def prepare_distribution(f, pool_len: int) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64).ravel()
    return softmax_normalize(pool_matrix(f.size, pool_len) @ f)


def prepare_backward(f, pool_len: int, grad_p) -> np.ndarray:
    """Chain a gradient w.r.t. the prepared distribution back onto the raw map."""
    f = np.asarray(f, dtype=np.float64).ravel()
    pm = pool_matrix(f.size, pool_len)
    p = softmax_normalize(pm @ f)
    g_logits = p * (grad_p - np.dot(grad_p, p))
    return pm.T @ g_logits


def _check_layers(n_maps: int, n_means: int):
    if n_maps != n_means:
        raise ConfigError(f"{n_maps} feature maps but {n_means} running means")


def intra_frame_reg(fms: FeatureMapSet, means: RunningMeans, cfg: RegConfig):
    """r = sum_i D_KL(prep(f_i) || mu_i); running means are held constant."""
    _check_layers(len(fms), len(means.means))
    r = 0.0
    grads = []
    for f, mu in zip(fms.maps, means.means):
        if np.size(mu) != cfg.pool_len:
            raise ConfigError(f"running mean length {np.size(mu)} != pool_len {cfg.pool_len}")
        p = prepare_distribution(f, cfg.pool_len)
        r += kl_divergence(p, mu)
        dp, _ = kl_grads(p, mu)
        grads.append(prepare_backward(f, cfg.pool_len, dp))
    return r, grads


def inter_frame_reg(fms_t: FeatureMapSet, fms_next: FeatureMapSet, cfg: RegConfig):
    """Weighted divergences between frame t and frame t+1 feature maps.

    Returns (r_t, grads w.r.t. frame t maps, grads w.r.t. frame t+1 maps).
    """
    if fms_next.t != fms_t.t + 1:
        raise ValueError(f"frames must be consecutive, got t={fms_t.t} and t={fms_next.t}")
    _check_layers(len(fms_t), len(fms_next))
    n = len(fms_t)
    g_t = [np.zeros_like(f) for f in fms_t.maps]
    g_n = [np.zeros_like(f) for f in fms_next.maps]
    r = 0.0
    prep_t = [None] * n
    prep_n = [None] * n
    for i, j in cfg.pairs(n):
        lam = cfg.pair_weight(i, j)
        if lam == 0.0:
            continue
        if prep_t[i] is None:
            prep_t[i] = prepare_distribution(fms_t.maps[i], cfg.pool_len)
        if prep_n[j] is None:
            prep_n[j] = prepare_distribution(fms_next.maps[j], cfg.pool_len)
        p, q = prep_t[i], prep_n[j]
        r += lam * kl_divergence(p, q)
        dp, dq = kl_grads(p, q)
        g_t[i] += lam * prepare_backward(fms_t.maps[i], cfg.pool_len, dp)
        g_n[j] += lam * prepare_backward(fms_next.maps[j], cfg.pool_len, dq)
    return r, g_t, g_n


def update_running_mean(means: RunningMeans, fms: FeatureMapSet, pool_len: int | None = None) -> RunningMeans:
    _check_layers(len(fms), len(means.means))
    out = []
    for f, mu in zip(fms.maps, means.means):
        mu = np.asarray(mu, dtype=np.float64)
        p = prepare_distribution(f, pool_len or mu.size)
        if means.momentum is None:
            out.append((mu * means.count + p) / (means.count + 1))
        else:
            m = means.momentum
            out.append(m * mu + (1.0 - m) * p)
    return RunningMeans(out, means.momentum, means.count + 1)
