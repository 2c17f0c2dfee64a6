"""Synthetic correlated frame streams and cosine-similarity analyzers."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor_core import REAL, ShapeError, SimilarityError

STREAM_MAGIC = b"RFS1"


@dataclass
class FrameStream:
    frames: np.ndarray          # (n_frames, H, W, C) float32
    labels: np.ndarray | None   # (n_frames,) int64
    rho: float = 0.0
    n_classes: int = 0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=REAL)
        if self.frames.ndim != 4:
            raise ShapeError(f"frames must be (n, H, W, C), got {self.frames.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n_frames,):
                raise ShapeError(f"{self.labels.size} labels for {self.n_frames} frames")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def subset(self, index) -> "FrameStream":
        labels = None if self.labels is None else self.labels[index]
        return FrameStream(self.frames[index], labels, self.rho, self.n_classes)


def class_patterns(n_classes: int, shape, amplitude: float) -> np.ndarray:
    """Per-class additive mean patterns: a constant offset per class, evenly spaced
    over [-amplitude, amplitude]."""
    if n_classes <= 1:
        return np.zeros((max(n_classes, 1), *shape))
    offsets = amplitude * np.linspace(-1.0, 1.0, n_classes)
    return offsets[:, None, None, None] * np.ones((n_classes, *shape))


def segment_labels(n_frames: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant labels: every class owns two of 2k equal-ish segments."""
    if n_classes <= 1:
        return np.zeros(n_frames, dtype=np.int64)
    order = np.concatenate([rng.permutation(n_classes), rng.permutation(n_classes)])
    n_seg = min(order.size, n_frames)
    labels = np.empty(n_frames, dtype=np.int64)
    for cls, idx in zip(order[:n_seg], np.array_split(np.arange(n_frames), n_seg)):
        labels[idx] = cls
    return labels


def gen_stream(n_frames: int, shape, rho: float, n_classes: int, seed: int,
               amplitude: float = 1.0, brightness: float = 0.0) -> FrameStream:
    """AR(1) pixel noise with unit marginals plus a per-segment class pattern.

    `brightness` is a constant level added to every pixel of every frame,
    standing in for the non-negative intensities of real footage.  It leaves
    the noise process and the class contrast untouched.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if n_frames < 1:
        raise ValueError("need at least one frame")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    labels = segment_labels(n_frames, n_classes, rng)
    patterns = class_patterns(n_classes, shape, amplitude)
    innov = np.sqrt(1.0 - rho * rho)
    noise = rng.standard_normal(shape)
    frames = np.empty((n_frames, *shape), dtype=REAL)
    for t in range(n_frames):
        if t:
            noise = rho * noise + innov * rng.standard_normal(shape)
        frames[t] = noise + patterns[labels[t]] + brightness
    return FrameStream(frames, labels, float(rho), int(n_classes))


# -- analysis -----------------------------------------------------------------

def _unit_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise SimilarityError("cosine similarity is undefined for an all-zero frame")
    return rows / norms[:, None]


def analyze_similarity(frames) -> np.ndarray:
    """Pairwise cosine similarity of flattened frames (or rows of a matrix)."""
    if isinstance(frames, FrameStream):
        frames = frames.frames
    frames = np.asarray(frames)
    rows = frames.reshape(frames.shape[0], -1)
    if rows.shape[0] < 2:
        raise ValueError("need at least two frames")
    u = _unit_rows(rows)
    s = np.clip(u @ u.T, -1.0, 1.0)
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return s


def lag_similarity(sim: np.ndarray, lag: int) -> float:
    """Mean similarity of frame pairs exactly `lag` apart."""
    return float(np.mean(np.diagonal(sim, offset=lag)))


def mean_row_similarity(rows: np.ndarray) -> float:
    """Mean pairwise cosine among the non-zero rows of a matrix."""
    rows = np.asarray(rows, dtype=np.float64)
    rows = rows[np.linalg.norm(rows, axis=1) > 0]
    n = rows.shape[0]
    if n < 2:
        return 1.0
    u = rows / np.linalg.norm(rows, axis=1)[:, None]
    total = u.sum(axis=0)
    return float((total @ total - n) / (n * (n - 1)))


def layer_similarity_profile(model, stream: FrameStream, max_frames: int | None = None) -> dict:
    """Mean intra-input row cosine per reuse-capable layer, averaged over frames.

    Uses the exact forward pass.  All-zero rows (dead ReLU patches) carry no
    direction and are left out.  The classifier layer, which sees a single
    row per frame, is measured across the frames of the stream instead.
    """
    from .models import layer_inputs

    frames = stream.frames if max_frames is None else stream.frames[:max_frames]
    per_frame = layer_inputs(model, frames)
    out = {}
    for name, mats in per_frame.items():
        if name == "fc":
            out[name] = mean_row_similarity(np.concatenate(mats, axis=0))
        else:
            out[name] = float(np.mean([mean_row_similarity(m) for m in mats]))
    return out


# -- RFS1 files ---------------------------------------------------------------

def save_stream(path, stream: FrameStream) -> None:
    n, h, w, c = stream.frames.shape
    has_labels = stream.labels is not None
    with open(path, "wb") as fh:
        fh.write(STREAM_MAGIC)
        fh.write(struct.pack("<QQQQQdQ", n, h, w, c, stream.n_classes, stream.rho, int(has_labels)))
        if has_labels:
            fh.write(stream.labels.astype("<u8").tobytes())
        fh.write(stream.frames.astype("<f4").tobytes())


def load_stream(path) -> FrameStream:
    with open(path, "rb") as fh:
        if fh.read(4) != STREAM_MAGIC:
            raise ValueError(f"{path}: not an RFS1 stream file")
        header = fh.read(56)
        if len(header) != 56:
            raise ValueError(f"{path}: truncated header")
        n, h, w, c, k, rho, has_labels = struct.unpack("<QQQQQdQ", header)
        labels = None
        if has_labels:
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated labels")
            labels = np.frombuffer(raw, dtype="<u8").astype(np.int64)
        nbytes = 4 * n * h * w * c
        raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise ValueError(f"{path}: truncated frame data")
        frames = np.frombuffer(raw, dtype="<f4").reshape(n, h, w, c)
    return FrameStream(frames, labels, rho, int(k))
