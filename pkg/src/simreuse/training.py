"""Pre-training, similarity-aware fine-tuning and evaluation of the toy models."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import ToyModel, backward, forward
from .regularizers import (
    FeatureMapSet,
    RegConfig,
    RunningMeans,
    inter_frame_reg,
    intra_frame_reg,
    prepare_distribution,
)
from .reuse import ReuseStats
from .lsh import new_hasher
from .streams import FrameStream
from .tensor_core import read_matrix, write_matrix

CHECKPOINT_MAGIC = b"RFCK1"


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    reuse_in_training: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class EpochReport:
    epoch: int
    task_loss: float
    r: float
    r_t: float
    sigma: dict = field(default_factory=dict)
    recon_mse: dict = field(default_factory=dict)
    metric: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    idx = np.arange(labels.size)
    d = np.exp(logp)
    d[idx, labels] -= 1.0
    return float(-logp[idx, labels].mean()), d / labels.size


def batch_slices(n: int, batch_size: int) -> list[slice]:
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _reg_active(reg: RegConfig | None) -> bool:
    return reg is not None and (reg.lam > 0 or reg.lam_t > 0 or
                                (reg.pair_weights is not None and np.any(reg.pair_weights > 0)))


def composite_loss(model: ToyModel, frames, labels, t0: int, reg: RegConfig | None,
                   means: RunningMeans | None, *, reuse: bool = False,
                   stored: dict | None = None):
    """Task loss plus regularizers for one mini-batch whose first frame is `t0`.

    total = CE + lam * mean_frames(r) + (1/B) * sum_pairs(r_t), where r_t already
    carries its pair weights.  Consecutive pairs only count when both frames sit
    in the same window of `reg.window` frames.

    Returns (total, parts, grads, forward).
    """
    fw = forward(model, frames, reuse=reuse, labels=stored)
    ce, dlogits = cross_entropy(fw.logits, labels)
    parts = {"task": ce, "r": 0.0, "r_t": 0.0}
    dfeat = None
    total = ce
    if _reg_active(reg):
        b = len(labels)
        dfeat = [np.zeros_like(f) for f in fw.features]
        fms = [FeatureMapSet([f[i] for f in fw.features], t0 + i) for i in range(b)]
        if reg.lam > 0:
            r_sum = 0.0
            for i, fm in enumerate(fms):
                r, g = intra_frame_reg(fm, means, reg)
                r_sum += r
                for layer, gl in enumerate(g):
                    dfeat[layer][i] += (reg.lam / b) * gl
            parts["r"] = r_sum / b
            total += reg.lam * parts["r"]
        rt_sum = 0.0
        n_pairs = 0
        for i in range(b - 1):
            t = t0 + i
            if t // reg.window != (t + 1) // reg.window:
                continue
            rt, g_t, g_n = inter_frame_reg(fms[i], fms[i + 1], reg)
            rt_sum += rt
            n_pairs += 1
            for layer in range(len(g_t)):
                dfeat[layer][i] += g_t[layer] / b
                dfeat[layer][i + 1] += g_n[layer] / b
        parts["r_t"] = rt_sum / n_pairs if n_pairs else 0.0
        total += rt_sum / b
    grads = backward(model, fw, dlogits, dfeat)
    return total, parts, grads, fw


def _accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _calibrate(model: ToyModel, data: FrameStream, slices, pool_len: int):
    """Reuse pass with live hashing: frozen labels per batch, stats, prepared maps."""
    stored = []
    stats = {name: ReuseStats() for name in model.reuse_layers}
    prepared = None
    for sl in slices:
        fw = forward(model, data.frames[sl], reuse=True, with_mse=True)
        stored.append(fw.labels)
        for name, st in fw.stats.items():
            stats[name] = stats[name] + st
        prep = [[prepare_distribution(f[i], pool_len) for i in range(f.shape[0])] for f in fw.features]
        if prepared is None:
            prepared = prep
        else:
            for layer, p in enumerate(prep):
                prepared[layer].extend(p)
    return stored, stats, prepared


def _fit(model: ToyModel, data: FrameStream, cfg: TrainConfig, reg: RegConfig | None,
         similarity_aware: bool):
    if data.labels is None:
        raise ValueError("training needs a labelled stream")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    slices = batch_slices(data.n_frames, cfg.batch_size)
    means = None
    reports = []
    use_reg = similarity_aware and _reg_active(reg)
    pool_len = reg.pool_len if reg is not None else 64
    for epoch in range(cfg.epochs):
        stored = [None] * len(slices)
        sigma = {name: 1.0 for name in model.reuse_layers}
        mse = {name: 0.0 for name in model.reuse_layers}
        if similarity_aware:
            labels_per_batch, cal_stats, prepared = _calibrate(model, data, slices, pool_len)
            if cfg.reuse_in_training:
                stored = labels_per_batch
            sigma = {k: st.sigma for k, st in cal_stats.items()}
            mse = {k: st.recon_mse for k, st in cal_stats.items()}
            if use_reg and means is None:
                means = RunningMeans([np.mean(p, axis=0) for p in prepared], momentum=0.99)
        reuse = similarity_aware and cfg.reuse_in_training
        loss_sum = r_sum = rt_sum = 0.0
        correct = 0
        for bi in rng.permutation(len(slices)):
            sl = slices[bi]
            frames, labels = data.frames[sl], data.labels[sl]
            total, parts, grads, fw = composite_loss(
                model, frames, labels, sl.start, reg if use_reg else None, means,
                reuse=reuse, stored=stored[bi])
            if not np.isfinite(total):
                raise TrainingError("non-finite loss", epoch)
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - cfg.lr * g
                model.params[k] = model.params[k] + velocity[k]
            n = len(labels)
            loss_sum += parts["task"] * n
            r_sum += parts["r"] * n
            rt_sum += parts["r_t"] * n
            correct += int(np.sum(np.argmax(fw.logits, axis=1) == labels))
            if use_reg:
                means = _update_means(means, fw.features, pool_len)
        for v in model.params.values():
            if not np.all(np.isfinite(v)):
                raise TrainingError("non-finite parameters", epoch)
        n = data.n_frames
        reports.append(EpochReport(epoch, loss_sum / n, r_sum / n, rt_sum / n, sigma, mse, correct / n))
    return model, reports


def _update_means(means: RunningMeans, features, pool_len: int) -> RunningMeans:
    mu = [np.asarray(m) for m in means.means]
    mom = means.momentum
    for i in range(features[0].shape[0]):
        for layer, f in enumerate(features):
            mu[layer] = mom * mu[layer] + (1.0 - mom) * prepare_distribution(f[i], pool_len)
    return RunningMeans(mu, mom, means.count + features[0].shape[0])


def pretrain(model: ToyModel, data: FrameStream, cfg: TrainConfig, reports: list | None = None) -> ToyModel:
    """Plain SGD-with-momentum training, exact kernels, no regularizers."""
    trained, reps = _fit(model, data, cfg, None, similarity_aware=False)
    if reports is not None:
        reports.extend(reps)
    return trained


def sa_train(model: ToyModel, data: FrameStream, cfg: TrainConfig, reg: RegConfig):
    """Similarity-aware fine-tuning.

    Each epoch starts with a reuse pass that freezes cluster labels per batch
    (and measures per-layer sigma and recon_mse); the epoch then trains
    through those clusters with the composite loss.
    """
    for layer in model.reuse_layers:
        if layer not in model.hashers:
            raise ValueError(f"no hasher configured for layer {layer!r}")
    return _fit(model, data, cfg, reg, similarity_aware=True)


def evaluate(model: ToyModel, data: FrameStream, use_reuse: bool, *, quantize: bool = False,
             batch_size: int = 16, with_mse: bool = False):
    """Accuracy plus summed ReuseStats (per-layer totals in `stats.parts`).

    Clustering happens on the fly per batch of `batch_size` consecutive frames.
    """
    if data.n_frames == 0:
        raise ValueError("cannot evaluate on an empty stream")
    if data.labels is None:
        raise ValueError("evaluation needs a labelled stream")
    per_layer = {name: ReuseStats() for name in model.reuse_layers}
    correct = 0
    for sl in batch_slices(data.n_frames, batch_size):
        fw = forward(model, data.frames[sl], reuse=use_reuse, quantize=quantize, with_mse=with_mse)
        correct += int(np.sum(np.argmax(fw.logits, axis=1) == data.labels[sl]))
        for name, st in fw.stats.items():
            per_layer[name] = per_layer[name] + st
    total = ReuseStats()
    for st in per_layer.values():
        total = total + st
    total.parts = per_layer
    return correct / data.n_frames, total


# -- checkpoints -----------------------------------------------------------------

def _block(fh, payload: bytes):
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_block(fh) -> bytes:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("truncated checkpoint")
    (n,) = struct.unpack("<I", raw)
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def save_checkpoint(path, model: ToyModel, extra: dict | None = None) -> None:
    """RFCK1: magic, arch tag, JSON metadata, parameter count, RFM1 matrices."""
    meta = {
        "frame_shape": list(model.frame_shape),
        "n_classes": model.n_classes,
        "params": list(model.params),
        "hashers": model.hasher_config(),
        "weight_by_count": model.weight_by_count,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _block(fh, model.arch.encode())
        _block(fh, json.dumps(meta, sort_keys=True).encode())
        fh.write(struct.pack("<I", len(model.params)))
        for v in model.params.values():
            write_matrix(fh, v)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(5) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an RFCK1 checkpoint")
        arch = _read_block(fh).decode()
        meta = json.loads(_read_block(fh))
        (n,) = struct.unpack("<I", fh.read(4))
        if n != len(meta["params"]):
            raise ValueError(f"{path}: parameter count mismatch")
        params = {name: read_matrix(fh).astype(np.float64) for name in meta["params"]}
    model = ToyModel(arch, tuple(meta["frame_shape"]), meta["n_classes"], params,
                     weight_by_count=meta.get("weight_by_count", False))
    for layer, h in meta["hashers"].items():
        model.hashers[layer] = None if h is None else new_hasher(h["input_dim"], h["hash_size"], h["seed"])
    return model, meta.get("extra", {})
