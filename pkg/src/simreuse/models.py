"""Two toy architectures with hand-written backward passes through reuse kernels.

TinyConvNet: conv3x3(8) -> relu -> conv3x3(16) -> relu -> global avg pool -> FC
TinyViT:     4x4 patch embed -> one MHSA(2 heads) + MLP block -> mean pool -> FC

Reuse-capable layers cluster the rows of their matmul input across the whole
batch, except attention, whose Q and [K|V] rows are clustered per frame and
per head.  In the backward pass cluster membership is a constant: gradients
flow through the centroid means, each member row receiving 1/|cluster| of its
centroid's gradient.

Models compute in float64; checkpoints store float32.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .lsh import ClusterAssignment, LshHasher, assign, cluster_rows, hashing_macs, new_hasher
from .reuse import AttentionWeights, ReuseStats, fake_quantize
from .tensor_core import ConvShape, ShapeError, col2im_batch, im2col_batch

ARCHS = ("tiny_conv", "tiny_vit")
REUSE_LAYERS = {
    "tiny_conv": ("conv1", "conv2", "fc"),
    "tiny_vit": ("embed", "attn", "mlp", "fc"),
}
CONV_CHANNELS = (8, 16)
VIT_PATCH = 4
VIT_D_MODEL = 16
VIT_HEADS = 2
VIT_D_FF = 32

DEFAULT_HASH_SIZE = 6
DEFAULT_INPUT_DIM = 8
HASHER_SEED_BASE = 1000


@dataclass
class ToyModel:
    arch: str
    frame_shape: tuple
    n_classes: int
    params: dict                      # ordered name -> float64 array
    hashers: dict = field(default_factory=dict)   # layer -> LshHasher | None
    weight_by_count: bool = False

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.frame_shape = tuple(int(s) for s in self.frame_shape)

    @property
    def reuse_layers(self) -> tuple:
        return REUSE_LAYERS[self.arch]

    def copy(self) -> "ToyModel":
        return copy.deepcopy(self)

    def row_len(self, layer: str) -> int:
        return layer_row_lengths(self.arch, self.frame_shape)[layer]

    def set_hasher(self, layer: str, hash_size: int, input_dim: int, seed: int | None = None):
        if layer not in self.reuse_layers:
            raise KeyError(f"{self.arch} has no reuse layer {layer!r}")
        if input_dim > self.row_len(layer):
            raise ValueError(f"input_dim {input_dim} exceeds row length of {layer}")
        if seed is None:
            seed = HASHER_SEED_BASE + self.reuse_layers.index(layer)
        self.hashers[layer] = new_hasher(input_dim, hash_size, seed)

    def hasher_config(self) -> dict:
        return {k: (None if h is None else h.to_dict()) for k, h in self.hashers.items()}


def conv_shapes(frame_shape):
    h, w, c = frame_shape
    s1 = ConvShape(h, w, c, 3, 3, CONV_CHANNELS[0])
    s2 = ConvShape(s1.out_h, s1.out_w, CONV_CHANNELS[0], 3, 3, CONV_CHANNELS[1])
    return s1, s2


def layer_row_lengths(arch: str, frame_shape) -> dict:
    if arch == "tiny_conv":
        s1, s2 = conv_shapes(frame_shape)
        return {"conv1": s1.patch_len, "conv2": s2.patch_len, "fc": CONV_CHANNELS[1]}
    c = frame_shape[2]
    return {
        "embed": VIT_PATCH * VIT_PATCH * c,
        "attn": VIT_D_MODEL // VIT_HEADS,
        "mlp": VIT_D_MODEL,
        "fc": VIT_D_MODEL,
    }


def init_model(arch: str, frame_shape, n_classes: int, seed: int,
               hash_size: int = DEFAULT_HASH_SIZE, input_dim: int = DEFAULT_INPUT_DIM) -> ToyModel:
    """He-initialised weights, zero biases, default hashers on every reuse layer."""
    rng = np.random.default_rng(seed)
    h, w, c = frame_shape

    def he(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)

    params = {}
    if arch == "tiny_conv":
        s1, s2 = conv_shapes(frame_shape)
        params["conv1.w"] = he(s1.patch_len, s1.n_filters)
        params["conv1.b"] = np.zeros((1, s1.n_filters))
        params["conv2.w"] = he(s2.patch_len, s2.n_filters)
        params["conv2.b"] = np.zeros((1, s2.n_filters))
        params["fc.w"] = he(s2.n_filters, n_classes)
        params["fc.b"] = np.zeros((1, n_classes))
    elif arch == "tiny_vit":
        if h % VIT_PATCH or w % VIT_PATCH:
            raise ShapeError(f"frame {h}x{w} is not divisible into {VIT_PATCH}x{VIT_PATCH} patches")
        d, dk = VIT_D_MODEL, VIT_D_MODEL // VIT_HEADS
        params["embed.w"] = he(VIT_PATCH * VIT_PATCH * c, d)
        params["embed.b"] = np.zeros((1, d))
        s = 1.0 / math.sqrt(d)
        for i in range(VIT_HEADS):
            for name in ("wq", "wk", "wv"):
                params[f"attn.{name}{i}"] = rng.standard_normal((d, dk)) * s
        params["attn.wo"] = rng.standard_normal((d, d)) * s
        params["mlp.w1"] = he(d, VIT_D_FF)
        params["mlp.w2"] = rng.standard_normal((VIT_D_FF, d)) * (s * 0.5)
        params["fc.w"] = he(d, n_classes)
        params["fc.b"] = np.zeros((1, n_classes))
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    model = ToyModel(arch, frame_shape, n_classes, params)
    for layer in model.reuse_layers:
        model.set_hasher(layer, hash_size, min(input_dim, model.row_len(layer)))
    return model


def attention_weights(params: dict) -> AttentionWeights:
    return AttentionWeights(
        [params[f"attn.wq{i}"] for i in range(VIT_HEADS)],
        [params[f"attn.wk{i}"] for i in range(VIT_HEADS)],
        [params[f"attn.wv{i}"] for i in range(VIT_HEADS)],
        params["attn.wo"], params["mlp.w1"], params["mlp.w2"],
    )


# -- forward machinery ----------------------------------------------------------

class _Ctx:
    """Per-pass bookkeeping: which layers cluster, stored labels, stats."""

    def __init__(self, model: ToyModel, reuse: bool, labels: dict | None,
                 quantize: bool, with_mse: bool):
        self.model = model
        self.reuse = reuse
        self.labels = labels or {}
        self.quantize = quantize
        self.with_mse = with_mse
        self.used: dict = {}
        self.stats: dict = {name: ReuseStats() for name in model.reuse_layers}

    def hasher(self, layer: str) -> LshHasher | None:
        return self.model.hashers.get(layer) if self.reuse else None

    def cluster(self, layer: str, key: str, x: np.ndarray) -> ClusterAssignment | None:
        h = self.hasher(layer)
        if h is None:
            return None
        stored = self.labels.get(key)
        a = cluster_rows(h, x) if stored is None else assign(x, stored)
        self.used[key] = a.labels
        return a

    def act(self, x: np.ndarray) -> np.ndarray:
        return fake_quantize(x) if self.quantize else x


def _segment_sum(g: np.ndarray, a: ClusterAssignment) -> np.ndarray:
    out = np.zeros((a.n_clusters, g.shape[1]))
    np.add.at(out, a.labels, g)
    return out


def _spread(gc: np.ndarray, a: ClusterAssignment) -> np.ndarray:
    """Adjoint of centroid averaging."""
    return gc[a.labels] / a.counts[a.labels, None]


def _mm(ctx: _Ctx, layer: str, x: np.ndarray, w: np.ndarray):
    """Forward of one reuse-capable matmul; returns (y, x_used, assignment)."""
    x = ctx.act(x)
    a = ctx.cluster(layer, layer, x)
    n, k = x.shape
    m = w.shape[1]
    st = ctx.stats[layer]
    st.macs_exact += n * k * m
    if a is None:
        y = x @ w
        st.macs_reuse += n * k * m
    else:
        y = (a.centroids @ w)[a.labels]
        st.macs_reuse += a.n_clusters * k * m + hashing_macs(ctx.model.hashers[layer], n)
        st.n_rows += n
        st.n_clusters += a.n_clusters
        if ctx.with_mse:
            _add_mse(st, y, x @ w)
    return y, x, a


def _add_mse(st: ReuseStats, y, ref):
    d = y - ref
    n_out = st.n_out + d.size
    st.recon_mse = (st.recon_mse * st.n_out + float(np.sum(d * d))) / n_out
    st.n_out = n_out


def _mm_back(x, w, a, dy, need_dx=True):
    if a is None:
        return x.T @ dy, (dy @ w.T if need_dx else None)
    g = _segment_sum(dy, a)
    dw = a.centroids.T @ g
    dx = _spread(g @ w.T, a) if need_dx else None
    return dw, dx


def _softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Forward:
    logits: np.ndarray
    features: list          # per instrumented layer, (B, F) flattened maps
    stats: dict             # layer -> ReuseStats
    labels: dict            # cluster labels actually used, keyed per matmul
    cache: dict = field(repr=False, default_factory=dict)


def forward(model: ToyModel, frames, *, reuse: bool = False, labels: dict | None = None,
            quantize: bool = False, with_mse: bool = False) -> Forward:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != model.frame_shape:
        raise ShapeError(f"frames {x.shape} do not match model frame shape {model.frame_shape}")
    ctx = _Ctx(model, reuse, labels, quantize, with_mse)
    params = model.params
    if quantize:
        params = {k: fake_quantize(v) for k, v in params.items()}
    if model.arch == "tiny_conv":
        return _conv_forward(model, params, x, ctx)
    return _vit_forward(model, params, x, ctx)


def backward(model: ToyModel, fw: Forward, dlogits: np.ndarray, dfeatures: list | None = None) -> dict:
    if model.arch == "tiny_conv":
        return _conv_backward(model, fw, dlogits, dfeatures)
    return _vit_backward(model, fw, dlogits, dfeatures)


# -- TinyConvNet ----------------------------------------------------------------

def _conv_forward(model, p, x, ctx):
    b = x.shape[0]
    s1, s2 = conv_shapes(model.frame_shape)
    cols1 = im2col_batch(x, s1)
    y1, cols1, a1 = _mm(ctx, "conv1", cols1, p["conv1.w"])
    pre1 = y1 + p["conv1.b"]
    h1 = np.maximum(pre1, 0.0)
    cols2 = im2col_batch(h1.reshape(b, s1.out_h, s1.out_w, s1.n_filters), s2)
    y2, cols2, a2 = _mm(ctx, "conv2", cols2, p["conv2.w"])
    pre2 = y2 + p["conv2.b"]
    h2 = np.maximum(pre2, 0.0)
    pooled = h2.reshape(b, s2.n_patches, s2.n_filters).mean(axis=1)
    y3, pooled, a3 = _mm(ctx, "fc", pooled, p["fc.w"])
    logits = y3 + p["fc.b"]
    cache = dict(b=b, cols1=cols1, a1=a1, pre1=pre1, cols2=cols2, a2=a2, pre2=pre2,
                 pooled=pooled, a3=a3, params=p)
    feats = [h1.reshape(b, -1), h2.reshape(b, -1)]
    return Forward(logits, feats, ctx.stats, ctx.used, cache)


def _conv_backward(model, fw, dlogits, dfeat):
    c = fw.cache
    p = c["params"]
    b = c["b"]
    s1, s2 = conv_shapes(model.frame_shape)
    g = {}
    g["fc.w"], dpooled = _mm_back(c["pooled"], p["fc.w"], c["a3"], dlogits)
    g["fc.b"] = dlogits.sum(axis=0, keepdims=True)
    dh2 = np.repeat(dpooled / s2.n_patches, s2.n_patches, axis=0)
    if dfeat is not None and dfeat[1] is not None:
        dh2 = dh2 + dfeat[1].reshape(dh2.shape)
    dpre2 = dh2 * (c["pre2"] > 0)
    g["conv2.b"] = dpre2.sum(axis=0, keepdims=True)
    g["conv2.w"], dcols2 = _mm_back(c["cols2"], p["conv2.w"], c["a2"], dpre2)
    dh1 = col2im_batch(dcols2, s2, b).reshape(b * s1.n_patches, s1.n_filters)
    if dfeat is not None and dfeat[0] is not None:
        dh1 = dh1 + dfeat[0].reshape(dh1.shape)
    dpre1 = dh1 * (c["pre1"] > 0)
    g["conv1.b"] = dpre1.sum(axis=0, keepdims=True)
    g["conv1.w"], _ = _mm_back(c["cols1"], p["conv1.w"], c["a1"], dpre1, need_dx=False)
    return {k: g[k] for k in model.params}


# -- TinyViT ----------------------------------------------------------------------

def patchify(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    p = VIT_PATCH
    t = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t.reshape(b * (h // p) * (w // p), p * p * c))


def _vit_forward(model, p, x, ctx):
    b, h, w, _ = x.shape
    n_tok = (h // VIT_PATCH) * (w // VIT_PATCH)
    d, dk, nh = VIT_D_MODEL, VIT_D_MODEL // VIT_HEADS, VIT_HEADS
    scale = 1.0 / math.sqrt(dk)
    patches = patchify(x)
    ye, patches, ae = _mm(ctx, "embed", patches, p["embed.w"])
    emb = ye + p["embed.b"]
    att_in = ctx.act(emb)
    hcat = np.empty_like(emb)
    heads = []
    st = ctx.stats["attn"]
    hq = ctx.hasher("attn")
    for f in range(b):
        rows = slice(f * n_tok, (f + 1) * n_tok)
        xf = att_in[rows]
        for i in range(nh):
            q = xf @ p[f"attn.wq{i}"]
            k = xf @ p[f"attn.wk{i}"]
            v = xf @ p[f"attn.wv{i}"]
            qa = ctx.cluster("attn", f"attn/{f}/{i}/q", q)
            kva = ctx.cluster("attn", f"attn/{f}/{i}/kv", np.concatenate([k, v], axis=1))
            qc = q if qa is None else qa.centroids
            kc, vc = (k, v) if kva is None else (kva.centroids[:, :dk], kva.centroids[:, dk:])
            s = qc @ kc.T * scale
            if kva is not None and model.weight_by_count:
                s = s + np.log(kva.counts)[None, :]
            prob = _softmax_rows(s)
            oc = prob @ vc
            o = oc if qa is None else oc[qa.labels]
            hcat[rows, i * dk:(i + 1) * dk] = o
            heads.append((xf, qc, kc, vc, prob, qa, kva))
            st.macs_exact += 3 * n_tok * d * dk + 2 * n_tok * n_tok * dk
            st.macs_reuse += 3 * n_tok * d * dk
            if qa is None:
                st.macs_reuse += 2 * n_tok * n_tok * dk
            else:
                st.macs_reuse += 2 * hashing_macs(hq, n_tok) + 2 * qa.n_clusters * kva.n_clusters * dk
                st.n_rows += qa.n_rows + kva.n_rows
                st.n_clusters += qa.n_clusters + kva.n_clusters
                if ctx.with_mse:
                    ref = _softmax_rows(q @ k.T * scale) @ v
                    _add_mse(st, o, ref)
        st.macs_exact += n_tok * d * d
        st.macs_reuse += n_tok * d * d
    z = hcat @ p["attn.wo"] + emb
    mlp_in = ctx.act(z)
    am = ctx.cluster("mlp", "mlp", mlp_in)
    zc = mlp_in if am is None else am.centroids
    upre = zc @ p["mlp.w1"]
    u = np.maximum(upre, 0.0)
    tc = u @ p["mlp.w2"]
    t = tc if am is None else tc[am.labels]
    n = z.shape[0]
    sm = ctx.stats["mlp"]
    sm.macs_exact += 2 * n * d * VIT_D_FF
    if am is None:
        sm.macs_reuse += 2 * n * d * VIT_D_FF
    else:
        sm.macs_reuse += hashing_macs(ctx.model.hashers["mlp"], n) + 2 * am.n_clusters * d * VIT_D_FF
        sm.n_rows += n
        sm.n_clusters += am.n_clusters
        if ctx.with_mse:
            _add_mse(sm, t, np.maximum(mlp_in @ p["mlp.w1"], 0.0) @ p["mlp.w2"])
    y = t + z
    pooled = y.reshape(b, n_tok, d).mean(axis=1)
    yf, pooled, af = _mm(ctx, "fc", pooled, p["fc.w"])
    logits = yf + p["fc.b"]
    cache = dict(b=b, n_tok=n_tok, patches=patches, ae=ae, hcat=hcat, heads=heads,
                 zc=zc, am=am, upre=upre, u=u, pooled=pooled, af=af, params=p)
    feats = [emb.reshape(b, -1), y.reshape(b, -1)]
    return Forward(logits, feats, ctx.stats, ctx.used, cache)


def _vit_backward(model, fw, dlogits, dfeat):
    c = fw.cache
    p = c["params"]
    b, n_tok = c["b"], c["n_tok"]
    d, dk, nh = VIT_D_MODEL, VIT_D_MODEL // VIT_HEADS, VIT_HEADS
    scale = 1.0 / math.sqrt(dk)
    g = {k: np.zeros_like(v) for k, v in model.params.items()}
    g["fc.w"], dpooled = _mm_back(c["pooled"], p["fc.w"], c["af"], dlogits)
    g["fc.b"] = dlogits.sum(axis=0, keepdims=True)
    dy = np.repeat(dpooled / n_tok, n_tok, axis=0)
    if dfeat is not None and dfeat[1] is not None:
        dy = dy + dfeat[1].reshape(dy.shape)
    # MLP branch
    am = c["am"]
    dtc = dy if am is None else _segment_sum(dy, am)
    g["mlp.w2"] = c["u"].T @ dtc
    dupre = (dtc @ p["mlp.w2"].T) * (c["upre"] > 0)
    g["mlp.w1"] = c["zc"].T @ dupre
    dzc = dupre @ p["mlp.w1"].T
    dz = dy + (dzc if am is None else _spread(dzc, am))
    # z = hcat @ wo + emb
    g["attn.wo"] = c["hcat"].T @ dz
    dhcat = dz @ p["attn.wo"].T
    demb = dz.copy()
    if dfeat is not None and dfeat[0] is not None:
        demb += dfeat[0].reshape(demb.shape)
    for idx, (xf, qc, kc, vc, prob, qa, kva) in enumerate(c["heads"]):
        f, i = divmod(idx, nh)
        rows = slice(f * n_tok, (f + 1) * n_tok)
        do = dhcat[rows, i * dk:(i + 1) * dk]
        doc = do if qa is None else _segment_sum(do, qa)
        dprob = doc @ vc.T
        dvc = prob.T @ doc
        ds = prob * (dprob - np.sum(dprob * prob, axis=1, keepdims=True))
        dqc = ds @ kc * scale
        dkc = ds.T @ qc * scale
        dq = dqc if qa is None else _spread(dqc, qa)
        if kva is None:
            dk_, dv = dkc, dvc
        else:
            dkv = _spread(np.concatenate([dkc, dvc], axis=1), kva)
            dk_, dv = dkv[:, :dk], dkv[:, dk:]
        wq, wk, wv = p[f"attn.wq{i}"], p[f"attn.wk{i}"], p[f"attn.wv{i}"]
        g[f"attn.wq{i}"] += xf.T @ dq
        g[f"attn.wk{i}"] += xf.T @ dk_
        g[f"attn.wv{i}"] += xf.T @ dv
        demb[rows] += dq @ wq.T + dk_ @ wk.T + dv @ wv.T
    g["embed.b"] = demb.sum(axis=0, keepdims=True)
    g["embed.w"], _ = _mm_back(c["patches"], p["embed.w"], c["ae"], demb, need_dx=False)
    return g


# -- helpers used by analysis and tuning --------------------------------------------

def layer_inputs(model: ToyModel, frames) -> dict:
    """Exact-forward input rows of every reuse-capable layer, split per frame."""
    fw = forward(model, frames)
    c = fw.cache
    b = c["b"]
    out = {}
    if model.arch == "tiny_conv":
        out["conv1"] = np.split(c["cols1"], b)
        out["conv2"] = np.split(c["cols2"], b)
        out["fc"] = np.split(c["pooled"], b)
    else:
        out["embed"] = np.split(c["patches"], b)
        n_tok = c["n_tok"]
        out["attn"] = [c["heads"][f * VIT_HEADS][0] for f in range(b)]
        out["mlp"] = np.split(c["zc"], b)
        assert all(m.shape[0] == n_tok for m in out["mlp"])
        out["fc"] = np.split(c["pooled"], b)
    return out
