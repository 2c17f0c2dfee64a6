"""Per-layer Bayesian optimisation of LSH hyperparameters.

Each reuse-capable layer gets an independent search over the integer grid
(hash_size, input_dim) minimising theta = mse / sigma, where mse compares the
reuse output with the exact output on a calibration batch and sigma is the
row compression ratio.  The surrogate is a squared-exponential GP on log
theta whose hyperparameters come from a fixed grid search of the marginal likelihood;
candidates are scored with expected improvement, scanned exhaustively.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

from .lsh import LshHasher, cluster_rows, new_hasher
from .models import HASHER_SEED_BASE, VIT_HEADS, ToyModel, attention_weights, forward
from .reuse import ReuseStats, exact_attention, reuse_attention, reuse_matmul

GP_JITTER = 1e-6
VAR_FLOOR = 1e-12
SIGMA_FLOOR = 1e-12
LENGTH_GRID = tuple(np.geomspace(0.05, 1.0, 8))
SIGNAL_GRID = (0.25, 0.5, 1.0, 2.0)
CALIBRATION_FRAMES = 8
THETA_FLOOR_REL = 1e-6
THETA_FLOOR_ABS = 1e-300


@dataclass(frozen=True)
class TrialRecord:
    hash_size: int
    input_dim: int
    mse: float
    sigma: float
    theta: float

    def __post_init__(self):
        if self.mse < 0 or self.sigma < 1:
            raise ValueError(f"invalid trial: mse={self.mse}, sigma={self.sigma}")
        if self.theta != self.mse / self.sigma:
            raise ValueError("theta must equal mse / sigma")

    @classmethod
    def make(cls, hash_size: int, input_dim: int, mse: float, sigma: float) -> "TrialRecord":
        return cls(int(hash_size), int(input_dim), float(mse), float(sigma), float(mse) / float(sigma))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TuneBudget:
    n_init: int = 5
    n_total: int = 30
    hash_min: int = 1
    hash_max: int = 16
    input_dim_min: int = 4

    def __post_init__(self):
        # n_init == n_total is allowed and degenerates to the initial design alone
        if not 1 <= self.n_init <= self.n_total:
            raise ValueError(f"need 1 <= n_init <= n_total, got {self.n_init}, {self.n_total}")
        if not 1 <= self.hash_min <= self.hash_max:
            raise ValueError("bad hash_size range")
        if self.input_dim_min < 1:
            raise ValueError("input_dim_min must be >= 1")

    def bounds(self, row_len: int) -> tuple[tuple[int, int], tuple[int, int]]:
        lo = min(self.input_dim_min, row_len)
        return (self.hash_min, self.hash_max), (lo, row_len)

    def grid(self, row_len: int) -> np.ndarray:
        """Every (hash_size, input_dim) candidate, hash_size-major."""
        (h0, h1), (d0, d1) = self.bounds(row_len)
        hs, ds = np.meshgrid(np.arange(h0, h1 + 1), np.arange(d0, d1 + 1), indexing="ij")
        return np.stack([hs.ravel(), ds.ravel()], axis=1)


# -- layer oracles ---------------------------------------------------------------

@dataclass
class LayerOracle:
    """Exact and reuse forward of one layer on a row batch."""

    name: str
    row_len: int
    exact: Callable[[np.ndarray], np.ndarray]
    reuse: Callable[[np.ndarray, LshHasher], tuple]

    @classmethod
    def matmul(cls, name: str, w: np.ndarray) -> "LayerOracle":
        w = np.asarray(w, dtype=np.float64)

        def reuse(x, h):
            return reuse_matmul(x, w, h, with_mse=False)

        return cls(name, w.shape[0], lambda x: x @ w, reuse)

    @classmethod
    def mlp(cls, name: str, w1: np.ndarray, w2: np.ndarray) -> "LayerOracle":
        def exact(z):
            return np.maximum(z @ w1, 0.0) @ w2

        def reuse(z, h):
            a = cluster_rows(h, z)
            y = exact(a.centroids)[a.labels]
            return y, ReuseStats(n_rows=a.n_rows, n_clusters=a.n_clusters)

        return cls(name, w1.shape[0], exact, reuse)

    @classmethod
    def attention(cls, name: str, weights, n_tokens: int) -> "LayerOracle":
        """Attention block over consecutive groups of `n_tokens` rows (one per frame)."""

        def frames(x):
            if x.shape[0] % n_tokens:
                raise ValueError(f"{x.shape[0]} tokens is not a multiple of {n_tokens}")
            return np.split(x, x.shape[0] // n_tokens)

        def exact(x):
            return np.concatenate([exact_attention(f, weights) for f in frames(x)])

        def reuse(x, h):
            ys, total = [], ReuseStats()
            for f in frames(x):
                y, st = reuse_attention(f, weights, h, None, with_mse=False)
                ys.append(y)
                total = total + st
            return np.concatenate(ys), total

        return cls(name, weights.d_k, exact, reuse)


def theta_objective(oracle: LayerOracle, x: np.ndarray, hash_size: int, input_dim: int,
                    hasher_seed: int = 0, *, exact_out: np.ndarray | None = None) -> TrialRecord:
    """Score one hasher setting on the calibration batch `x`."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty calibration batch")
    if not 1 <= input_dim <= oracle.row_len:
        raise ValueError(f"input_dim {input_dim} outside [1, {oracle.row_len}]")
    if hash_size < 1:
        raise ValueError(f"hash_size must be >= 1, got {hash_size}")
    h = new_hasher(int(input_dim), int(hash_size), hasher_seed)
    ref = oracle.exact(x) if exact_out is None else exact_out
    y, st = oracle.reuse(x, h)
    d = np.asarray(y, dtype=np.float64) - ref
    return TrialRecord.make(hash_size, input_dim, float(np.mean(d * d)), st.sigma)


# -- Gaussian process surrogate ------------------------------------------------------

def _sq_dists(a: np.ndarray, b: np.ndarray, ell: np.ndarray) -> np.ndarray:
    d = (a[:, None, :] - b[None, :, :]) / ell
    return np.sum(d * d, axis=-1)


def _kernel(a, b, ell, s2):
    return s2 * np.exp(-0.5 * _sq_dists(a, b, ell))


@dataclass
class GpPosterior:
    x: np.ndarray              # (n, 2) normalised inputs
    y: np.ndarray              # standardised targets
    y_mean: float              # of the log-scaled targets
    y_scale: float
    lengthscales: np.ndarray
    signal_var: float
    chol: tuple = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    log_ml: float = 0.0
    theta_floor: float = THETA_FLOOR_ABS

    def predict(self, xq) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation in standardised units."""
        xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
        ks = _kernel(xq, self.x, self.lengthscales, self.signal_var)
        mu = ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        var = self.signal_var - np.sum(ks * v.T, axis=1)
        return mu, np.sqrt(np.maximum(var, 0.0))

    def predict_log_theta(self, xq) -> tuple[np.ndarray, np.ndarray]:
        mu, sd = self.predict(xq)
        return self.y_mean + self.y_scale * mu, self.y_scale * sd

    def predict_theta(self, xq) -> np.ndarray:
        """Posterior mean mapped back to theta units."""
        mu, _ = self.predict_log_theta(xq)
        return np.exp(mu) - self.theta_floor

    def standardize(self, theta) -> np.ndarray:
        log_theta = np.log(np.asarray(theta, dtype=np.float64) + self.theta_floor)
        return (log_theta - self.y_mean) / self.y_scale


def normalize_points(points, bounds) -> np.ndarray:
    """Map integer (hash_size, input_dim) points onto [0, 1]^2."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty_like(p)
    for j, (lo, hi) in enumerate(bounds):
        out[:, j] = 0.0 if hi == lo else (p[:, j] - lo) / (hi - lo)
    return out


def theta_floor(theta) -> float:
    return THETA_FLOOR_REL * max(float(np.max(theta)), 0.0) + THETA_FLOOR_ABS


def gp_fit(trials: list[TrialRecord], bounds) -> GpPosterior:
    """Fit the surrogate to log-scaled, standardised thetas.

    Kernel hyperparameters maximise the log marginal likelihood over the fixed
    (lengthscale, lengthscale, signal variance) grid, first best wins.
    """
    if not trials:
        raise ValueError("need at least one trial")
    x = normalize_points([(t.hash_size, t.input_dim) for t in trials], bounds)
    raw = np.array([t.theta for t in trials])
    floor = theta_floor(raw)
    # theta spans decades across the grid, so the GP models its logarithm
    theta = np.log(raw + floor)
    y_mean = float(theta.mean())
    y_scale = math.sqrt(max(float(theta.var()), VAR_FLOOR))
    y = (theta - y_mean) / y_scale
    n = len(y)
    best = None
    for l0 in LENGTH_GRID:
        for l1 in LENGTH_GRID:
            ell = np.array([l0, l1])
            unit = np.exp(-0.5 * _sq_dists(x, x, ell))
            for s2 in SIGNAL_GRID:
                k = s2 * unit + GP_JITTER * np.eye(n)
                chol = cho_factor(k, lower=True)
                alpha = cho_solve(chol, y)
                lml = (-0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(chol[0]))))
                       - 0.5 * n * math.log(2.0 * math.pi))
                if best is None or lml > best[0]:
                    best = (lml, ell, s2, chol, alpha)
    lml, ell, s2, chol, alpha = best
    return GpPosterior(x, y, y_mean, y_scale, ell, s2, chol, alpha, lml, floor)


def ei_from_moments(mu, sd, best) -> np.ndarray:
    """Closed-form expected improvement for minimisation; 0 where sd <= 1e-12."""
    mu = np.asarray(mu, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    safe = np.where(sd > SIGMA_FLOOR, sd, 1.0)
    z = (best - mu) / safe
    ei = safe * (z * norm.cdf(z) + norm.pdf(z))
    return np.where(sd > SIGMA_FLOOR, np.maximum(ei, 0.0), 0.0)


def expected_improvement(post: GpPosterior, candidates, best: float) -> np.ndarray:
    """EI of normalised candidate points; `best` is the lowest standardised target."""
    mu, sd = post.predict(candidates)
    return ei_from_moments(mu, sd, best)


# -- search loops ----------------------------------------------------------------------

def initial_design(budget: TuneBudget, row_len: int, seed: int) -> np.ndarray:
    """`n_init` distinct grid points from a scrambled Halton sequence."""
    (h0, h1), (d0, d1) = budget.bounds(row_len)
    n_grid = (h1 - h0 + 1) * (d1 - d0 + 1)
    want = min(budget.n_init, n_grid)
    sampler = qmc.Halton(d=2, scramble=True, seed=seed)
    seen, points = set(), []
    while len(points) < want:
        for u in sampler.random(want):
            p = (h0 + min(int(u[0] * (h1 - h0 + 1)), h1 - h0),
                 d0 + min(int(u[1] * (d1 - d0 + 1)), d1 - d0))
            if p not in seen:
                seen.add(p)
                points.append(p)
                if len(points) == want:
                    break
    return np.array(points, dtype=np.int64)


def _evaluate(oracle, x, point, hasher_seed, ref):
    try:
        return theta_objective(oracle, x, int(point[0]), int(point[1]), hasher_seed, exact_out=ref)
    except Exception as exc:
        raise RuntimeError(f"{oracle.name}: trial {tuple(int(v) for v in point)} failed: {exc}") from exc


def _argmin(trials: list[TrialRecord]) -> TrialRecord:
    return min(trials, key=lambda t: t.theta)


def tune_layer(oracle: LayerOracle, x: np.ndarray, budget: TuneBudget, seed: int,
               hasher_seed: int | None = None):
    """GP + EI search; returns (best trial, trials in evaluation order)."""
    x = np.asarray(x, dtype=np.float64)
    hasher_seed = seed if hasher_seed is None else hasher_seed
    ref = oracle.exact(x)
    bounds = budget.bounds(oracle.row_len)
    grid = budget.grid(oracle.row_len)
    grid_norm = normalize_points(grid, bounds)
    n_total = min(budget.n_total, len(grid))
    trials = [_evaluate(oracle, x, p, hasher_seed, ref)
              for p in initial_design(budget, oracle.row_len, seed)]
    done = {(t.hash_size, t.input_dim) for t in trials}
    while len(trials) < n_total:
        post = gp_fit(trials, bounds)
        best = float(np.min(post.y))
        ei = expected_improvement(post, grid_norm, best)
        for i, p in enumerate(grid):
            if (p[0], p[1]) in done:
                ei[i] = -1.0
        pick = grid[int(np.argmax(ei))]
        t = _evaluate(oracle, x, pick, hasher_seed, ref)
        trials.append(t)
        done.add((t.hash_size, t.input_dim))
    return _argmin(trials), trials


def random_search(oracle: LayerOracle, x: np.ndarray, budget: TuneBudget, seed: int,
                  hasher_seed: int | None = None):
    """Baseline: `n_total` distinct grid points drawn uniformly."""
    x = np.asarray(x, dtype=np.float64)
    hasher_seed = seed if hasher_seed is None else hasher_seed
    ref = oracle.exact(x)
    grid = budget.grid(oracle.row_len)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(grid), size=min(budget.n_total, len(grid)), replace=False)
    trials = [_evaluate(oracle, x, grid[i], hasher_seed, ref) for i in picks]
    return _argmin(trials), trials


# -- whole models ----------------------------------------------------------------------

@dataclass
class LayerResult:
    layer: str
    best: TrialRecord | None
    trials: list
    hasher_seed: int
    error: str | None = None

    def to_dict(self) -> dict:
        out = {"hasher_seed": self.hasher_seed, "trials": [t.to_dict() for t in self.trials]}
        if self.best is not None:
            out.update(self.best.to_dict())
        if self.error is not None:
            out["error"] = self.error
        return out


def model_oracles(model: ToyModel, frames) -> dict:
    """layer -> (oracle, calibration rows), taken from an exact forward pass."""
    fw = forward(model, frames)
    c = fw.cache
    p = model.params
    if model.arch == "tiny_conv":
        return {
            "conv1": (LayerOracle.matmul("conv1", p["conv1.w"]), c["cols1"]),
            "conv2": (LayerOracle.matmul("conv2", p["conv2.w"]), c["cols2"]),
            "fc": (LayerOracle.matmul("fc", p["fc.w"]), c["pooled"]),
        }
    emb = np.concatenate([c["heads"][f * VIT_HEADS][0] for f in range(c["b"])])
    return {
        "embed": (LayerOracle.matmul("embed", p["embed.w"]), c["patches"]),
        "attn": (LayerOracle.attention("attn", attention_weights(p), c["n_tok"]), emb),
        "mlp": (LayerOracle.mlp("mlp", p["mlp.w1"], p["mlp.w2"]), c["zc"]),
        "fc": (LayerOracle.matmul("fc", p["fc.w"]), c["pooled"]),
    }


def tune_model(model: ToyModel, frames, budget: TuneBudget, seed: int, *,
               workers: int | None = None) -> dict:
    """Tune every reuse layer independently on the first calibration frames.

    Layer i searches with seed `seed ^ i` and hashes with the projection seed
    the model itself uses for that layer, so results do not depend on how
    the layers are scheduled.  A failing layer is reported, not raised.
    """
    calib = np.asarray(frames)[:CALIBRATION_FRAMES]
    if calib.shape[0] == 0:
        raise ValueError("empty calibration stream")
    oracles = model_oracles(model, calib)

    def run(item):
        idx, layer = item
        oracle, x = oracles[layer]
        hseed = HASHER_SEED_BASE + idx
        try:
            best, trials = tune_layer(oracle, x, budget, seed ^ idx, hasher_seed=hseed)
            return LayerResult(layer, best, trials, hseed)
        except Exception as exc:
            return LayerResult(layer, None, [], hseed, error=str(exc))

    items = list(enumerate(model.reuse_layers))
    if workers == 1:
        results = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers or len(items)) as pool:
            results = list(pool.map(run, items))
    return {r.layer: r for r in results}


def apply_tuning(model: ToyModel, results: dict) -> ToyModel:
    """Copy of `model` with every successfully tuned layer's hasher replaced."""
    out = model.copy()
    for layer, res in results.items():
        best = res.best if isinstance(res, LayerResult) else res
        if best is None:
            continue
        if isinstance(best, dict):
            hs, dim, hseed = best["hash_size"], best["input_dim"], best.get("hasher_seed")
        else:
            hs, dim, hseed = best.hash_size, best.input_dim, res.hasher_seed
        out.set_hasher(layer, hs, dim, hseed)
    return out


def results_to_dict(results: dict) -> dict:
    return {layer: res.to_dict() for layer, res in results.items()}


def save_tuning(path, results: dict, meta: dict | None = None) -> None:
    payload = {"meta": meta or {}, "layers": results_to_dict(results)}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_tuning(path) -> dict:
    """layer -> dict with hash_size, input_dim, hasher_seed (and the recorded trials)."""
    with open(path) as fh:
        payload = json.load(fh)
    return {layer: d for layer, d in payload["layers"].items() if "error" not in d}
