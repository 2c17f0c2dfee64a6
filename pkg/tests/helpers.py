"""Shared oracles for the model and training tests."""
import numpy as np

from simreuse.models import forward
from simreuse.regularizers import RegConfig, RunningMeans, prepare_distribution
from simreuse.training import composite_loss


def frozen_setup(model, frames, reg: RegConfig, reuse: bool):
    """Cluster labels and running means held fixed for a gradient check."""
    fw = forward(model, frames, reuse=reuse)
    means = RunningMeans([prepare_distribution(f.mean(axis=0), reg.pool_len) for f in fw.features])
    return (fw.labels if reuse else None), means


def composite_fd_error(model, frames, labels, t0, reg, *, reuse, rng, n_entries=12, step=1e-6):
    """Worst relative error between analytic and central-difference gradients
    over a random subset of entries of every parameter tensor."""
    stored, means = frozen_setup(model, frames, reg, reuse)
    _, _, grads, _ = composite_loss(model, frames, labels, t0, reg, means, reuse=reuse, stored=stored)
    worst = 0.0
    for name, p in model.params.items():
        idx = rng.choice(p.size, size=min(n_entries, p.size), replace=False)
        fd = np.empty(idx.size)
        for n, k in enumerate(idx):
            orig = p.flat[k]
            vals = []
            for delta in (step, -step):
                p.flat[k] = orig + delta
                vals.append(composite_loss(model, frames, labels, t0, reg, means,
                                           reuse=reuse, stored=stored)[0])
            p.flat[k] = orig
            fd[n] = (vals[0] - vals[1]) / (2 * step)
        g = grads[name].ravel()[idx]
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-7))
    return worst
