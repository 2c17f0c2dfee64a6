"""Bayesian LSH tuning vs equal-budget random search, per TinyConvNet layer."""
import argparse

import numpy as np

from simreuse.models import init_model
from simreuse.streams import gen_stream
from simreuse.tuner import TuneBudget, model_oracles, random_search, tune_layer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--budget", type=int, default=30)
    ap.add_argument("--rho", type=float, default=0.95)
    args = ap.parse_args()

    stream = gen_stream(64, (16, 16, 1), args.rho, 2, seed=0)
    model = init_model("tiny_conv", (16, 16, 1), 2, seed=0)
    oracles = model_oracles(model, stream.frames[:8])
    budget = TuneBudget(n_total=args.budget)
    for idx, layer in enumerate(model.reuse_layers):
        oracle, x = oracles[layer]
        hseed = 1000 + idx
        tuned = [tune_layer(oracle, x, budget, s, hasher_seed=hseed)[0] for s in range(args.seeds)]
        rand = [random_search(oracle, x, budget, s + 100, hasher_seed=hseed)[0] for s in range(args.seeds)]
        med = float(np.median([r.theta for r in rand]))
        print(f"{layer}: {x.shape[0]} calibration rows, random-search median best theta {med:.4g}")
        for s, t in enumerate(tuned):
            mark = "<=" if t.theta <= med else "> "
            print(f"  seed {s}: theta {t.theta:.4g} {mark} median  (hash_size {t.hash_size}, "
                  f"input_dim {t.input_dim}, sigma {t.sigma:.2f})")


if __name__ == "__main__":
    main()
