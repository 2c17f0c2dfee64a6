"""Temporal and per-layer similarity of correlated streams at several brightness levels.

For each seed and brightness, pre-trains TinyConvNet on a stream of that
brightness and reports lag-1 vs lag-32 frame similarity plus the mean
intra-frame row similarity entering each reuse layer.
"""
import argparse
import csv
import sys

from simreuse.models import init_model
from simreuse.streams import analyze_similarity, gen_stream, lag_similarity, layer_similarity_profile
from simreuse.training import TrainConfig, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--brightness", type=float, nargs="+", default=[0.0, 1.0, 2.0, 3.0])
    ap.add_argument("--rho", type=float, default=0.9)
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()

    shape = (16, 16, 1)
    out = csv.writer(sys.stdout)
    out.writerow(["seed", "brightness", "model", "lag1", "lag32", "conv1", "conv2", "fc"])
    for seed in args.seeds:
        for b in args.brightness:
            train = gen_stream(256, shape, args.rho, 2, seed, brightness=b)
            probe = gen_stream(64, shape, args.rho, 2, seed + 200, brightness=b)
            sim = analyze_similarity(probe)
            init = init_model("tiny_conv", shape, 2, seed)
            trained = pretrain(init, train, TrainConfig(epochs=args.epochs, seed=seed))
            for name, model in (("init", init), ("pretrained", trained)):
                prof = layer_similarity_profile(model, probe, 32)
                out.writerow([seed, b, name, f"{lag_similarity(sim, 1):.4f}", f"{lag_similarity(sim, 32):.4f}",
                              f"{prof['conv1']:.4f}", f"{prof['conv2']:.4f}", f"{prof['fc']:.4f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
