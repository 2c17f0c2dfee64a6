"""Paired float vs 8-bit compression ratios on highly correlated streams.

Prints per-seed sigma for float and fake-quantized reuse evaluation, the
per-layer breakdown, and a one-sided sign test of sigma_quant > sigma_float.
"""
import argparse

from scipy.stats import binomtest

from simreuse.models import init_model
from simreuse.streams import gen_stream
from simreuse.training import TrainConfig, evaluate, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=12)
    ap.add_argument("--rho", type=float, default=0.99)
    ap.add_argument("--hash-size", type=int, default=12)
    args = ap.parse_args()

    shape = (16, 16, 1)
    pos = neg = 0
    print("seed  sigma_float  sigma_quant  per-layer (float/quant)")
    for seed in range(args.seeds):
        train = gen_stream(128, shape, args.rho, 2, seed)
        m = pretrain(init_model("tiny_conv", shape, 2, seed, hash_size=args.hash_size), train,
                     TrainConfig(epochs=5, seed=seed))
        ev = gen_stream(128, shape, args.rho, 2, seed + 100)
        _, sf = evaluate(m, ev, use_reuse=True)
        _, sq = evaluate(m, ev, use_reuse=True, quantize=True)
        pos += sq.sigma > sf.sigma
        neg += sq.sigma < sf.sigma
        layers = "  ".join(f"{k} {sf.parts[k].sigma:.2f}/{sq.parts[k].sigma:.2f}" for k in sf.parts)
        print(f"{seed:4d}  {sf.sigma:11.3f}  {sq.sigma:11.3f}  {layers}")
    n = pos + neg
    p = binomtest(pos, n, 0.5, alternative="greater").pvalue if n else 1.0
    print(f"quant higher on {pos}, lower on {neg}; one-sided sign test p = {p:.4g}")


if __name__ == "__main__":
    main()
