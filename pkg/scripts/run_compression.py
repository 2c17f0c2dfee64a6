"""Pre-trained vs similarity-aware fine-tuned TinyConvNet on correlated streams.

Prints one CSV row per (seed, model) with held-out accuracy, MAC reduction
and speedup.  Defaults match the acceptance setting; use --lam-t to explore
the temporal regularizer strength.
"""
import argparse
import csv
import sys

from simreuse.models import init_model
from simreuse.regularizers import RegConfig
from simreuse.streams import gen_stream
from simreuse.training import TrainConfig, evaluate, pretrain, sa_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rho", type=float, default=0.95)
    ap.add_argument("--frames", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lam", type=float, default=0.001)
    ap.add_argument("--lam-t", type=float, default=1000.0)
    ap.add_argument("--window", type=int, default=2)
    ap.add_argument("--hash-size", type=int, default=12)
    ap.add_argument("--input-dim", type=int, default=8)
    args = ap.parse_args()

    shape = (16, 16, 1)
    reg = RegConfig(lam=args.lam, lam_t=args.lam_t, window=args.window)
    out = csv.writer(sys.stdout)
    out.writerow(["seed", "model", "acc_exact", "acc_reuse", "reduction_pct", "speedup", "sigma"])
    for seed in args.seeds:
        train = gen_stream(args.frames, shape, args.rho, 2, seed)
        held_out = gen_stream(args.frames, shape, args.rho, 2, seed + 100)
        m = init_model("tiny_conv", shape, 2, seed, hash_size=args.hash_size, input_dim=args.input_dim)
        pre = pretrain(m, train, TrainConfig(epochs=args.epochs, seed=seed))
        sa, _ = sa_train(pre, train, TrainConfig(epochs=args.epochs, seed=seed), reg)
        for name, model in (("pretrained", pre), ("sa", sa)):
            acc_e, _ = evaluate(model, held_out, use_reuse=False)
            acc_r, st = evaluate(model, held_out, use_reuse=True)
            out.writerow([seed, name, acc_e, acc_r, f"{st.reduction_pct:.3f}", f"{st.speedup:.3f}",
                          f"{st.sigma:.3f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
