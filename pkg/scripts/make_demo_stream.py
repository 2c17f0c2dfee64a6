"""Write the bundled demo stream (rho 0.95, 16x16 grey frames, 2 classes) to data/demo.rfs."""
import argparse
from pathlib import Path

from simreuse.streams import gen_stream, save_stream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "demo.rfs")
    ap.add_argument("--frames", type=int, default=256)
    ap.add_argument("--rho", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_stream(args.out, gen_stream(args.frames, (16, 16, 1), args.rho, 2, args.seed))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
