"""Short UDEAN training runs on phantoms with isolation checks enabled.

Prints the relative fall of the generator total and the final discriminator
losses for each seed.

    python scripts/smoke_training.py --out smoke-out --seeds 0 1 2 --iterations 200
"""
import argparse
import math

import torch

from udean import desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="smoke-out")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--iterations", type=int, default=200)
    args = p.parse_args()
    torch.set_num_threads(1)
    protocol = desk.DeskProtocol()
    manifest = desk.prepare(protocol, args.out)
    for seed in args.seeds:
        h = desk.smoke_run(protocol, manifest, seed, args.iterations).history
        finite = all(math.isfinite(r["lrd"]) and math.isfinite(r["fd"]) for r in h)
        print(f"seed {seed}: total drop {desk.smoke_drop(h):.3f}  "
              f"lrd {h[-1]['lrd']:.4f}  fd {h[-1]['fd']:.4f}  finite {finite}")


if __name__ == "__main__":
    main()
