"""Token slots per sample: adaptive hybrid capacity against fixed TCR at 1.1 s / n."""

import argparse
import math

from moelab.routing import HYBRID, TCR
from moelab.training import RouterMode, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--warmup", type=int, default=100, help="steps ignored while the router settles")
    ap.add_argument("--theta", type=float, default=0.7)
    args = ap.parse_args()

    s, n = 64, 4
    fixed_c = math.ceil(1.1 * s / n)
    print("seed,adaptive_slots,fixed_slots,reduction,adaptive_success,fixed_success")
    for seed in range(args.seeds):
        adaptive, _ = train(TrainConfig(s=s, n=n, steps=args.steps, seed=seed, capacity_policy="adaptive",
                                        adaptive_theta=args.theta,
                                        mode_schedule=((0, RouterMode(HYBRID, s, args.theta)),)))
        fixed, _ = train(TrainConfig(s=s, n=n, steps=args.steps, seed=seed,
                                     mode_schedule=((0, RouterMode(TCR, fixed_c)),)))
        w = slice(args.warmup, None)
        a, f = adaptive.column("slots")[w].mean(), fixed.column("slots")[w].mean()
        print(f"{seed},{a:.2f},{f:.2f},{1 - a / f:.3f},"
              f"{adaptive.column('dispatch_success')[w].mean():.3f},{fixed.column('dispatch_success')[w].mean():.3f}")


if __name__ == "__main__":
    main()
