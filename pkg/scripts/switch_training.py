"""Train with large-capacity TCR, then switch to ECR or stay on TCR at a small capacity.

For each seed this writes two metrics CSVs and prints the false-positive rate
at the switch plus mean dispatch success afterwards.
"""

import argparse
from pathlib import Path

from moelab.routing import ECR, TCR
from moelab.training import RouterMode, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--switch", type=int, default=200)
    ap.add_argument("--capacity", type=int, default=8, help="capacity after the switch")
    ap.add_argument("--out", type=Path, default=Path("runs/switch"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    print("seed,q_hat_start,q_hat_at_switch,ecr_success,tcr_success")
    for seed in range(args.seeds):
        success = {}
        for kind in (ECR, TCR):
            cfg = TrainConfig(steps=args.steps, seed=seed, mode_schedule=(
                (0, RouterMode(TCR, 64)), (args.switch, RouterMode(kind, args.capacity))))
            log, _ = train(cfg)
            log.to_csv(args.out / f"seed{seed}_{kind.lower()}.csv")
            success[kind] = log.column("dispatch_success")[args.switch:].mean()
            q = log.column("q_hat_max")
        print(f"{seed},{q[0]:.4f},{q[args.switch]:.4f},{success[ECR]:.4f},{success[TCR]:.4f}")


if __name__ == "__main__":
    main()
