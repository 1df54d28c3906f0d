"""Exact TCR and ECR success across capacities at several false-positive rates.

Prints a CSV table; the crossover point is where ECR overtakes TCR.
"""

import argparse
import csv
import sys

from moelab.theory import SimSpec, ecr_success_exact, tcr_success_exact


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--s", type=int, default=256)
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--q", type=float, nargs="+", default=[0.5, 0.1, 0.05, 0.01])
    ap.add_argument("--capacities", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64, 128, 256])
    args = ap.parse_args()

    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["q", "C", "tcr_exact", "ecr_exact", "better"])
    for q in args.q:
        for C in args.capacities:
            spec = SimSpec(args.s, args.n, C, q=(q,))
            tcr, ecr = tcr_success_exact(spec), ecr_success_exact(spec)
            out.writerow([q, C, f"{tcr:.6g}", f"{ecr:.6g}", "ecr" if ecr > tcr else "tcr"])


if __name__ == "__main__":
    main()
