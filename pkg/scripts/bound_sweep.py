"""Sweep capacity and compare exact TCR success with its closed-form bounds.

Also reports where the lower bound is flagged valid, which needs C >= 48
and enough positions (2(s-1) >= nC).
"""

import argparse
import csv
import sys

import numpy as np

from moelab.theory import SimSpec, tcr_success_exact, theorem_bounds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--s", type=int, default=4096)
    ap.add_argument("--n", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--points", type=int, default=12)
    args = ap.parse_args()

    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["n", "C", "lower", "exact", "upper", "lower_valid", "inside"])
    for n in args.n:
        for C in np.unique(np.geomspace(48, args.s - 1, args.points).astype(int)):
            spec = SimSpec(args.s, n, int(C))
            b = theorem_bounds(spec)
            exact = tcr_success_exact(spec)
            out.writerow([n, C, f"{b.tcr_lower:.5g}", f"{exact:.5g}", f"{b.tcr_upper:.5g}",
                          b.tcr_lower_valid, b.tcr_lower <= exact <= b.tcr_upper])


if __name__ == "__main__":
    main()
