"""Inference timing of selected equations plus a linear-scaling check.

    python3 scripts/timing.py runs/desk/*/results.jsonl
"""

import argparse
import csv
import sys

import numpy as np

from symprior.pipeline import cmd_timing, equation_from_record, read_results, time_equation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("results", nargs="+")
    ap.add_argument("--repeats", type=int, default=25)
    ap.add_argument("--scaling-rows", type=int, default=1_000_000)
    args = ap.parse_args()

    rows = cmd_timing(args.results, args.repeats)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["results", "tokens", "n_test", "median_seconds", "n_rows_2x_ratio"])
    for path, row in zip(args.results, rows):
        _, _, sel = read_results(path)
        eq = equation_from_record(sel)
        d = max([int(t[1:]) for t in eq.template.tokens if t.startswith("x")], default=0) + 1
        X = np.random.default_rng(0).uniform(1, 5, size=(2 * args.scaling_rows, d))
        ratio = time_equation(eq, X, 5) / time_equation(eq, X[: args.scaling_rows], 5)
        w.writerow([row["results"], row["tokens"], row["n_test"], f"{row['median_seconds']:.3e}", f"{ratio:.2f}"])


if __name__ == "__main__":
    main()
