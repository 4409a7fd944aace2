"""Run the full pipeline over several seeds and datasets and print a summary.

    python3 scripts/run_desk.py --datasets easy-1 medium-1 --seeds 0 1 2 --out runs/desk
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from symprior.pipeline import RunConfig, cmd_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--datasets", nargs="+", default=["easy-1"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["dataset", "seed", "corpus", "pool", "tokens", "test_r2", "test_pearson", "complexity", "seconds"])
    for ds in args.datasets:
        for seed in args.seeds:
            cfg = RunConfig(out_dir=str(Path(args.out) / f"{ds}_seed{seed}"), seed=seed, dataset=ds)
            t0 = time.perf_counter()
            out = cmd_run(cfg)
            sel = out.fit.selected
            w.writerow([ds, seed, len(out.corpus), len(out.pool), " ".join(sel.template.tokens),
                        f"{sel.test.r2:.6f}", f"{sel.test.pearson:.6f}", sel.complexity,
                        f"{time.perf_counter() - t0:.1f}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
