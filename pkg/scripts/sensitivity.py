"""Sampler sensitivity sweeps with a fixed trained prior.

Trains (or reuses) one prior, then reruns search, fit and selection for every
value of each knob while all seeds stay fixed.

    python3 scripts/sensitivity.py --out runs/sens
"""

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from symprior import prior as prior_mod
from symprior.pipeline import RunConfig, cmd_run, cmd_sweep, load_target, vocab_for

GRIDS = {
    "max_term": ("medium-1", [4, 8, 12, 18, 26]),
    "max_trig_vars": ("medium-2", [1, 2, 4, 8]),
    "temperature": ("easy-1", [0.4, 0.6, 0.8, 1.0, 1.3]),
    "top_k": ("easy-1", [2, 5, 10, 14]),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/sens")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--knobs", nargs="+", default=list(GRIDS), choices=list(GRIDS))
    args = ap.parse_args()

    cfg = RunConfig(out_dir=args.out, seed=args.seed)
    if not cfg.path("checkpoint").exists():
        cmd_run(cfg)
    model = prior_mod.load(cfg.path("checkpoint"), vocab_for(cfg, load_target(cfg)[0]))

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["knob", "dataset", "value", "r2", "pearson", "pool_size", "tokens", "status"])
    for knob in args.knobs:
        ds, values = GRIDS[knob]
        cell = replace(cfg, dataset=ds, out_dir=str(Path(args.out) / knob))
        for r in cmd_sweep(cell, knob, values, model=model):
            w.writerow([knob, ds, r["value"], r["r2"], r["pearson"], r["pool_size"], r["tokens"], r["status"]])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
