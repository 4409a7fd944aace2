"""Noise-robustness table for the selected equation of finished runs.

Each run directory must hold a results.jsonl written by `symprior run`.

    python3 scripts/noise_sweep.py runs/desk/easy-1_seed0 runs/desk/easy-1_seed1
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from symprior.pipeline import RunConfig, cmd_noise_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("run_dirs", nargs="+")
    ap.add_argument("--jitter", type=float, default=0.005)
    args = ap.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["run", "eta", "ln_mse", "r2", "pearson", "monotone"])
    for d in args.run_dirs:
        manifest = json.loads((Path(d) / "manifest.json").read_text())
        cfg = RunConfig.from_dict(manifest["config"])
        rows, ok = cmd_noise_sweep(cfg, jitter=args.jitter)
        for r in rows:
            w.writerow([d, r["eta"], r["ln_mse"], r["r2"], r["pearson"], ok])


if __name__ == "__main__":
    main()
