"""Gradient versus hill-climbing coefficient fitting at a matched budget.

    python3 scripts/ablation.py --dataset easy-1 --seeds 10
"""

import argparse
import json

from symprior.pipeline import RunConfig, cmd_ablate_coeff


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dataset", default="easy-1")
    ap.add_argument("--template", default="COF x0 mul COF x1 mul sin add")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--per-seed", action="store_true", help="print every paired seed, not just the summary")
    args = ap.parse_args()

    rec = cmd_ablate_coeff(RunConfig(dataset=args.dataset), args.template, range(args.seeds))
    if not args.per_seed:
        rec.pop("per_seed")
    print(json.dumps(rec, indent=2))


if __name__ == "__main__":
    main()
