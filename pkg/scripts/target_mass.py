"""How much prior probability a trained checkpoint puts on a target structure.

Sums the prior probability of every spelling of the target that differs only
by operand order of commutative operators, which is a direct measure of
whether the search stage can be expected to sample it.

    python3 scripts/target_mass.py runs/desk/easy-1_seed0/prior.ckpt
"""

import argparse
import itertools
import math

from symprior import prior as prior_mod
from symprior.expr import Node, parse_postfix, to_postfix

COMMUTATIVE = {"add", "mul"}


def spellings(node: Node):
    """Every tree reachable by swapping children of commutative operators."""
    if not node.children:
        yield node
        return
    kids = [list(spellings(c)) for c in node.children]
    for combo in itertools.product(*kids):
        yield Node(node.kind, node.value, tuple(combo))
        if node.value in COMMUTATIVE and len(combo) == 2:
            yield Node(node.kind, node.value, (combo[1], combo[0]))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint")
    ap.add_argument("--template", default="COF x0 mul COF x1 mul sin add")
    args = ap.parse_args()

    model = prior_mod.load(args.checkpoint)
    seen = {to_postfix(t) for t in spellings(parse_postfix(args.template.split()))}
    total = 0.0
    for t in sorted(seen, key=lambda t: t.tokens):
        lp = prior_mod.log_prob(model, t)
        total += math.exp(lp)
        print(f"{lp:10.3f}  {' '.join(t.tokens)}")
    print(f"{len(seen)} spellings, total probability {total:.3e}")


if __name__ == "__main__":
    main()
