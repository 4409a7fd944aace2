"""Independent reference implementations used by the test suite.

Nothing here imports the code under test except the ``Node`` container,
so verdicts and numbers come from separate logic.
"""

from __future__ import annotations

import math
import re
from functools import lru_cache

from symprior.expr import Node

LEAVES = ("x0", "x1", "COF")
UNARY = ("sin", "cos")
BINARY = ("add", "sub", "mul", "div")
ALPHABET = LEAVES + UNARY + BINARY


# ---------------------------------------------------------------- validity


@lru_cache(maxsize=None)
def is_tree(seq: tuple[str, ...]) -> bool:
    """True when ``seq`` is the postfix form of exactly one tree.

    Decides by trying every way to split the sequence into operand subtrees,
    with no stack machine involved.
    """
    if not seq:
        return False
    last = seq[-1]
    if last in LEAVES:
        return len(seq) == 1
    if last in UNARY:
        return is_tree(seq[:-1])
    if last in BINARY:
        body = seq[:-1]
        return any(is_tree(body[:k]) and is_tree(body[k:]) for k in range(1, len(body)))
    return False


# ---------------------------------------------------------------- trees


def leaf(tok: str) -> Node:
    return Node.cof(0) if tok == "COF" else Node.var(int(tok[1:]))


def enumerate_trees(depth: int) -> list[Node]:
    """All trees over LEAVES / UNARY / BINARY with depth <= ``depth`` (leaf depth 1)."""
    if depth < 1:
        return []
    trees = [leaf(t) for t in LEAVES]
    if depth == 1:
        return trees
    sub = enumerate_trees(depth - 1)
    trees += [Node("op", u, (c,)) for u in UNARY for c in sub]
    trees += [Node("op", b, (l, r)) for b in BINARY for l in sub for r in sub]
    return trees


def strip_slots(node: Node) -> tuple:
    """Structural key ignoring COF slot numbers."""
    if node.kind == "cof":
        return ("cof",)
    if node.kind in ("var", "const"):
        return (node.kind, node.value)
    return (node.value,) + tuple(strip_slots(c) for c in node.children)


# ---------------------------------------------------------------- infix reader

_TOKEN = re.compile(r"\s*(?:(?P<num>-?(?:\d+\.?\d*(?:e[-+]?\d+)?|inf|nan))|(?P<name>[A-Za-z_]\w*)|(?P<sym>[()+\-*/]))", re.I)
_SYM_OP = {"+": "add", "-": "sub", "*": "mul", "/": "div"}


def _lex(text: str) -> list[str]:
    out, pos = [], 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        # a '-' directly after an operator symbol or '(' starts a signed number
        signed = text[pos] == "-" and (not out or out[-1] in "(+-*/") and pos + 1 < len(text) and text[pos + 1] != " "
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ValueError(f"cannot read {text[pos:]!r}")
        if m.group("sym") == "-" and signed:
            m2 = _TOKEN.match(text, pos + 1)
            out.append("-" + m2.group(0).strip())
            pos = m2.end()
            continue
        out.append(m.group(0).strip())
        pos = m.end()
    return out


def read_infix(text: str) -> tuple[Node, list[float]]:
    """Parse the fully parenthesized infix rendering back into a tree.

    Numbers become COF slots; their values are returned in reading order.
    """
    toks = _lex(text)
    values: list[float] = []
    pos = 0

    def expr() -> Node:
        nonlocal pos
        t = toks[pos]
        if t == "(":
            pos += 1
            lhs = expr()
            op = _SYM_OP[toks[pos]]
            pos += 1
            rhs = expr()
            assert toks[pos] == ")"
            pos += 1
            return Node("op", op, (lhs, rhs))
        if t in UNARY:
            assert toks[pos + 1] == "("
            pos += 2
            arg = expr()
            assert toks[pos] == ")"
            pos += 1
            return Node("op", t, (arg,))
        pos += 1
        if t == "COF":
            return Node.cof(0)
        if re.fullmatch(r"x\d+", t):
            return Node.var(int(t[1:]))
        values.append(float(t))
        return Node.cof(0)

    tree = expr()
    if pos != len(toks):
        raise ValueError(f"trailing input {toks[pos:]}")
    return tree, values


# ---------------------------------------------------------------- metrics


def naive_mse(pred, target) -> float:
    s = 0.0
    for p, t in zip(pred, target):
        s += (p - t) * (p - t)
    return s / len(pred)


def naive_r2(pred, target) -> float:
    n = len(target)
    mean = math.fsum(target) / n
    ss_res = math.fsum((t - p) ** 2 for p, t in zip(pred, target))
    ss_tot = math.fsum((t - mean) ** 2 for t in target)
    return 1.0 - ss_res / ss_tot


def naive_pearson(pred, target) -> float:
    n = len(pred)
    mp = math.fsum(pred) / n
    mt = math.fsum(target) / n
    cov = math.fsum((p - mp) * (t - mt) for p, t in zip(pred, target))
    vp = math.fsum((p - mp) ** 2 for p in pred)
    vt = math.fsum((t - mt) ** 2 for t in target)
    return cov / math.sqrt(vp * vt)
