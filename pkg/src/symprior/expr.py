"""Expression core: vocabulary, trees, postfix templates, evaluation and
reverse-mode gradients with respect to template coefficients."""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PAD, BOS, EOS, COF = "PAD", "BOS", "EOS", "COF"
SPECIAL = (PAD, BOS, EOS)
BINARY = ("add", "sub", "mul", "div")
UNARY = ("sin", "cos")
TRIG = UNARY
OPERATORS = BINARY + UNARY
INFIX_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}

DEFAULT_PENALTY = 1e6

_VAR_RE = re.compile(r"^x(\d+)$")


class ExprError(ValueError):
    pass


class StackUnderflow(ExprError):
    pass


class LeftoverOperands(ExprError):
    pass


class UnknownToken(ExprError):
    pass


class ContainsRawConstant(ExprError):
    pass


class ArityMismatch(ExprError):
    pass


class DimensionMismatch(ExprError):
    pass


class AllSamplesNonFinite(ArithmeticError):
    pass


def var_index(token: str) -> int | None:
    m = _VAR_RE.match(token)
    return int(m.group(1)) if m else None


def arity(token: str) -> int:
    if token in BINARY:
        return 2
    if token in UNARY:
        return 1
    return 0


@dataclass(frozen=True)
class Vocab:
    """Token alphabet for postfix sequences over ``max_vars`` input variables.

    Ids are dense and depend only on ``max_vars``.
    """

    max_vars: int
    tokens: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if self.max_vars < 1:
            raise ValueError("max_vars must be >= 1")
        toks = SPECIAL + (COF,) + tuple(f"x{i}" for i in range(self.max_vars)) + BINARY + UNARY
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(toks)})

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownToken(token) from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def arity(self, token: str) -> int:
        return arity(token)

    @property
    def pad_id(self):
        return self._ids[PAD]

    @property
    def bos_id(self):
        return self._ids[BOS]

    @property
    def eos_id(self):
        return self._ids[EOS]

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(" ".join(self.tokens).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- trees


@dataclass(frozen=True)
class Node:
    """Expression tree node.

    ``kind`` is one of ``var`` (value = variable index), ``const`` (value = float),
    ``cof`` (value = 1-based slot index, 0 when unassigned) or ``op``
    (value = operator name).
    """

    kind: str
    value: object
    children: tuple["Node", ...] = ()

    @staticmethod
    def var(i: int) -> "Node":
        return Node("var", int(i))

    @staticmethod
    def const(c: float) -> "Node":
        return Node("const", float(c))

    @staticmethod
    def cof(slot: int = 0) -> "Node":
        return Node("cof", int(slot))

    @staticmethod
    def op(name: str, *children: "Node") -> "Node":
        if arity(name) != len(children) or name not in OPERATORS:
            raise ArityMismatch(f"{name} with {len(children)} children")
        return Node("op", name, tuple(children))

    @property
    def size(self) -> int:
        return 1 + sum(c.size for c in self.children)

    @property
    def depth(self) -> int:
        # a single leaf has depth 1
        return 1 + max((c.depth for c in self.children), default=0)

    def walk(self):
        """Pre-order traversal."""
        yield self
        for c in self.children:
            yield from c.walk()

    def token(self) -> str:
        if self.kind == "var":
            return f"x{self.value}"
        if self.kind == "cof":
            return COF
        if self.kind == "const":
            return repr(float(self.value))
        return str(self.value)

    def postfix(self) -> list[str]:
        out: list[str] = []
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded or not node.children:
                out.append(node.token())
            else:
                stack.append((node, True))
                for c in reversed(node.children):
                    stack.append((c, False))
        return out


@dataclass(frozen=True)
class PostfixTemplate:
    """A stack-valid, coefficient-abstracted postfix token sequence."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        check_stack(self.tokens)
        for t in self.tokens:
            if t in SPECIAL:
                raise UnknownToken(f"special marker {t} inside template")
            if t != COF and t not in OPERATORS and var_index(t) is None:
                if _is_number(t):
                    raise ContainsRawConstant(t)
                raise UnknownToken(t)

    @classmethod
    def from_string(cls, text: str) -> "PostfixTemplate":
        return cls(tuple(text.split()))

    def __str__(self):
        return " ".join(self.tokens)

    def __len__(self):
        return len(self.tokens)

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def num_cof(self) -> int:
        return sum(1 for t in self.tokens if t == COF)

    @property
    def complexity(self) -> int:
        return len(self.tokens)

    @property
    def num_operands(self) -> int:
        return sum(1 for t in self.tokens if arity(t) == 0)

    @property
    def num_trig(self) -> int:
        return sum(1 for t in self.tokens if t in TRIG)

    @property
    def max_var_index(self) -> int:
        return max((var_index(t) for t in self.tokens if var_index(t) is not None), default=-1)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def check_stack(tokens: Sequence[str]) -> None:
    """Raise unless ``tokens`` reduce to exactly one expression."""
    depth = 0
    for i, t in enumerate(tokens):
        a = arity(t)
        if depth < a:
            raise StackUnderflow(f"{t!r} at position {i} needs {a} operand(s), stack has {depth}")
        depth += 1 - a
    if depth != 1:
        if depth == 0:
            raise StackUnderflow("empty sequence")
        raise LeftoverOperands(f"{depth} operands left on stack")


def is_stack_valid(tokens: Sequence[str]) -> bool:
    try:
        check_stack(tokens)
    except ExprError:
        return False
    return True


def parse_postfix(tokens: Sequence[str], vocab: Vocab | None = None, allow_constants: bool = False) -> Node:
    """Build the tree whose postfix serialization is ``tokens``.

    COF slots are numbered 1..m in token order. Numeric literals are only
    accepted with ``allow_constants``.
    """
    stack: list[Node] = []
    slot = 0
    for i, t in enumerate(tokens):
        if vocab is not None and t not in vocab._ids and not (allow_constants and _is_number(t)):
            raise UnknownToken(t)
        if t in SPECIAL:
            raise UnknownToken(f"special marker {t}")
        a = arity(t)
        if a:
            if len(stack) < a:
                raise StackUnderflow(f"{t!r} at position {i} needs {a} operand(s), stack has {len(stack)}")
            args = stack[-a:]
            del stack[-a:]
            stack.append(Node("op", t, tuple(args)))
        elif t == COF:
            slot += 1
            stack.append(Node.cof(slot))
        elif var_index(t) is not None:
            stack.append(Node.var(var_index(t)))
        elif allow_constants and _is_number(t):
            stack.append(Node.const(float(t)))
        else:
            raise UnknownToken(t)
    if not stack:
        raise StackUnderflow("empty sequence")
    if len(stack) > 1:
        raise LeftoverOperands(f"{len(stack)} operands left on stack")
    return stack[0]


def to_postfix(tree: Node, vocab: Vocab | None = None) -> PostfixTemplate:
    toks = tree.postfix()
    for node in tree.walk():
        if node.kind == "const":
            raise ContainsRawConstant(node.value)
        if vocab is not None and node.kind == "var" and node.value >= vocab.max_vars:
            raise UnknownToken(node.token())
    return PostfixTemplate(tuple(toks))


def abstract_coefficients(tree: Node) -> PostfixTemplate:
    """Replace every numeric-constant leaf with COF."""
    toks = [COF if is_const else t for t, is_const in _tokens_with_const_flag(tree)]
    return PostfixTemplate(tuple(toks))


def _tokens_with_const_flag(tree: Node):
    out = []
    stack = [(tree, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded or not node.children:
            out.append((node.token(), node.kind == "const"))
        else:
            stack.append((node, True))
            for c in reversed(node.children):
                stack.append((c, False))
    return out


def complexity(template: PostfixTemplate) -> int:
    return len(template.tokens)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalResult:
    values: np.ndarray
    finite_mask: np.ndarray

    @property
    def all_finite(self) -> bool:
        return bool(self.finite_mask.all())


@dataclass(frozen=True)
class _Program:
    ops: tuple[str, ...]  # per position: 'var', 'cof', 'const' or operator name
    args: tuple[int, ...]  # var index / cof index (0-based) / -1
    consts: tuple[float, ...]
    children: tuple[tuple[int, ...], ...]
    num_cof: int
    max_var: int
    has_cof: tuple[bool, ...]  # subtree contains a coefficient slot


@functools.lru_cache(maxsize=4096)
def _compile(tokens: tuple[str, ...]) -> _Program:
    ops, args, consts, children = [], [], [], []
    stack: list[int] = []
    m = 0
    max_var = -1
    for pos, t in enumerate(tokens):
        a = arity(t)
        if a:
            if len(stack) < a:
                raise ArityMismatch(f"{t} at {pos}")
            ch = tuple(stack[-a:])
            del stack[-a:]
            ops.append(t)
            args.append(-1)
            consts.append(0.0)
            children.append(ch)
        elif t == COF:
            ops.append("cof")
            args.append(m)
            consts.append(0.0)
            children.append(())
            m += 1
        elif var_index(t) is not None:
            ops.append("var")
            args.append(var_index(t))
            max_var = max(max_var, var_index(t))
            consts.append(0.0)
            children.append(())
        elif _is_number(t):
            ops.append("const")
            args.append(-1)
            consts.append(float(t))
            children.append(())
        else:
            raise UnknownToken(t)
        stack.append(pos)
    if len(stack) != 1:
        raise ArityMismatch(f"{len(stack)} values left on stack")
    has_cof: list[bool] = []
    for op, ch in zip(ops, children):
        has_cof.append(op == "cof" or any(has_cof[c] for c in ch))
    return _Program(tuple(ops), tuple(args), tuple(consts), tuple(children), m, max_var, tuple(has_cof))


def _forward(prog: _Program, W: np.ndarray, X: np.ndarray) -> list[np.ndarray]:
    """Node values as arrays broadcastable to (R, N) for coefficient batch W (R, m)."""
    vals: list[np.ndarray] = []
    for op, arg, c, ch in zip(prog.ops, prog.args, prog.consts, prog.children):
        if op == "var":
            v = X[:, arg][None, :]
        elif op == "cof":
            v = W[:, arg][:, None]
        elif op == "const":
            v = np.full((1, 1), c)
        elif op == "add":
            v = vals[ch[0]] + vals[ch[1]]
        elif op == "sub":
            v = vals[ch[0]] - vals[ch[1]]
        elif op == "mul":
            v = vals[ch[0]] * vals[ch[1]]
        elif op == "div":
            v = vals[ch[0]] / vals[ch[1]]
        elif op == "sin":
            v = np.sin(vals[ch[0]])
        elif op == "cos":
            v = np.cos(vals[ch[0]])
        else:  # pragma: no cover - _compile rejects unknown tokens
            raise ArityMismatch(op)
        vals.append(v)
    return vals


def _check_inputs(prog: _Program, W: np.ndarray, X: np.ndarray) -> None:
    if X.ndim != 2:
        raise DimensionMismatch(f"X must be 2-D, got shape {X.shape}")
    if prog.max_var >= X.shape[1]:
        raise DimensionMismatch(f"template uses x{prog.max_var} but X has {X.shape[1]} columns")
    if W.shape[-1] != prog.num_cof:
        raise DimensionMismatch(f"expected {prog.num_cof} coefficients, got {W.shape[-1]}")


def _as_batch(W, m: int) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if m == 0:
        rows = W.shape[0] if W.ndim == 2 else 1
        return W.reshape(rows, 0)
    if W.shape[-1:] != (m,):
        raise DimensionMismatch(f"template has {m} coefficients, got shape {W.shape}")
    return W.reshape(-1, m)


def evaluate_batch(tokens: Sequence[str], W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate for a batch of coefficient vectors; returns (R, N)."""
    prog = _compile(tuple(tokens))
    W = _as_batch(W, prog.num_cof)
    X = np.asarray(X, dtype=np.float64)
    _check_inputs(prog, W, X)
    with np.errstate(all="ignore"):
        out = _forward(prog, W, X)[-1]
    return np.broadcast_to(out, (W.shape[0], X.shape[0])).copy()


def evaluate(template: PostfixTemplate | Sequence[str], w, X) -> EvalResult:
    """Stack-evaluate ``template`` on every row of ``X`` with coefficients ``w``.

    Division is not protected; non-finite outputs are reported and flagged.
    """
    tokens = template.tokens if isinstance(template, PostfixTemplate) else tuple(template)
    values = evaluate_batch(tokens, np.asarray(w, dtype=np.float64).reshape(1, -1), X)[0]
    return EvalResult(values, np.isfinite(values))


def evaluate_tree(tree: Node, X) -> np.ndarray:
    """Evaluate a constant-bearing tree (COF slots are not allowed)."""
    return evaluate_batch(tuple(tree.postfix()), np.zeros((1, 0)), X)[0]


def loss_and_grad_batch(
    tokens: Sequence[str], W, X, y, penalty: float = DEFAULT_PENALTY
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Penalized MSE and its gradient for each row of ``W``.

    Returns ``(loss (R,), grad (R, m), n_finite (R,))``. Non-finite samples add
    ``penalty`` each to the summed squared error and contribute no gradient.
    """
    prog = _compile(tuple(tokens))
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    W = _as_batch(W, prog.num_cof)
    _check_inputs(prog, W, X)
    R, N = W.shape[0], X.shape[0]
    if y.shape != (N,):
        raise DimensionMismatch(f"y has shape {y.shape}, expected ({N},)")
    with np.errstate(all="ignore"):
        vals = _forward(prog, W, X)
        pred = np.broadcast_to(vals[-1], (R, N))
        resid = pred - y
        finite = np.isfinite(resid)
        clean = bool(finite.all())
        if clean:
            n_finite = np.full(R, N)
            loss = np.einsum("ij,ij->i", resid, resid) / N
        else:
            n_finite = finite.sum(axis=1)
            sq = np.where(finite, resid * resid, 0.0)
            loss = (sq.sum(axis=1) + penalty * (N - n_finite)) / N
        grad = np.zeros((R, prog.num_cof))
        if prog.num_cof == 0:
            return loss, grad, n_finite

        adj: list[np.ndarray | None] = [None] * len(prog.ops)
        adj[-1] = (2.0 / N) * resid if clean else np.where(finite, (2.0 / N) * resid, 0.0)
        for pos in range(len(prog.ops) - 1, -1, -1):
            g = adj[pos]
            if g is None or not prog.has_cof[pos]:
                continue
            op, ch = prog.ops[pos], prog.children[pos]
            if op == "cof":
                if g.shape[1] == 1:
                    g = np.broadcast_to(g, (R, N))
                grad[:, prog.args[pos]] += g.sum(axis=1)
                continue
            if not ch:
                continue
            need = [prog.has_cof[c] for c in ch]
            if op == "add":
                parts = (g, g)
            elif op == "sub":
                parts = (g, -g if need[1] else None)
            elif op == "mul":
                parts = (g * vals[ch[1]] if need[0] else None, g * vals[ch[0]] if need[1] else None)
            elif op == "div":
                b = vals[ch[1]]
                q = g / b
                parts = (q, -q * (vals[ch[0]] / b) if need[1] else None)
            elif op == "sin":
                parts = (g * np.cos(vals[ch[0]]),)
            else:  # cos
                parts = (-g * np.sin(vals[ch[0]]),)
            for c, p, nd in zip(ch, parts, need):
                if not nd:
                    continue
                if not clean:
                    p = np.where(finite, p, 0.0)
                adj[c] = p if adj[c] is None else adj[c] + p
    return loss, grad, n_finite


def grad_w(template: PostfixTemplate | Sequence[str], w, X, y, penalty: float = DEFAULT_PENALTY):
    """Penalized MSE loss and its exact gradient with respect to ``w``."""
    tokens = template.tokens if isinstance(template, PostfixTemplate) else tuple(template)
    loss, grad, n_finite = loss_and_grad_batch(tokens, np.asarray(w, dtype=np.float64).reshape(1, -1), X, y, penalty)
    if n_finite[0] == 0:
        raise AllSamplesNonFinite("no sample produced a finite prediction")
    return float(loss[0]), grad[0]


def penalized_loss(tokens: Sequence[str], w, X, y, penalty: float = DEFAULT_PENALTY) -> float:
    pred = evaluate_batch(tuple(tokens), np.asarray(w, dtype=np.float64).reshape(1, -1), X)[0]
    resid = pred - np.asarray(y, dtype=np.float64)
    finite = np.isfinite(resid)
    return float((np.sum(resid[finite] ** 2) + penalty * np.count_nonzero(~finite)) / len(resid))


# ---------------------------------------------------------------- rendering


def _fmt(v: float) -> str:
    return repr(float(v))


def render_infix(template: PostfixTemplate | Sequence[str], w=None) -> str:
    """Fully parenthesized infix string; COF slots show ``w`` values or ``COF``."""
    tokens = template.tokens if isinstance(template, PostfixTemplate) else tuple(template)
    stack: list[str] = []
    k = 0
    for t in tokens:
        a = arity(t)
        if a == 2:
            rhs, lhs = stack.pop(), stack.pop()
            stack.append(f"({lhs} {INFIX_SYMBOL[t]} {rhs})")
        elif a == 1:
            stack.append(f"{t}({stack.pop()})")
        elif t == COF:
            stack.append(COF if w is None else _fmt(w[k]))
            k += 1
        else:
            stack.append(t)
    if len(stack) != 1:
        raise LeftoverOperands(f"{len(stack)} operands left")
    return stack[0]


def tree_has_constants(tree: Node) -> bool:
    return any(n.kind == "const" for n in tree.walk())
