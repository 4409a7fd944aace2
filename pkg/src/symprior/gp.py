"""Genetic-programming bootstrap that produces the template corpus."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .expr import (
    BINARY,
    DEFAULT_PENALTY,
    UNARY,
    ExprError,
    Node,
    PostfixTemplate,
    abstract_coefficients,
    evaluate_tree,
)
from .utils import derive_seed


class CorpusTooSmall(RuntimeError):
    pass


@dataclass(frozen=True)
class GpConfig:
    population_size: int = 200
    generations: int = 10
    max_depth: int = 4
    parsimony_coefficient: float = 0.001
    tournament_size: int = 20
    crossover_prob: float = 0.7
    subtree_mutation_prob: float = 0.1
    point_mutation_prob: float = 0.1
    constant_range: tuple[float, float] = (-5.0, 5.0)
    point_sigma: float = 0.5
    seed: int = 0
    min_fit_r2: float = 0.0
    penalty: float = DEFAULT_PENALTY

    def __post_init__(self):
        probs = (self.crossover_prob, self.subtree_mutation_prob, self.point_mutation_prob)
        if any(not 0.0 <= p <= 1.0 for p in probs) or sum(probs) > 1.0 + 1e-12:
            raise ValueError("operator probabilities must lie in [0, 1] and sum to at most 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")


# ---------------------------------------------------------------- trees


def _terminal(d: int, config: GpConfig, rng: np.random.Generator) -> Node:
    if rng.random() < d / (d + 1):
        return Node.var(int(rng.integers(d)))
    lo, hi = config.constant_range
    return Node.const(float(lo + (hi - lo) * rng.random()))


def random_tree(depth: int, d: int, config: GpConfig, rng: np.random.Generator, full: bool) -> Node:
    """Grow or full tree with depth <= ``depth`` (a leaf has depth 1)."""
    n_term = d + 1
    n_ops = len(BINARY) + len(UNARY)
    if depth <= 1 or (not full and rng.random() < n_term / (n_term + n_ops)):
        return _terminal(d, config, rng)
    ops = BINARY + UNARY
    name = ops[int(rng.integers(len(ops)))]
    k = 2 if name in BINARY else 1
    return Node("op", name, tuple(random_tree(depth - 1, d, config, rng, full) for _ in range(k)))


def init_population(config: GpConfig, d: int, rng: np.random.Generator) -> list[Node]:
    """Ramped half-and-half initialization."""
    if d < 1:
        raise ValueError("need at least one input variable")
    lo = min(2, config.max_depth)
    depths = list(range(lo, config.max_depth + 1))
    pop = []
    for i in range(config.population_size):
        depth = depths[i % len(depths)]
        pop.append(random_tree(depth, d, config, rng, full=(i // len(depths)) % 2 == 0))
    return pop


def _subtrees(tree: Node) -> list[tuple[tuple[int, ...], Node]]:
    out = []
    stack = [((), tree)]
    while stack:
        path, node = stack.pop()
        out.append((path, node))
        for i in range(len(node.children) - 1, -1, -1):
            stack.append((path + (i,), node.children[i]))
    return out


def _replace(tree: Node, path: tuple[int, ...], new: Node) -> Node:
    if not path:
        return new
    i = path[0]
    kids = list(tree.children)
    kids[i] = _replace(kids[i], path[1:], new)
    return Node(tree.kind, tree.value, tuple(kids))


def _depth_at(path) -> int:
    return len(path) + 1


def crossover(a: Node, b: Node, max_depth: int, rng: np.random.Generator) -> Node:
    """Replace a random subtree of ``a`` with a random subtree of ``b``."""
    sa, sb = _subtrees(a), _subtrees(b)
    path, _ = sa[int(rng.integers(len(sa)))]
    _, donor = sb[int(rng.integers(len(sb)))]
    child = _replace(a, path, donor)
    return child if child.depth <= max_depth else a


def subtree_mutation(a: Node, d: int, config: GpConfig, rng: np.random.Generator) -> Node:
    sa = _subtrees(a)
    path, _ = sa[int(rng.integers(len(sa)))]
    room = config.max_depth - _depth_at(path) + 1
    new = random_tree(max(room, 1), d, config, rng, full=False)
    child = _replace(a, path, new)
    return child if child.depth <= config.max_depth else a


def point_mutation(a: Node, d: int, config: GpConfig, rng: np.random.Generator) -> Node:
    """Perturb a constant, or swap a variable / same-arity operator."""
    sa = _subtrees(a)
    path, node = sa[int(rng.integers(len(sa)))]
    if node.kind == "const":
        new = Node.const(node.value + rng.normal(0.0, config.point_sigma))
    elif node.kind == "var":
        new = Node.var(int(rng.integers(d)))
    else:
        pool = BINARY if node.value in BINARY else UNARY
        new = Node("op", pool[int(rng.integers(len(pool)))], node.children)
    return _replace(a, path, new)


# ---------------------------------------------------------------- fitness


def penalized_rmse(pred: np.ndarray, y: np.ndarray, penalty: float = DEFAULT_PENALTY) -> float:
    resid = pred - y
    finite = np.isfinite(resid)
    sq = float(np.sum(resid[finite] ** 2)) + penalty * int(np.count_nonzero(~finite))
    return math.sqrt(sq / len(y))


def fitness(tree: Node, X, y, parsimony: float, penalty: float = DEFAULT_PENALTY) -> float:
    """RMSE of the tree's predictions plus ``parsimony`` per node (lower is better)."""
    pred = evaluate_tree(tree, X)
    return penalized_rmse(pred, np.asarray(y, dtype=np.float64), penalty) + parsimony * tree.size


@dataclass
class GpRun:
    population: list[Node]  # final population, best first
    fitnesses: list[float]
    champions: list[tuple[int, Node, float]] = field(default_factory=list)  # (generation, tree, fitness)
    history: list[tuple[int, Node, float]] = field(default_factory=list, repr=False)  # every evaluated individual

    @property
    def best_history(self) -> list[float]:
        return [f for _, _, f in self.champions]


def _rank(pop: list[Node], fits: list[float]) -> list[int]:
    return sorted(range(len(pop)), key=lambda i: (fits[i], i))


def _tournament(fits: list[float], k: int, rng: np.random.Generator) -> int:
    idx = rng.integers(len(fits), size=k)
    return int(min(idx, key=lambda i: (fits[i], i)))


def run_gp(config: GpConfig, X, y, rng: np.random.Generator | None = None) -> GpRun:
    """Tournament-selection GP with elitism of one; deterministic given the seed."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[1]
    rng = np.random.default_rng(config.seed) if rng is None else rng

    def score(pop):
        return [fitness(t, X, y, config.parsimony_coefficient, config.penalty) for t in pop]

    pop = init_population(config, d, rng)
    fits = score(pop)
    history = [(0, t, f) for t, f in zip(pop, fits)]
    champions = []
    best = _rank(pop, fits)[0]
    champions.append((0, pop[best], fits[best]))
    p_cx = config.crossover_prob
    p_sub = p_cx + config.subtree_mutation_prob
    p_pt = p_sub + config.point_mutation_prob
    k = min(config.tournament_size, config.population_size)
    for gen in range(1, config.generations + 1):
        new_pop = [pop[best]]
        while len(new_pop) < config.population_size:
            parent = pop[_tournament(fits, k, rng)]
            r = rng.random()
            if r < p_cx:
                other = pop[_tournament(fits, k, rng)]
                child = crossover(parent, other, config.max_depth, rng)
            elif r < p_sub:
                child = subtree_mutation(parent, d, config, rng)
            elif r < p_pt:
                child = point_mutation(parent, d, config, rng)
            else:
                child = parent
            new_pop.append(child)
        pop = new_pop
        fits = score(pop)
        history.extend((gen, t, f) for t, f in zip(pop, fits))
        best = _rank(pop, fits)[0]
        champions.append((gen, pop[best], fits[best]))
    order = _rank(pop, fits)
    return GpRun([pop[i] for i in order], [fits[i] for i in order], champions, history)


def evolve(config: GpConfig, X, y) -> list[Node]:
    """Final population sorted by fitness."""
    return run_gp(config, X, y).population


# ---------------------------------------------------------------- corpus


@dataclass(frozen=True)
class CorpusEntry:
    template: PostfixTemplate
    source_dataset: str
    train_r2: float
    relabeled: bool = False

    def as_record(self) -> dict:
        return {
            "dataset": self.source_dataset,
            "tokens": " ".join(self.template.tokens),
            "train_r2": self.train_r2,
            "relabeled": self.relabeled,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CorpusEntry":
        return cls(
            PostfixTemplate.from_string(rec["tokens"]),
            rec["dataset"],
            float(rec["train_r2"]),
            bool(rec.get("relabeled", False)),
        )


def _train_r2(tree: Node, X, y) -> float:
    pred = evaluate_tree(tree, X)
    if not np.isfinite(pred).all():
        return -math.inf
    try:
        return metrics.r2(pred, y)
    except metrics.MetricError:
        return -math.inf


def harvest(run: GpRun, name: str, X, y, M: int, l_max: int, min_fit_r2: float) -> list[CorpusEntry]:
    """Rank every individual evaluated during the run by fitness and keep the
    top ``M`` distinct abstracted templates passing the length and fit filters."""
    cands = [(f, i, t) for i, (_, t, f) in enumerate(run.history)]
    cands.sort(key=lambda c: (c[0], c[1]))
    seen: set[tuple[str, ...]] = set()
    out: list[CorpusEntry] = []
    for _, _, tree in cands:
        if len(out) >= M:
            break
        try:
            tmpl = abstract_coefficients(tree)
        except ExprError:
            continue
        if tmpl.length > l_max or tmpl.tokens in seen:
            continue
        r2v = _train_r2(tree, X, y)
        if not r2v >= min_fit_r2:
            continue
        seen.add(tmpl.tokens)
        out.append(CorpusEntry(tmpl, name, r2v))
    return out


def relabel(template: PostfixTemplate, perm) -> PostfixTemplate:
    """Rename variable ``xi`` to ``x{perm[i]}``."""
    return PostfixTemplate(tuple(f"x{perm[int(t[1:])]}" if t[0] == "x" else t for t in template.tokens))


def relabel_entries(entries: list[CorpusEntry], d: int, extra: int, rng: np.random.Generator) -> list[CorpusEntry]:
    """Append up to ``extra`` copies of each entry under distinct random
    permutations of the ``d`` input variables.

    A motif such as ``COF x2 mul sin`` found on one dataset then also
    appears over the other variable slots.
    """
    if extra <= 0 or d < 2:
        return list(entries)
    perms = list(itertools.permutations(range(d)))[1:]
    out = list(entries)
    seen = {e.template.tokens for e in entries}
    for e in entries:
        for j in rng.permutation(len(perms))[:extra]:
            t = relabel(e.template, perms[j])
            if t.tokens not in seen:
                seen.add(t.tokens)
                out.append(CorpusEntry(t, e.source_dataset, e.train_r2, relabeled=True))
    return out


def build_corpus(
    datasets, config: GpConfig, M: int = 1000, l_max: int = 64, min_entries: int = 1, relabel_extra: int = 0
) -> list[CorpusEntry]:
    """Run GP on each ``(name, X, y)`` dataset and aggregate abstracted templates.

    Dataset ``i`` evolves with a seed derived from ``(config.seed, i)``;
    templates are de-duplicated within a dataset only. With
    ``relabel_extra > 0`` each harvested template is also added under that
    many random variable permutations.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    corpus: list[CorpusEntry] = []
    for i, (name, X, y) in enumerate(datasets):
        rng = np.random.default_rng(derive_seed(config.seed, "gp", i))
        run = run_gp(config, X, y, rng)
        found = harvest(run, name, X, y, M, l_max, config.min_fit_r2)
        corpus.extend(relabel_entries(found, np.shape(X)[1], relabel_extra, rng))
    if len(corpus) < min_entries:
        raise CorpusTooSmall(f"corpus has {len(corpus)} entries, need at least {min_entries}")
    return corpus
