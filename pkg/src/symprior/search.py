"""Prior-guided template sampling with decoding-time constraint masks,
validity filtering and proxy-score ranking."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .expr import (
    BINARY,
    COF,
    EOS,
    TRIG,
    UNARY,
    PostfixTemplate,
    arity,
    evaluate_batch,
    is_stack_valid,
    parse_postfix,
    var_index,
)
from .prior import forward
from .utils import derive_seed


class SearchError(RuntimeError):
    pass


class DeadEnd(SearchError):
    pass


class EmptyPool(SearchError):
    def __init__(self, msg, stats=None):
        super().__init__(msg)
        self.stats = stats or {}


class Reject(str, Enum):
    SYNTAX = "Syntax"
    SEMANTIC = "Semantic"
    COMPLEXITY = "Complexity"
    BUDGET = "Budget"
    OVERLENGTH = "Overlength"


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.8
    top_k: int = 10
    num_samples: int = 200
    l_max: int = 20
    c_max: int = 12
    max_term: int = 20
    max_trig_vars: int = 4
    seed: int = 0
    semantic_probe_count: int = 16
    use_masks: bool = True
    dead_end_retries: int = 32

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.c_max > self.l_max:
            raise ValueError("c_max must not exceed l_max")
        if self.max_term < 1 or self.max_trig_vars < 1:
            raise ValueError("budgets must be >= 1")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")


@dataclass
class Candidate:
    template: PostfixTemplate | None
    tokens: tuple[str, ...]
    proxy_score: float
    rejected_reason: Reject | None = None

    @property
    def complexity(self) -> int:
        return len(self.tokens)

    def as_record(self) -> dict:
        return {"tokens": " ".join(self.tokens), "proxy_score": self.proxy_score, "complexity": self.complexity}


# ---------------------------------------------------------------- decoding


@dataclass
class _State:
    depth: int = 0
    operands: int = 0
    trig: int = 0
    length: int = 0


class _Grammar:
    """Per-token arity tables for a vocabulary and a dataset width."""

    def __init__(self, vocab, num_vars: int):
        toks = vocab.tokens
        self.vocab = vocab
        self.arity = np.array([arity(t) for t in toks])
        self.terminal = np.array([t == COF or var_index(t) is not None for t in toks])
        self.in_range = np.array([var_index(t) is None or var_index(t) < num_vars for t in toks])
        self.unary = np.array([t in UNARY for t in toks])
        self.binary = np.array([t in BINARY for t in toks])
        self.trig = np.array([t in TRIG for t in toks])
        self.eos = vocab.eos_id
        self.forbidden = np.zeros(len(toks), dtype=bool)
        self.forbidden[[vocab.pad_id, vocab.bos_id]] = True

    def allowed(self, st: _State, config: SamplerConfig) -> np.ndarray:
        ok = ~self.forbidden & self.in_range
        if not config.use_masks:
            return ok
        s = st.depth
        rem = config.l_max - (st.length + 1)  # tokens left after this one
        ok = ok & (
            (self.terminal & (s <= rem) & (st.operands < config.max_term))
            | (self.unary & (s >= 1) & (s - 1 <= rem) & (st.trig < config.max_trig_vars))
            | (self.binary & (s >= 2) & (s - 2 <= rem))
        )
        ok[self.eos] = s == 1
        return ok

    def advance(self, st: _State, tok: int) -> None:
        st.depth += 1 - int(self.arity[tok])
        st.operands += int(self.terminal[tok])
        st.trig += int(self.trig[tok])
        st.length += 1


def decoding_distribution(logits: np.ndarray, temperature: float, top_k: int, allowed: np.ndarray | None = None) -> np.ndarray:
    """Temperature-scaled, top-k truncated, renormalized distribution.

    Disallowed tokens are removed before truncation; ties at the k-th logit
    are broken towards the lower token id.
    """
    z = np.asarray(logits, dtype=np.float64) / temperature
    if allowed is not None:
        z = np.where(allowed, z, -np.inf)
    finite = np.isfinite(z)
    n_ok = int(finite.sum())
    if n_ok == 0:
        raise DeadEnd("no admissible token")
    if top_k < n_ok:
        order = np.argsort(-z, kind="stable")
        keep = np.zeros_like(finite)
        keep[order[:top_k]] = True
        z = np.where(keep, z, -np.inf)
    z = z - z[np.isfinite(z)].max()
    p = np.exp(z)
    return p / p.sum()


def draw(probs: np.ndarray, u: float) -> int:
    c = np.cumsum(probs)
    i = int(np.searchsorted(c, u * c[-1], side="right"))
    i = min(i, len(probs) - 1)
    while probs[i] == 0.0:  # guard against landing on a zero-width bucket at the end
        i -= 1
    return i


@dataclass
class Sample:
    tokens: tuple[str, ...]
    proxy_score: float
    ended: bool  # EOS produced (otherwise L_max reached)
    retries: int = 0


def sample_batch(model, config: SamplerConfig, rngs: list[np.random.Generator], num_vars: int | None = None) -> list[Sample]:
    """Autoregressively sample one sequence per generator.

    All slots advance in lock-step; a slot whose admissible set empties is
    restarted from BOS with its own generator, up to ``dead_end_retries``.
    """
    vocab = model.vocab
    num_vars = vocab.max_vars if num_vars is None else num_vars
    g = _Grammar(vocab, num_vars)
    n = len(rngs)
    ids = [[vocab.bos_id] for _ in range(n)]
    states = [_State() for _ in range(n)]
    scores = [0.0] * n
    retries = [0] * n
    done = [False] * n
    ended = [False] * n
    while not all(done):
        active = [i for i in range(n) if not done[i]]
        groups: dict[int, list[int]] = {}
        for i in active:
            groups.setdefault(len(ids[i]), []).append(i)
        for length, members in sorted(groups.items()):
            logits = model.next_logits(np.array([ids[i] for i in members]))
            for row, i in enumerate(members):
                st = states[i]
                ok = g.allowed(st, config)
                try:
                    p = decoding_distribution(logits[row], config.temperature, config.top_k, ok)
                except DeadEnd:
                    retries[i] += 1
                    if retries[i] > config.dead_end_retries:
                        raise DeadEnd(f"slot {i}: no admissible token after {config.dead_end_retries} retries") from None
                    ids[i] = [vocab.bos_id]
                    states[i] = _State()
                    scores[i] = 0.0
                    continue
                tok = draw(p, rngs[i].random())
                scores[i] += math.log(p[tok])
                if tok == g.eos:
                    done[i] = ended[i] = True
                    continue
                ids[i].append(tok)
                g.advance(st, tok)
                if st.length >= config.l_max:
                    done[i] = True
    return [Sample(tuple(vocab.decode(ids[i][1:])), scores[i], ended[i], retries[i]) for i in range(n)]


def sample_one(model, config: SamplerConfig, rng: np.random.Generator, num_vars: int | None = None) -> tuple[tuple[str, ...], float]:
    s = sample_batch(model, config, [rng], num_vars)[0]
    return s.tokens, s.proxy_score


def slot_rng(seed: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, "sample", slot))


def recompute_proxy(model, tokens, config: SamplerConfig, num_vars: int | None = None) -> float:
    """Replay the decoding masks with one forward pass per prefix."""
    vocab = model.vocab
    g = _Grammar(vocab, vocab.max_vars if num_vars is None else num_vars)
    st = _State()
    ids = [vocab.bos_id]
    total = 0.0
    seq = list(vocab.encode(tokens))
    if len(seq) < config.l_max:
        seq.append(vocab.eos_id)
    for tok in seq:
        probs = forward(model, ids)
        p = decoding_distribution(np.log(probs), config.temperature, config.top_k, g.allowed(st, config))
        total += math.log(p[tok])
        if tok != vocab.eos_id:
            ids.append(tok)
            g.advance(st, tok)
    return total


# ---------------------------------------------------------------- filters


def _zero_denominator(node) -> bool:
    if node.kind == "op" and node.value == "div":
        den = node.children[1]
        if den.kind == "op" and den.value == "sub":
            a, b = den.children
            if a == b and not any(n.kind == "cof" for n in a.walk()):
                return True
    return any(_zero_denominator(c) for c in node.children)


def probe_points(input_box, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "probe"))
    lo = np.array([b[0] for b in input_box], dtype=np.float64)
    hi = np.array([b[1] for b in input_box], dtype=np.float64)
    return lo + (hi - lo) * rng.random((count, len(lo)))


def semantic_filter(template: PostfixTemplate, probes: np.ndarray) -> tuple[bool, str | None]:
    """Reject syntactic zero denominators and templates undefined at every probe
    (coefficients set to one)."""
    tree = parse_postfix(template.tokens)
    if _zero_denominator(tree):
        return False, "zero-denominator"
    vals = evaluate_batch(template.tokens, np.ones((1, template.num_cof)), probes)[0]
    if not np.isfinite(vals).any():
        return False, "undefined-at-probes"
    return True, None


def check_candidate(tokens, ended: bool, config: SamplerConfig, probes: np.ndarray, num_vars: int) -> Reject | None:
    """Full filter chain; returns the first failing reason or None."""
    tokens = tuple(tokens)
    if not ended and not is_stack_valid(tokens):
        return Reject.OVERLENGTH
    if not tokens or any(t in ("PAD", "BOS", EOS) for t in tokens) or not is_stack_valid(tokens):
        return Reject.SYNTAX
    if any(var_index(t) is not None and var_index(t) >= num_vars for t in tokens):
        return Reject.SYNTAX
    if len(tokens) > config.l_max:
        return Reject.OVERLENGTH
    n_operands = sum(1 for t in tokens if arity(t) == 0)
    n_trig = sum(1 for t in tokens if t in TRIG)
    if n_operands > config.max_term or n_trig > config.max_trig_vars:
        return Reject.BUDGET
    if len(tokens) > config.c_max:
        return Reject.COMPLEXITY
    ok, _ = semantic_filter(PostfixTemplate(tokens), probes)
    if not ok:
        return Reject.SEMANTIC
    return None


def rank_by_proxy(pool: list[Candidate]) -> list[Candidate]:
    """Proxy score descending; ties by complexity then token string."""
    return sorted(pool, key=lambda c: (-c.proxy_score, c.complexity, " ".join(c.tokens)))


@dataclass
class Pool:
    candidates: list[Candidate]
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


def generate_pool(model, config: SamplerConfig, num_vars: int, input_box, batch_size: int = 512) -> Pool:
    """Draw ``num_samples`` sequences, filter, de-duplicate and rank them.

    Slot ``i`` samples with a generator seeded from ``(seed, i)``.
    """
    probes = probe_points(input_box, config.semantic_probe_count, config.seed)
    reasons: Counter = Counter()
    best: dict[tuple[str, ...], Candidate] = {}
    duplicates = 0
    dead = 0
    for start in range(0, config.num_samples, batch_size):
        slots = range(start, min(start + batch_size, config.num_samples))
        samples = sample_batch(model, config, [slot_rng(config.seed, i) for i in slots], num_vars)
        for s in samples:
            dead += s.retries
            why = check_candidate(s.tokens, s.ended, config, probes, num_vars)
            if why is not None:
                reasons[why.value] += 1
                continue
            prev = best.get(s.tokens)
            if prev is not None:
                duplicates += 1
                if s.proxy_score <= prev.proxy_score:
                    continue
            best[s.tokens] = Candidate(PostfixTemplate(s.tokens), s.tokens, s.proxy_score)
    survivors = rank_by_proxy(list(best.values()))
    stats = {
        "sampled": config.num_samples,
        "survivors": len(survivors),
        "duplicates": duplicates,
        "dead_end_retries": dead,
        "rejected": {r.value: reasons.get(r.value, 0) for r in Reject},
    }
    if not survivors:
        raise EmptyPool(f"no candidate survived filtering ({stats})", stats)
    return Pool(survivors, stats)


def uniform_sampler_validity(vocab, config: SamplerConfig, num_vars: int, n: int, seed: int) -> float:
    """Stack-validity rate of a uniform token sampler without grammar masks."""
    g = _Grammar(vocab, num_vars)
    ok_tokens = np.flatnonzero(~g.forbidden & g.in_range)
    rng = np.random.default_rng(derive_seed(seed, "uniform"))
    valid = 0
    for _ in range(n):
        toks = []
        ended = False
        while len(toks) < config.l_max:
            t = int(ok_tokens[rng.integers(len(ok_tokens))])
            if t == vocab.eos_id:
                ended = True
                break
            toks.append(vocab.tokens[t])
        if toks and is_stack_valid(toks) and (ended or len(toks) == config.l_max):
            valid += 1
    return valid / n


def prior_sampler_validity(model, num_vars: int, n: int, seed: int, l_max: int = 20) -> float:
    """Stack-validity rate of sequences drawn from the raw prior distribution
    (temperature 1, no top-k, no grammar masks)."""
    config = SamplerConfig(temperature=1.0, top_k=len(model.vocab), l_max=l_max, c_max=min(12, l_max), use_masks=False)
    rngs = [np.random.default_rng(derive_seed(seed, "prior-validity", i)) for i in range(n)]
    samples = sample_batch(model, config, rngs, num_vars)
    valid = sum(1 for s in samples if s.tokens and is_stack_valid(s.tokens))
    return valid / n
