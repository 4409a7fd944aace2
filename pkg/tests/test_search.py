import math

import numpy as np
import pytest

from symprior import search
from symprior.expr import PostfixTemplate, Vocab, is_stack_valid
from symprior.prior import PriorConfig, PriorModel
from symprior.search import (
    Reject,
    SamplerConfig,
    check_candidate,
    decoding_distribution,
    generate_pool,
    probe_points,
    recompute_proxy,
    sample_batch,
    semantic_filter,
)

BOX = ((1.0, 5.0), (1.0, 5.0))


class ToyModel:
    """Fixed next-token logits regardless of the prefix."""

    def __init__(self, vocab, logits: dict):
        self.vocab = vocab
        z = np.full(len(vocab), -np.inf)
        for tok, v in logits.items():
            z[vocab.id(tok)] = v
        self.z = z

    def next_logits(self, ids):
        return np.tile(self.z, (len(ids), 1))


TOY_LOGITS = {"x0": 2.0, "x1": 1.0, "COF": 0.5}


def analytic(logits, tau, k):
    items = sorted(logits.items(), key=lambda kv: -kv[1])[:k]
    w = {t: math.exp(v / tau) for t, v in items}
    s = sum(w.values())
    return {t: w.get(t, 0.0) / s for t in logits}


def toy_frequency_check(tau, k, n=10_000, seed=0):
    """Max standardized deviation between empirical and analytic frequencies."""
    vocab = Vocab(2)
    model = ToyModel(vocab, TOY_LOGITS)
    cfg = SamplerConfig(temperature=tau, top_k=k, l_max=1, c_max=1)
    rngs = [np.random.default_rng((seed, i)) for i in range(n)]
    samples = sample_batch(model, cfg, rngs)
    counts = {t: 0 for t in TOY_LOGITS}
    for s in samples:
        counts[s.tokens[0]] += 1
    worst = 0.0
    for t, p in analytic(TOY_LOGITS, tau, k).items():
        sd = math.sqrt(n * p * (1 - p))
        dev = abs(counts[t] - n * p)
        if sd == 0:
            if dev != 0:
                return math.inf
            continue
        worst = max(worst, dev / sd)
    return worst


@pytest.mark.parametrize("tau", [0.5, 1.0])
@pytest.mark.parametrize("k", [1, 2, 3])
def test_toy_frequencies_match_analytic(tau, k):
    assert toy_frequency_check(tau, k) <= 3.0


def test_decoding_distribution_properties():
    z = np.array([3.0, 1.0, 1.0, -2.0])
    greedy = decoding_distribution(z, 1e-6, 4)
    assert greedy.argmax() == 0 and greedy[0] == pytest.approx(1.0)
    np.testing.assert_array_equal(decoding_distribution(z, 1.0, 1), [1, 0, 0, 0])
    # ties at the k-th logit go to the lower id
    p = decoding_distribution(z, 1.0, 2)
    assert p[1] > 0 and p[2] == 0
    masked = decoding_distribution(z, 1.0, 2, np.array([False, True, True, True]))
    assert masked[0] == 0 and masked[1] == masked[2] == pytest.approx(0.5)
    with pytest.raises(search.DeadEnd):
        decoding_distribution(z, 1.0, 2, np.zeros(4, dtype=bool))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(temperature=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(c_max=30, l_max=20)


# ---------------------------------------------------------------- masks


def masked_completions(vocab, cfg, num_vars):
    """Every EOS-terminated sequence the masks admit (DFS)."""
    g = search._Grammar(vocab, num_vars)
    out = []

    def dfs(prefix, st):
        ok = g.allowed(st, cfg)
        for tok in np.flatnonzero(ok):
            if tok == vocab.eos_id:
                out.append(tuple(vocab.tokens[i] for i in prefix))
                continue
            if st.length + 1 > cfg.l_max:
                continue
            child = search._State(st.depth, st.operands, st.trig, st.length)
            g.advance(child, tok)
            dfs(prefix + [tok], child)

    dfs([], search._State())
    return out


def all_valid_templates(alphabet, l_max, max_term, max_trig):
    from itertools import product

    out = set()
    for n in range(1, l_max + 1):
        for seq in product(alphabet, repeat=n):
            if not is_stack_valid(seq):
                continue
            if sum(1 for t in seq if t in ("COF", "x0")) > max_term:
                continue
            if sum(1 for t in seq if t in ("sin", "cos")) > max_trig:
                continue
            out.add(seq)
    return out


@pytest.mark.parametrize("l_max,max_term,max_trig", [(1, 20, 4), (3, 20, 4), (5, 2, 1), (6, 3, 2), (6, 20, 4)])
def test_masks_are_sound_and_complete(l_max, max_term, max_trig):
    vocab = Vocab(1)
    cfg = SamplerConfig(l_max=l_max, c_max=l_max, max_term=max_term, max_trig_vars=max_trig)
    found = masked_completions(vocab, cfg, 1)
    assert len(found) == len(set(found))
    alphabet = ("COF", "x0", "add", "sub", "mul", "div", "sin", "cos")
    assert set(found) == all_valid_templates(alphabet, l_max, max_term, max_trig)


def test_variables_beyond_dataset_width_are_masked():
    vocab = Vocab(4)
    model = PriorModel.initialize(PriorConfig(seed=0), vocab)
    samples = sample_batch(model, SamplerConfig(), [np.random.default_rng(i) for i in range(50)], num_vars=2)
    for s in samples:
        assert not any(t in ("x2", "x3") for t in s.tokens)


# ---------------------------------------------------------------- filters


def test_semantic_filter():
    probes = probe_points(BOX, 16, 0)
    assert semantic_filter(PostfixTemplate.from_string("COF x0 x0 sub div"), probes) == (False, "zero-denominator")
    assert semantic_filter(PostfixTemplate.from_string("x1 x0 sin x0 sin sub div"), probes)[0] is False
    # a COF inside the difference is not a syntactic zero; at w = 1 this one
    # is still zero everywhere and falls to the probe check instead
    assert semantic_filter(PostfixTemplate.from_string("x1 COF x0 mul x0 sub div"), probes) == (False, "undefined-at-probes")
    assert semantic_filter(PostfixTemplate.from_string("x1 x0 COF sub div"), probes) == (True, None)
    assert semantic_filter(PostfixTemplate.from_string("COF x0 mul"), probes) == (True, None)


def test_check_candidate_reasons():
    cfg = SamplerConfig(l_max=10, c_max=5, max_term=3, max_trig_vars=1)
    probes = probe_points(BOX, 16, 0)
    assert check_candidate(("x0", "add"), True, cfg, probes, 2) is Reject.SYNTAX
    assert check_candidate(("x2",), True, cfg, probes, 2) is Reject.SYNTAX
    assert check_candidate(("x0", "x1"), False, cfg, probes, 2) is Reject.OVERLENGTH
    assert check_candidate(tuple("x0 x1 add x0 add x1 add".split()), True, cfg, probes, 2) is Reject.BUDGET
    assert check_candidate(tuple("x0 sin cos".split()), True, cfg, probes, 2) is Reject.BUDGET
    assert check_candidate(tuple("x0 x1 add sin".split()), True, cfg, probes, 2) is None
    assert check_candidate(tuple("x0 x1 add sin x1 mul".split()), True, cfg, probes, 2) is Reject.COMPLEXITY
    assert check_candidate(tuple("x1 x0 x0 sub div".split()), True, cfg, probes, 2) is Reject.SEMANTIC


def random_model(seed=0, vocab=Vocab(2)):
    return PriorModel.initialize(PriorConfig(d_model=16, num_heads=2, num_layers=1, ffn_dim=16, init_scale=0.5, seed=seed), vocab)


def pool_soundness(model, cfg, num_vars, box):
    """Return (survivors, violations, worst proxy error) for one pool."""
    pool = generate_pool(model, cfg, num_vars, box)
    probes = probe_points(box, cfg.semantic_probe_count, cfg.seed)
    violations = 0
    worst = 0.0
    for c in pool:
        t = c.tokens
        ok = (
            is_stack_valid(t)
            and len(t) <= cfg.c_max
            and sum(1 for x in t if x == "COF" or x.startswith("x")) <= cfg.max_term
            and sum(1 for x in t if x in ("sin", "cos")) <= cfg.max_trig_vars
            and semantic_filter(PostfixTemplate(t), probes)[0]
        )
        violations += not ok
        worst = max(worst, abs(recompute_proxy(model, t, cfg, num_vars) - c.proxy_score))
    return pool, violations, worst


def test_pool_survivors_revalidate_and_proxy_recomputes():
    cfg = SamplerConfig(num_samples=300, max_term=4, max_trig_vars=1, seed=3)
    pool, violations, worst = pool_soundness(random_model(), cfg, 2, BOX)
    assert len(pool) > 0 and violations == 0 and worst <= 1e-9
    total = pool.stats["survivors"] + pool.stats["duplicates"] + sum(pool.stats["rejected"].values())
    assert total == cfg.num_samples


def test_pool_is_deterministic_and_deduplicated():
    cfg = SamplerConfig(num_samples=100, seed=5)
    a = generate_pool(random_model(), cfg, 2, BOX)
    b = generate_pool(random_model(), cfg, 2, BOX)
    assert [c.tokens for c in a] == [c.tokens for c in b]
    assert len({c.tokens for c in a}) == len(a)
    scores = [c.proxy_score for c in a]
    assert scores == sorted(scores, reverse=True)


def test_empty_pool():
    with pytest.raises(search.EmptyPool):
        generate_pool(random_model(), SamplerConfig(num_samples=0), 2, BOX)


def test_uniform_validity_is_low():
    rate = search.uniform_sampler_validity(Vocab(2), SamplerConfig(), 2, 2000, 0)
    assert 0.0 < rate < 0.5
