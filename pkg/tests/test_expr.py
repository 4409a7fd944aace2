import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symprior import expr
from symprior.expr import (
    ContainsRawConstant,
    LeftoverOperands,
    Node,
    PostfixTemplate,
    StackUnderflow,
    UnknownToken,
    Vocab,
    abstract_coefficients,
    evaluate,
    evaluate_batch,
    grad_w,
    loss_and_grad_batch,
    parse_postfix,
    render_infix,
    to_postfix,
)

from oracles import ALPHABET, enumerate_trees, is_tree, read_infix, strip_slots

SIN_TEMPLATE = PostfixTemplate.from_string("COF x0 mul COF x1 mul sin add")


# ---------------------------------------------------------------- vocab


def test_vocab_order_and_ids_are_stable():
    v = Vocab(2)
    assert v.tokens[:4] == ("PAD", "BOS", "EOS", "COF")
    assert v.tokens[4:6] == ("x0", "x1")
    assert v.decode(v.encode(["COF", "x1", "mul"])) == ["COF", "x1", "mul"]
    assert Vocab(2).fingerprint() == v.fingerprint() != Vocab(3).fingerprint()


def test_vocab_unknown_token():
    with pytest.raises(UnknownToken):
        Vocab(2).id("x7")


# ---------------------------------------------------------------- parsing


def test_parse_examples():
    tree = parse_postfix(["COF", "x0", "mul", "COF", "x1", "mul", "sin", "add"])
    assert tree.value == "add" and tree.size == 8 and tree.depth == 4
    assert [n.value for n in tree.walk() if n.kind == "cof"] == [1, 2]
    with pytest.raises(StackUnderflow):
        parse_postfix(["x0", "add"])
    with pytest.raises(LeftoverOperands):
        parse_postfix(["x0", "x1"])
    with pytest.raises(StackUnderflow):
        parse_postfix([])
    with pytest.raises(UnknownToken):
        parse_postfix(["x0", "pow"])
    with pytest.raises(UnknownToken):
        parse_postfix(["x0", "BOS"])
    with pytest.raises(UnknownToken):
        parse_postfix(["x3"], Vocab(2))


def test_parse_validity_matches_split_oracle_exhaustively():
    mismatches = 0
    for n in range(1, 6):
        for seq in itertools.product(ALPHABET, repeat=n):
            try:
                parse_postfix(seq)
                ok = True
            except (StackUnderflow, LeftoverOperands):
                ok = False
            mismatches += ok != is_tree(seq)
            mismatches += expr.is_stack_valid(seq) != is_tree(seq)
    assert mismatches == 0


def test_round_trip_on_all_depth3_trees():
    trees = enumerate_trees(3)
    assert len(trees) == 8193
    for t in trees:
        tmpl = to_postfix(t)
        back = parse_postfix(tmpl.tokens)
        assert strip_slots(back) == strip_slots(t)
        assert to_postfix(back) == tmpl


def test_template_rejects_constants_and_markers():
    with pytest.raises(ContainsRawConstant):
        to_postfix(Node.op("mul", Node.const(2.0), Node.var(0)))
    with pytest.raises(expr.ExprError):
        PostfixTemplate(("x0", "EOS"))
    with pytest.raises(expr.ExprError):
        PostfixTemplate(("2.0", "x0", "mul"))


def test_abstract_coefficients_example():
    tree = parse_postfix("3.2 x0 mul 0.5 x1 mul sin add".split(), allow_constants=True)
    t = abstract_coefficients(tree)
    assert t == SIN_TEMPLATE
    assert t.num_cof == 2 and t.complexity == 8


def test_template_counts():
    t = PostfixTemplate.from_string("COF x0 mul x1 sin cos add")
    assert (t.num_operands, t.num_trig, t.max_var_index, t.num_cof) == (3, 2, 1, 1)


# ---------------------------------------------------------------- evaluation


def test_evaluate_matches_closed_form():
    rng = np.random.default_rng(0)
    X = rng.uniform(1, 5, size=(50, 2))
    w = np.array([2.5, 1.3])
    res = evaluate(SIN_TEMPLATE, w, X)
    np.testing.assert_allclose(res.values, 2.5 * X[:, 0] + np.sin(1.3 * X[:, 1]), rtol=0, atol=1e-14)
    assert res.finite_mask.all()


def test_division_is_unprotected_and_masked():
    X = np.array([[0.0, 1.0], [2.0, 1.0]])
    res = evaluate(PostfixTemplate.from_string("x1 x0 div"), [], X)
    assert np.isinf(res.values[0]) and res.values[1] == 0.5
    assert list(res.finite_mask) == [False, True]
    y = np.array([0.0, 0.0])
    loss, g = grad_w(PostfixTemplate.from_string("COF x1 mul x0 div"), [1.0], X, y, penalty=1e6)
    assert loss == pytest.approx((1e6 + 0.25) / 2)
    assert g[0] == pytest.approx(0.5 * 2 * 0.5 * 0.5)


def test_all_nonfinite_raises():
    X = np.zeros((3, 1))
    with pytest.raises(expr.AllSamplesNonFinite):
        grad_w(PostfixTemplate.from_string("COF x0 div"), [1.0], X, np.ones(3))


def test_dimension_mismatch():
    with pytest.raises(expr.DimensionMismatch):
        evaluate(SIN_TEMPLATE, [1.0], np.ones((3, 2)))
    with pytest.raises(expr.DimensionMismatch):
        evaluate(SIN_TEMPLATE, [1.0, 2.0], np.ones((3, 1)))


def test_zero_coefficient_template():
    X = np.arange(6.0).reshape(3, 2) + 1
    out = evaluate_batch(("x0", "x1", "mul"), np.zeros((2, 0)), X)
    assert out.shape == (2, 3)
    np.testing.assert_array_equal(out[0], X[:, 0] * X[:, 1])


def _random_tree(rng, depth):
    if depth == 1 or rng.random() < 0.3:
        return Node.cof(0) if rng.random() < 0.5 else Node.var(int(rng.integers(2)))
    ops = ("add", "sub", "mul", "div", "sin", "cos")
    op = ops[int(rng.integers(len(ops)))]
    k = 1 if op in ("sin", "cos") else 2
    return Node("op", op, tuple(_random_tree(rng, depth - 1) for _ in range(k)))


def _central_diff(tokens, w, X, y, i, h):
    wp, wm = w.copy(), w.copy()
    wp[i] += h
    wm[i] -= h
    return (expr.penalized_loss(tokens, wp, X, y) - expr.penalized_loss(tokens, wm, X, y)) / (2 * h)


def random_gradient_instances(n, seed=0):
    """(template, w, X, y) tuples with at least one COF and a finite loss."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        tmpl = to_postfix(_random_tree(rng, int(rng.integers(2, 5))))
        if tmpl.num_cof == 0:
            continue
        X = rng.uniform(1, 5, size=(20, 2))
        w = rng.uniform(-2, 2, size=tmpl.num_cof)
        y = rng.normal(size=20)
        if not np.isfinite(evaluate(tmpl, w, X).values).all():
            continue
        out.append((tmpl, w, X, y))
    return out


def gradient_rel_errors(instances):
    """Per-component relative error of the exact gradient against a
    Richardson-extrapolated central difference."""
    errs = []
    for tmpl, w, X, y in instances:
        _, g = grad_w(tmpl, w, X, y)
        for i in range(len(w)):
            h = 1e-3 * max(1.0, abs(w[i]))
            d1 = _central_diff(tmpl.tokens, w, X, y, i, h)
            d2 = _central_diff(tmpl.tokens, w, X, y, i, h / 2)
            fd = (4 * d2 - d1) / 3
            errs.append(abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-8))
    return errs


def test_gradient_matches_finite_differences():
    errs = gradient_rel_errors(random_gradient_instances(100))
    assert max(errs) <= 1e-5


def test_batched_gradient_equals_single():
    rng = np.random.default_rng(3)
    X = rng.uniform(1, 5, size=(30, 2))
    y = rng.normal(size=30)
    W = rng.uniform(-2, 2, size=(4, 2))
    loss, grad, _ = loss_and_grad_batch(SIN_TEMPLATE.tokens, W, X, y, 1e6)
    for r in range(4):
        l1, g1 = grad_w(SIN_TEMPLATE, W[r], X, y)
        assert loss[r] == pytest.approx(l1, rel=1e-14)
        np.testing.assert_allclose(grad[r], g1, rtol=1e-13)


# ---------------------------------------------------------------- rendering


def test_render_examples():
    assert render_infix(PostfixTemplate.from_string("COF x0 mul"), [2.5]) == "(2.5 * x0)"
    assert render_infix(SIN_TEMPLATE) == "((COF * x0) + sin((COF * x1)))"


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 8192), st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=0, max_size=20))
def test_render_round_trips_through_infix_reader(idx, values):
    tree = enumerate_trees(3)[idx]
    tmpl = to_postfix(tree)
    w = (values + [0.5] * tmpl.num_cof)[: tmpl.num_cof]
    back, read_w = read_infix(render_infix(tmpl, w))
    assert strip_slots(back) == strip_slots(tree)
    assert read_w == [float(v) for v in w]
    back_plain, _ = read_infix(render_infix(tmpl))
    assert to_postfix(back_plain) == tmpl


def test_constants_render_exactly():
    w = [math.pi, -1e-7]
    _, back = read_infix(render_infix(PostfixTemplate.from_string("COF x0 COF sub mul"), w))
    assert back == w
