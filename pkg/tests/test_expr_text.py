import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derivopt.errors import ArityMismatch, EmptyRange, ParseError, UndeclaredIterator
from derivopt.expr import TensorDecl, build_expression, it, access, mul, scope_at, all_scopes, free_tensors
from derivopt.fingerprint import fingerprint
from derivopt.oracle import eval_expression, random_bindings
from derivopt.text import format_expr, parse_expr

from gen import random_expression

A = TensorDecl("A", (3, 4))
B = TensorDecl("B", (4, 2))


def test_format_matches_the_documented_grammar():
    c, k, r = it("c", 0, 3), it("k0", 0, 4, "S"), it("r", 0, 2)
    e = build_expression([c, r], [k], mul(access(A, c.ix, k.ix), access(B, k.ix, r.ix)))
    text = format_expr(e)
    assert text.startswith("L{c:0..3, r:0..2} S{k0:0..4} (")
    assert "A[c, k0]" in text and "B[k0, r]" in text


def test_parse_then_format_is_stable():
    text = "L{m:0..3, n:0..2} S{k:0..4} (A[m, k] * B[k, n])"
    e = parse_expr(text, {"A": A, "B": B})
    assert format_expr(parse_expr(format_expr(e), {"A": A, "B": B})) == format_expr(e)


def test_nested_scopes_round_trip():
    text = "L{i:0..3} {L{a:0..3, b:0..4} (A[a, b] + A[a, b])}[i, 2]"
    e = parse_expr(text, {"A": A})
    assert len(list(all_scopes(e))) == 2
    assert format_expr(parse_expr(format_expr(e), {"A": A})) == format_expr(e)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_expressions_round_trip_through_text(seed):
    e = random_expression(np.random.default_rng(seed))
    tensors = {t.name: t for t in free_tensors(e)}
    back = parse_expr(format_expr(e), tensors)
    assert fingerprint(back) == fingerprint(e)
    vals = random_bindings(list(tensors.values()), np.random.default_rng(seed))
    assert np.array_equal(eval_expression(back, vals), eval_expression(e, vals))


def test_parse_errors():
    with pytest.raises(ParseError):
        parse_expr("L{m:0..3 (A[m, 0])", {"A": A})
    with pytest.raises((ParseError, UndeclaredIterator)):
        parse_expr("L{m:0..3} (A[m, q])", {"A": A})
    with pytest.raises(ParseError):
        parse_expr("L{m:0..3} (Z[m])", {"A": A})


def test_tensor_decl_validation():
    with pytest.raises(EmptyRange):
        TensorDecl("T", (0, 2))
    with pytest.raises(ArityMismatch):
        TensorDecl("T", (2, 2), ((1, 1),))
    assert TensorDecl("T", (2, 3)).size == 6


def test_empty_iterator_range_is_rejected():
    with pytest.raises(EmptyRange):
        m = it("m", 2, 2)
        build_expression([m], [], access(TensorDecl("V", (3,)), m.ix))


def test_scope_at_walks_nested_children():
    e = parse_expr("L{i:0..3} {L{a:0..3, b:0..4} (A[a, b] * 2)}[i, 1]", {"A": A})
    assert scope_at(e, (0,)).shape == (3, 4)
    assert scope_at(e, ()).shape == (3,)
