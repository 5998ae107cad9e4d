import numpy as np
from hypothesis import given, settings, strategies as st

from derivopt.expr import TensorDecl, build_expression, it, access, add, mul, sub
from derivopt.fingerprint import FingerprintSet, canonicalize, dedup_insert, fingerprint
from derivopt.rules import make_map, merge_traversals, substitute_variables
from derivopt.text import parse_expr

from gen import (oracle_equal, permute_operands, permute_summation, permute_traversal, random_expression,
                 rename_iterators)

seeds = st.integers(0, 2**32 - 1)


def test_iterator_names_do_not_matter():
    t = TensorDecl("T", (3, 4))
    a = parse_expr("L{x:0..3, y:0..4} (T[x, y] * 2)", {"T": t})
    b = parse_expr("L{y:0..3, z:0..4} (T[y, z] * 2)", {"T": t})
    assert fingerprint(a) == fingerprint(b)


def test_summation_order_and_commutative_operands():
    t1, t2 = TensorDecl("T1", (2, 3, 4)), TensorDecl("T2", (2, 3, 4))
    a = parse_expr("L{i:0..2} S{j:0..3, k:0..4} (T1[i, j, k] + T2[i, j, k])", {"T1": t1, "T2": t2})
    b = parse_expr("L{i:0..2} S{k:0..4, j:0..3} (T2[i, j, k] + T1[i, j, k])", {"T1": t1, "T2": t2})
    assert fingerprint(a) == fingerprint(b)


def test_traversal_order_and_subtraction_order_matter():
    t = TensorDecl("T", (3, 4))
    a = parse_expr("L{x:0..3, y:0..4} (T[x, y])", {"T": t})
    b = parse_expr("L{y:0..4, x:0..3} (T[x, y])", {"T": t})
    assert fingerprint(a) != fingerprint(b)
    p, q = TensorDecl("P", (3,)), TensorDecl("Q", (3,))
    i = it("i", 0, 3)
    assert fingerprint(build_expression([i], [], sub(access(p, i.ix), access(q, i.ix)))) != \
        fingerprint(build_expression([i], [], sub(access(q, i.ix), access(p, i.ix))))


def test_produced_tensors_hash_by_their_producer():
    shape = (2, 2)
    origin = "f" * 32
    a, b = TensorDecl("t_a", shape, origin=origin), TensorDecl("t_b", shape, origin=origin)
    x = it("x", 0, 2)
    y = it("y", 0, 2)
    ea = build_expression([x, y], [], access(a, x.ix, y.ix))
    x2, y2 = it("x", 0, 2), it("y", 0, 2)
    eb = build_expression([x2, y2], [], access(b, x2.ix, y2.ix))
    assert fingerprint(ea) == fingerprint(eb)


def test_identity_substitution_merged_back_is_pruned():
    t = TensorDecl("T", (3, 4))
    e = parse_expr("L{x:0..3, y:0..4} S{k:0..2} (T[x, y] * T[x, k])", {"T": t})
    wrapped = substitute_variables(e, make_map(e, [], [], [], {}))
    assert fingerprint(merge_traversals(wrapped, 0)) == fingerprint(e)


def test_dedup_insert():
    seen = set()
    assert dedup_insert(seen, "ab") is True
    assert dedup_insert(seen, "ab") is False
    fs = FingerprintSet()
    assert fs.insert("x") and not fs.insert("x")


def test_printed_width():
    t = TensorDecl("T", (2,))
    fp = fingerprint(parse_expr("L{i:0..2} (T[i])", {"T": t}))
    assert len(fp) == 32 and int(fp, 16) >= 0


@settings(max_examples=150, deadline=None)
@given(seeds)
def test_symmetry_classes_keep_the_fingerprint(seed):
    rng = np.random.default_rng(seed)
    e = random_expression(rng)
    base = fingerprint(e)
    assert fingerprint(rename_iterators(e)) == base
    assert fingerprint(permute_summation(e, rng)) == base
    assert fingerprint(permute_operands(e, rng)) == base
    assert fingerprint(canonicalize(e)) == base


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_traversal_reorder_changes_the_fingerprint(seed):
    rng = np.random.default_rng(seed)
    e = random_expression(rng)
    p = permute_traversal(e, rng)
    if p is not None:
        assert fingerprint(p) != fingerprint(e)


@settings(max_examples=100, deadline=None)
@given(seeds, seeds)
def test_distinguishable_pairs_have_different_fingerprints(s1, s2):
    a = random_expression(np.random.default_rng(s1))
    b = random_expression(np.random.default_rng(s2))
    if a.shape != b.shape or not oracle_equal(a, b, trials=2):
        assert fingerprint(a) != fingerprint(b)
