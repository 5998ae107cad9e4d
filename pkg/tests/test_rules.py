import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derivopt.errors import (BodiesDiffer, NoDependency, NotAPartition, NotBijective, NotCoveringPartition,
                             RuleError)
from derivopt.expr import TensorDecl, scope_at
from derivopt.fingerprint import fingerprint
from derivopt.oracle import eval_expression, random_bindings
from derivopt.registry import template_of
from derivopt.rules import (INTRA_RULES, RuleApplication, apply_intra, fuse_expressions, make_map,
                            merge_expressions, read_trace, split_expression, split_summation,
                            substitute_variables, varsub_map, write_trace)
from derivopt.index import IndexExpr
from derivopt.text import format_expr, parse_expr

from gen import intra_applications, oracle_equal, random_expression

A = TensorDecl("A", (4, 4, 2), ((1, 1), (1, 1), (0, 0)))
K = TensorDecl("K", (3, 3, 2, 2))
E1 = "L{h:0..4, w:0..4, f:0..2} S{c:0..2, r:0..3, s:0..3} (A[h+r-1, w+s-1, c] * K[r, s, f, c])"


def e1():
    return parse_expr(E1, {"A": A, "K": K})


def _by_name(s, *names):
    pos = {i.name: k for k, i in enumerate(s.summation)}
    return [s.summation[pos[n]].id for n in names]


@pytest.mark.parametrize("rule", INTRA_RULES)
def test_intra_rules_are_sound_on_random_expressions(rule):
    apps = intra_applications(rule, 30, seed=7)
    assert len(apps) == 30
    for e, app in apps:
        assert oracle_equal(e, apply_intra(e, app), trials=5), app.to_json()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_rewrite_chains_keep_semantics(seed):
    rng = np.random.default_rng(seed)
    from gen import random_base, random_walk

    e0 = random_base(rng)
    assert oracle_equal(e0, random_walk(e0, rng, 4), trials=4, seed=seed)


def test_summation_split_of_e1():
    e = e1()
    e2 = split_summation(e, _by_name(e, "r", "s"))
    assert format_expr(e2).startswith("L{h:0..4, w:0..4, f:0..2} S{r:0..3, s:0..3} {L{r:0..3, s:0..3, h:0..4")
    assert oracle_equal(e, e2)


def test_summation_split_needs_two_nonempty_parts():
    e = parse_expr("L{m:0..2} S{k:0..3} (A[m, k, 0])", {"A": A})
    with pytest.raises(NotAPartition):
        split_summation(e, [e.summation[0].id])


def test_offset_substitution_matches_the_worked_example():
    e = e1()
    e2 = split_summation(e, _by_name(e, "r", "s"))
    e3 = apply_intra(e2, RuleApplication("VarSub", (0,), {"kind": "offset", "subs": [[2, 0, 1, -1], [3, 1, 1, -1]]}))
    inner = scope_at(e3, (0, 0))
    assert [(t.name, t.lo, t.hi) for t in inner.traversal][-2:] == [("t1", -1, 5), ("t2", -1, 5)]
    assert oracle_equal(e2, e3)


def test_identity_substitution_then_merge_restores_the_expression():
    e = parse_expr("L{m:0..3, n:0..2} S{k:0..4} (A[m, n, (k mod 2)] * K[0, 0, n, (k mod 2)])", {"A": A, "K": K})
    phi = make_map(e, [], [], [], {})
    wrapped = substitute_variables(e, phi)
    back = apply_intra(wrapped, RuleApplication("TravMerge", (), {"child": 0}))
    assert fingerprint(back) == fingerprint(e)


def test_fuse_substitution_round_trips_exhaustively():
    e = parse_expr("L{t1:0..3, t2:0..4} (A[t1, t2, 0])", {"A": A})
    phi = varsub_map(e, {"kind": "fuse", "pos": [0, 1]})
    assert phi.domain_size() <= 4096 and phi.check()  # exhaustive at this size
    out = substitute_variables(e, phi)
    assert oracle_equal(e, out)


def test_non_bijective_map_is_rejected():
    e = parse_expr("L{x:0..3, y:0..3} (A[x, y, 0])", {"A": A})
    x, y = e.traversal
    # (x, y) -> x + y loses information
    phi = make_map(e, [x.id], [x.ix + y.ix], ["t"], {x.id: IndexExpr.var(-1)})
    with pytest.raises(NotBijective):
        substitute_variables(e, phi)


def test_relax_drops_guards_and_tighten_restores_ranges():
    e = e1()
    e2 = split_summation(e, _by_name(e, "r", "s"))
    e3 = apply_intra(e2, RuleApplication("VarSub", (0,), {"kind": "offset", "subs": [[2, 0, 1, -1], [3, 1, 1, -1]]}))
    e4 = apply_intra(e3, RuleApplication("BoundRelax", (0, 0), {"guards": [0, 1]}))
    assert not scope_at(e4, (0, 0)).guards
    e5 = apply_intra(e4, RuleApplication("TravMerge", (), {"child": 0}))
    e6 = apply_intra(e5, RuleApplication("BoundTighten", (0,), {"ranges": [[3, 0, 4], [4, 0, 4]]}))
    inner = scope_at(e6, (0,))
    assert [(t.lo, t.hi) for t in inner.traversal][-2:] == [(0, 4), (0, 4)]
    assert inner.out_pad[-2:] == ((1, 1), (1, 1))
    for x in (e4, e5, e6):
        assert oracle_equal(e, x)


def test_tightening_drops_only_unread_or_zero_bands():
    e = parse_expr("L{i:0..2} {L{j:0..4} (A[j, 0, 0])}[i+1]", {"A": A})
    # the consumer reads j in [1, 3) only
    t = apply_intra(e, RuleApplication("BoundTighten", (0,), {"pos": 0, "range": [1, 3]}))
    assert oracle_equal(e, t)
    read_all = parse_expr("L{i:0..4} {L{j:0..4} (A[j, 0, 0])}[i]", {"A": A})
    with pytest.raises(RuleError):
        apply_intra(read_all, RuleApplication("BoundTighten", (0,), {"pos": 0, "range": [1, 3]}))


def test_expression_split_and_merge_are_inverse():
    bmm = template_of("BatchMatmul").instantiate({}, [TensorDecl("X", (2, 3, 4)), TensorDecl("Y", (2, 4, 5))])
    lo, hi = split_expression(bmm, 0, 1)
    vals = random_bindings([TensorDecl("X", (2, 3, 4)), TensorDecl("Y", (2, 4, 5))], np.random.default_rng(0))
    cat = np.concatenate([eval_expression(lo, vals), eval_expression(hi, vals)])
    assert np.array_equal(cat, eval_expression(bmm, vals))
    assert fingerprint(merge_expressions(lo, hi)) == fingerprint(bmm)
    assert merge_expressions(bmm, bmm) is bmm
    with pytest.raises(NotCoveringPartition):
        split_expression(bmm, 0, 2)


def test_merge_rejects_different_bodies():
    x, y = TensorDecl("X", (2, 3, 4)), TensorDecl("Y", (2, 4, 5))
    a = template_of("BatchMatmul").instantiate({}, [x, y])
    b = template_of("BatchMatmul").instantiate({}, [TensorDecl("Z", (2, 3, 4)), y])
    with pytest.raises(BodiesDiffer):
        merge_expressions(a, b)


def test_fuse_inlines_the_producer():
    x = TensorDecl("X", (3, 3))
    t = TensorDecl("T", (3, 3))
    inner = parse_expr("L{i:0..3, j:0..3} (X[i, j] + X[j, i])", {"X": x})
    outer = parse_expr("L{i:0..3} S{j:0..3} (T[i, j] * T[i, j])", {"T": t})
    fused = fuse_expressions(outer, inner, "T")
    vals = random_bindings([x], np.random.default_rng(3))
    tv = eval_expression(inner, vals)
    assert np.array_equal(eval_expression(fused, vals), (tv * tv).sum(axis=1))
    with pytest.raises(NoDependency):
        fuse_expressions(outer, inner, "Q")


def test_trace_files_round_trip(tmp_path):
    apps = [RuleApplication("SumSplit", (), {"outer": [0, 1]}),
            RuleApplication("VarSub", (0,), {"kind": "split", "pos": 1, "d": 2, "c": 0}, pre="a", post="b")]
    write_trace(apps, tmp_path / "t.jsonl")
    assert read_trace(tmp_path / "t.jsonl") == apps


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_split_halves_merge_back(seed):
    rng = np.random.default_rng(seed)
    e = random_expression(rng)
    cuttable = [k for k, t in enumerate(e.traversal) if t.hi - t.lo > 1]
    if not cuttable:
        return
    pos = cuttable[int(rng.integers(len(cuttable)))]
    t = e.traversal[pos]
    lo, hi = split_expression(e, pos, int(rng.integers(t.lo + 1, t.hi)))
    assert fingerprint(merge_expressions(lo, hi)) == fingerprint(e)
