"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines show through pytest's capture).
"""

import time

import numpy as np
import pytest

from derivopt.errors import RuleError
from derivopt.expr import Const, Op, Scope, TensorDecl, all_scopes, child_scopes, rebuild, scope_at
from derivopt.fingerprint import fingerprint
from derivopt.frontend import load_program, to_expression
from derivopt.graph import OperatorGraph, eval_graph
from derivopt.matcher import NoMatch, check_match, match_operator
from derivopt.oracle import eval_expression, random_bindings
from derivopt.pipeline import PipelineConfig, clear_derivation_cache, merge_candidates, optimize, verify_graphs
from derivopt.postprocess import identity_copy, postprocess
from derivopt.registry import registry, template_of
from derivopt.rules import (INTRA_RULES, apply_intra, fuse_expressions, merge_expressions, read_trace,
                            split_expression)
from derivopt.search import (Candidate, SearchConfig, derive, explorative_derive, replay, to_graph,
                             verify_candidate)
from derivopt.text import format_expr

from conftest import FIXTURES
from gen import (intra_applications, oracle_equal, permute_operands, permute_summation, permute_traversal,
                 random_base, random_expression, random_walk, rename_iterators)

# pinned tolerances
RULE_APPS, RULE_TRIALS, RULE_BUDGET_S = 100, 20, 60.0
GOLDEN_BUDGET_S = 5.0
DISCOVERY_DEPTH, DISCOVERY_BUDGET_S = 7, 120.0
GUIDED_MAX_DEPTH, EXPLORATIVE_DEPTH, TCONV_BUDGET_S = 6, 6, 120.0
PRUNE_DEPTH, PRUNE_MIN_RATIO, PRUNE_MIN_SPEEDUP, PRUNE_BUDGET_S = 5, 0.5, 2.0, 300.0
NONMATCH_SCOPES, MATCHER_BUDGET_S = 200, 30.0
SYMMETRY_EXPRS, DISTINCT_PAIRS, FINGERPRINT_BUDGET_S = 1000, 1000, 30.0
POSTPROCESS_BUDGET_S = 10.0
E2E_FIXTURES = ("conv3x3", "convtranspose", "dilated_conv", "g2bmm_small", "conv_relu_conv", "infogan_tconv")
E2E_BUDGET_S = 600.0


@pytest.fixture
def say(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    return emit


def _conv3x3():
    g = load_program(FIXTURES / "conv3x3.json")
    return g, to_expression(g.nodes[0], g)


# 1 ---------------------------------------------------------------------------------


def _split_cases(rng, count):
    out = []
    while len(out) < count:
        e = random_expression(rng, max_steps=2)
        cuttable = [k for k, t in enumerate(e.traversal) if t.hi - t.lo > 1]
        if not cuttable:
            continue
        pos = cuttable[int(rng.integers(len(cuttable)))]
        t = e.traversal[pos]
        out.append((e, pos, int(rng.integers(t.lo + 1, t.hi))))
    return out


def _split_sound(e, pos, cut, rng):
    lo, hi = split_expression(e, pos, cut)
    for _ in range(RULE_TRIALS):
        vals = random_bindings(list({t.name: t for t in _inputs(e)}.values()), rng)
        whole = eval_expression(e, vals)
        parts = np.concatenate([eval_expression(lo, vals), eval_expression(hi, vals)], axis=pos)
        if not np.array_equal(whole, parts):
            return False
    return True


def _inputs(e):
    from derivopt.expr import free_tensors

    return free_tensors(e)


def _producer_for(decl, rng):
    """A random expression producing a tensor shaped like ``decl`` from fresh inputs."""
    shape = decl.shape
    if len(shape) == 3 and rng.integers(0, 2):
        k = int(rng.integers(1, 4))
        p = template_of("BatchMatmul").instantiate(
            {}, [TensorDecl("P0", (shape[0], shape[1], k)), TensorDecl("P1", (shape[0], k, shape[2]))])
    elif len(shape) == 2 and rng.integers(0, 2):
        k = int(rng.integers(1, 4))
        p = template_of("Matmul").instantiate({}, [TensorDecl("P0", (shape[0], k)), TensorDecl("P1", (k, shape[1]))])
    else:
        p = template_of("Add").instantiate({}, [TensorDecl("P0", shape), TensorDecl("P1", shape)])
    return random_walk(p, rng, int(rng.integers(0, 3)))


def _fuse_cases(rng, count):
    out = []
    while len(out) < count:
        c = random_walk(random_base(rng), rng, int(rng.integers(0, 2)))
        ins = _inputs(c)
        decl = ins[int(rng.integers(len(ins)))]
        out.append((c, _producer_for(decl, rng), decl))
    return out


def _fuse_sound(c, p, decl, rng):
    fused = fuse_expressions(c, p, decl.name)
    others = [t for t in _inputs(c) if t.name != decl.name]
    for _ in range(RULE_TRIALS):
        vals = random_bindings(others + _inputs(p), rng)
        ref = eval_expression(c, vals | {decl.name: eval_expression(p, vals)})
        if not np.array_equal(ref, eval_expression(fused, vals)):
            return False
    return True


def test_criterion_1_rule_soundness(say):
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    counts, failures = {}, []
    for rule in INTRA_RULES:
        apps = intra_applications(rule, RULE_APPS, seed=101)
        counts[rule] = len(apps)
        failures += [rule for e, a in apps if not oracle_equal(e, apply_intra(e, a), trials=RULE_TRIALS)]
    splits = _split_cases(rng, RULE_APPS)
    counts["ExprSplit"] = len(splits)
    failures += ["ExprSplit" for e, pos, cut in splits if not _split_sound(e, pos, cut, rng)]
    merged = 0
    for e, pos, cut in _split_cases(rng, RULE_APPS):
        merged += 1
        if not oracle_equal(e, merge_expressions(*split_expression(e, pos, cut)), trials=RULE_TRIALS):
            failures.append("ExprMerge")
    counts["ExprMerge"] = merged
    fuses = 0
    for c, p, decl in _fuse_cases(rng, 2 * RULE_APPS):
        try:
            ok = _fuse_sound(c, p, decl, rng)
        except RuleError:
            continue
        fuses += 1
        if not ok:
            failures.append("ExprFuse")
        if fuses == RULE_APPS:
            break
    counts["ExprFuse"] = fuses
    dt = time.monotonic() - t0
    ok = not failures and min(counts.values()) >= RULE_APPS and len(counts) == 8 and dt < RULE_BUDGET_S
    say("criterion 1 rule soundness", ok,
        f"applications {counts}, failures {len(failures)}, {RULE_TRIALS} trials each, {dt:.1f} s")
    assert ok


# 2 ---------------------------------------------------------------------------------


def test_criterion_2_golden_derivation(say):
    t0 = time.monotonic()
    _, e0 = _conv3x3()
    apps = read_trace(FIXTURES / "golden_conv3x3.jsonl")
    states = replay(e0, apps, check=True)  # raises if any printed step differs
    texts_ok = all(a.post == (format_expr(s.expr) if isinstance(s.expr, Scope) else s.expr.name)
                   for a, s in zip(apps, states[1:]) if a.post)
    g = to_graph(states[-1], "Y")
    labels = [n.label() for n in g.nodes]
    equal = verify_candidate(Candidate(g, list(apps)), e0, trials=20)
    dt = time.monotonic() - t0
    ok = len(apps) == 7 and texts_ok and labels == ["Matmul", "OffsetAdd"] and equal and dt < GOLDEN_BUDGET_S
    say("criterion 2 golden derivation", ok,
        f"{len(apps)} steps {[a.rule for a in apps]}, final graph {labels}, oracle-equal {equal}, {dt:.2f} s")
    assert ok


# 3 ---------------------------------------------------------------------------------


def _memory_bound_only(g):
    return all(n.attrs.get("bound") == "memory" for n in g.nodes if n.is_eop)


def test_criterion_3_search_discovery(say):
    _, e0 = _conv3x3()
    t0 = time.monotonic()
    cands, stats = derive(e0, SearchConfig(max_depth=DISCOVERY_DEPTH), "Y")
    dt = time.monotonic() - t0
    good = [c for c in cands if c.matmul_count() == 1 and _memory_bound_only(c.graph)
            and all(n.kind in ("Matmul", "EOperator") for n in c.graph.nodes)]
    verified = [c for c in good[:10] if verify_candidate(c, e0, trials=20, seed=9)]
    ok = bool(verified) and dt < DISCOVERY_BUDGET_S
    say("criterion 3 search discovery", ok,
        f"depth {DISCOVERY_DEPTH}: {len(cands)} candidates, {len(good)} single-Matmul with memory-bound eOperators, "
        f"e.g. {[n.label() for n in good[0].graph.nodes] if good else None}, {dt:.1f} s")
    assert ok


# 4 ---------------------------------------------------------------------------------


def test_criterion_4_guided_vs_explorative(say):
    g = load_program(FIXTURES / "convtranspose.json")
    e0 = to_expression(g.nodes[0], g)
    t0 = time.monotonic()
    guided_depth = None
    for d in range(GUIDED_MAX_DEPTH + 1):
        cands, _ = derive(e0, SearchConfig(max_depth=d), "Y")
        if any(c.matmul_count() >= 1 and verify_candidate(c, e0, trials=20) for c in cands):
            guided_depth = d
            break
    cands, stats = explorative_derive(e0, SearchConfig(max_depth=EXPLORATIVE_DEPTH, guided=False), "Y")
    explorative_found = any(c.matmul_count() >= 1 for c in cands)
    dt = time.monotonic() - t0
    # no Matmul within EXPLORATIVE_DEPTH: the minimal explorative depth exceeds it
    min_explorative = f"> {EXPLORATIVE_DEPTH}" if not explorative_found else "<= " + str(EXPLORATIVE_DEPTH)
    ok = (guided_depth is not None and not explorative_found and EXPLORATIVE_DEPTH >= guided_depth
          and dt < TCONV_BUDGET_S)
    say("criterion 4 guided vs explorative", ok,
        f"guided finds a verified Matmul candidate at depth {guided_depth}; explorative depth {EXPLORATIVE_DEPTH} "
        f"finds {'one' if explorative_found else 'none'} ({stats.states_generated} states, budget exhausted "
        f"{stats.budget_exhausted}); minimal explorative depth {min_explorative}; {dt:.1f} s")
    assert ok


# 5 ---------------------------------------------------------------------------------


def test_criterion_5_fingerprint_pruning(say):
    _, e0 = _conv3x3()
    t0 = time.monotonic()
    _, on = derive(e0, SearchConfig(max_depth=PRUNE_DEPTH), "Y")
    t_on = time.monotonic() - t0
    t1 = time.monotonic()
    _, off = derive(e0, SearchConfig(max_depth=PRUNE_DEPTH, prune=False), "Y")
    t_off = time.monotonic() - t1
    dt = time.monotonic() - t0
    speedup = t_off / t_on
    ok = on.prune_ratio >= PRUNE_MIN_RATIO and speedup >= PRUNE_MIN_SPEEDUP and dt < PRUNE_BUDGET_S
    say("criterion 5 fingerprint pruning", ok,
        f"prune ratio {on.prune_ratio:.4f} ({on.states_generated} generated, {on.states_unique} unique); "
        f"pruned {t_on:.1f} s vs unpruned {t_off:.1f} s ({speedup:.2f}x, unpruned budget exhausted "
        f"{off.budget_exhausted}); {dt:.1f} s")
    assert ok


# 6 ---------------------------------------------------------------------------------


def _graph_equal(m, trials=20, seed=11):
    out = TensorDecl("__o", m.scope.shape)
    g = OperatorGraph({d.name: d for d in m.inputs} | {"__o": out}, [m.node("__o")], ["__o"])
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        vals = random_bindings(list({d.name: d for d in m.inputs}.values()), rng)
        if not np.array_equal(eval_graph(g, vals)["__o"], eval_expression(m.scope, vals)):
            return False
    return True


def _mutated_leaf(rng):
    """A leaf scope perturbed so that no library operator should compute it."""
    e = random_expression(rng, max_steps=2)
    leaves = [s for _, s in all_scopes(e) if not child_scopes(s)]
    s = leaves[int(rng.integers(len(leaves)))]
    how = int(rng.integers(3))
    body = (Op("add", (s.body, Const(1))) if how == 0 else Op("mul", (s.body, Const(3))) if how == 1
            else Op("neg", (s.body,)))
    return rebuild(s, body=body)


def _names(m):
    return {i.name: m.assignment[i.id] for i in m.scope.iterators if i.id in m.assignment}


def test_criterion_6_matcher_conformance(say):
    t0 = time.monotonic()
    a, b = TensorDecl("A", (2, 3, 4)), TensorDecl("B", (2, 4, 5))
    from derivopt.text import parse_expr

    batched = match_operator(parse_expr("L{b:0..2, m:0..3, n:0..5} S{k:0..4} (A[b, m, k] * B[b, k, n])",
                                    {"A": a, "B": b}), "Matmul")
    batched_ok = bool(batched) and _names(batched) == {"b": "b", "m": "m", "n": "n", "k": "k"} and check_match(batched)
    c = TensorDecl("C", (2, 2, 3, 5))
    d = TensorDecl("D", (3, 2, 4, 2), ((1, 0), (0, 0), (0, 0), (0, 0)))
    strided = match_operator(parse_expr("L{b:0..2, m:0..3, n:0..2} S{k:0..4} (C[b, 0, m, 1+k] * D[b-1, b, k, n])",
                                    {"C": c, "D": d}), "Matmul")
    strided_ok = bool(strided) and _names(strided) == {"b": "b", "m": "m", "n": "n", "k": "k"} and check_match(strided)

    _, e0 = _conv3x3()
    states = replay(e0, read_trace(FIXTURES / "golden_conv3x3.jsonl")[:5])
    gemm = match_operator(scope_at(states[-1].expr, (0,)), "Matmul")
    got = _names(gemm) if gemm else {}
    gemm_map_ok = bool(gemm) and {got.get("t1"), got.get("t2")} == {"m"} and {got.get("r"), got.get("s"),
                                                                        got.get("f")} == {"n"} and got.get("c") == "k"

    shapes = {"Conv": ([[5, 5, 2], [3, 3, 2, 2]], {"pad": [1, 1]}),
              "ConvTranspose": ([[2, 2, 2], [4, 4, 2, 2]], {"stride": [2, 2], "pad": [1, 1]}),
              "G2BMM": ([[1, 5, 2], [1, 5, 2]], {"width": 1, "dilation": 1}),
              "Matmul": ([[3, 4], [4, 2]], {}), "BatchMatmul": ([[2, 3, 4], [2, 4, 2]], {}),
              "Reshape": ([[2, 6]], {"shape": [3, 4]})}
    self_ok = []
    for kind, t in sorted(registry().items()):
        ins, attrs = shapes.get(kind, ([[2, 3], [2, 3]][: len(t.inputs)], {}))
        m = match_operator(t.instantiate(attrs, [TensorDecl(f"I{k}", tuple(s)) for k, s in enumerate(ins)]), kind)
        self_ok.append(bool(m) and check_match(m, trials=20, seed=1))

    rng = np.random.default_rng(77)
    no_match = false_pos = 0
    for _ in range(NONMATCH_SCOPES):
        s = _mutated_leaf(rng)
        hit = False
        for kind in registry():
            m = match_operator(s, kind)
            if m:
                hit = True
                false_pos += not _graph_equal(m)
            else:
                assert isinstance(m, NoMatch)
        no_match += not hit
    dt = time.monotonic() - t0
    ok = (batched_ok and strided_ok and gemm_map_ok and all(self_ok) and len(self_ok) >= 8
          and no_match == NONMATCH_SCOPES and false_pos == 0 and dt < MATCHER_BUDGET_S)
    say("criterion 6 matcher conformance", ok,
        f"batched {batched_ok}, strided {strided_ok}, conv-to-GEMM mapping {gemm_map_ok}, "
        f"self-match {sum(self_ok)}/{len(self_ok)}, "
        f"NoMatch on {no_match}/{NONMATCH_SCOPES} perturbed scopes, false positives {false_pos}, {dt:.1f} s")
    assert ok


# 7 ---------------------------------------------------------------------------------


def test_criterion_7_fingerprint_symmetry(say):
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    exprs = [random_expression(rng) for _ in range(SYMMETRY_EXPRS)]
    sym_fail = reorder_checked = reorder_fail = 0
    for e in exprs:
        fp = fingerprint(e)
        variants = (rename_iterators(e), permute_summation(e, rng), permute_operands(e, rng),
                    rename_iterators(permute_operands(permute_summation(e, rng), rng), "q"))
        sym_fail += sum(fingerprint(v) != fp for v in variants)
        p = permute_traversal(e, rng)
        if p is not None:
            reorder_checked += 1
            reorder_fail += fingerprint(p) == fp
    pairs = distinct = collide = 0
    while pairs < DISTINCT_PAIRS:
        x, y = exprs[int(rng.integers(len(exprs)))], exprs[int(rng.integers(len(exprs)))]
        if x.shape == y.shape and oracle_equal(x, y, trials=3):
            continue
        pairs += 1
        collide += fingerprint(x) == fingerprint(y)
    distinct = pairs - collide
    dt = time.monotonic() - t0
    ok = sym_fail == 0 and collide == 0 and reorder_checked > 0 and reorder_fail == 0 and dt < FINGERPRINT_BUDGET_S
    say("criterion 7 fingerprint symmetry", ok,
        f"{SYMMETRY_EXPRS} expressions x 4 symmetry classes: {sym_fail} mismatches; {distinct}/{pairs} "
        f"distinguishable pairs differ; traversal reorder changed {reorder_checked - reorder_fail}/{reorder_checked}; "
        f"{dt:.1f} s")
    assert ok


# 8 ---------------------------------------------------------------------------------


def _postprocess_ready(g):
    prod = {n.output: n for n in g.nodes}
    adjacent = any(n.is_eop and any(i in prod and prod[i].is_eop for i in n.inputs) for n in g.nodes)
    weight_dlt = any(n.is_eop and set(n.inputs) == {"W"} and not identity_copy(n, g) for n in g.nodes)
    return adjacent and weight_dlt and any(identity_copy(n, g) for n in g.nodes)


def test_criterion_8_postprocess(say):
    t0 = time.monotonic()
    prog = load_program(FIXTURES / "infogan_tconv.json")
    node = next(n for n in prog.nodes if n.kind == "ConvTranspose")
    e0 = to_expression(node, prog)
    cands, _ = explorative_derive(e0, SearchConfig(max_depth=2), node.output)
    pick = next(c for c in cands if _postprocess_ready(c.graph))
    merged = merge_candidates(prog, {node.output}, [pick])
    eops_before = merged.eop_count()
    values = random_bindings([prog.tensors[w] for w in prog.weights], np.random.default_rng(3))
    final, logs, folded = postprocess(merged, values)
    passes = {}
    for p in logs:
        passes[p.name] = (passes.get(p.name, (p.before,))[0], p.after)
    fused = any(p.after < p.before for p in logs if p.name == "fuse_eoperators")
    identity_gone = any(p.after < p.before for p in logs if p.name == "eliminate_identity") and not any(
        identity_copy(n, final) for n in final.nodes)
    weight_folded = bool(folded) and not any("W" in n.inputs for n in final.nodes)
    equal = not verify_graphs(prog, final, 20, seed=5, values=values)
    dt = time.monotonic() - t0
    ok = fused and identity_gone and weight_folded and equal and final.eop_count() < eops_before \
        and dt < POSTPROCESS_BUDGET_S
    say("criterion 8 post-processing", ok,
        f"{[n.label() for n in merged.nodes]} -> {[n.label() for n in final.nodes]}; passes {passes}; "
        f"eOperators {eops_before} -> {final.eop_count()}; folded {sorted(folded)}; oracle-equal {equal}; {dt:.2f} s")
    assert ok


# 9 ---------------------------------------------------------------------------------


def _non_dilated(summary):
    return not any(d["kind"] == "Conv" and max(d.get("attrs", {}).get("dilation", [1])) > 1
                   for d in summary["detail"])


def test_criterion_9_end_to_end(say):
    clear_derivation_cache()
    t0 = time.monotonic()
    lines, all_ok, non_dilated = [], True, 0
    for name in E2E_FIXTURES:
        prog = load_program(FIXTURES / f"{name}.json")
        s = time.monotonic()
        final, rep = optimize(prog, PipelineConfig())
        verified = rep.verified and not verify_graphs(prog, final, 20, seed=13)
        all_ok &= verified and not rep.exhausted_without_candidate
        if name == "dilated_conv":
            non_dilated = sum(_non_dilated(c) for e in rep.subprograms[0].expressions for c in e.candidates)
        lines.append(f"{name} {' '.join(rep.final_nodes)} verified={verified} {time.monotonic() - s:.0f}s")
    dt = time.monotonic() - t0
    ok = all_ok and non_dilated > 0 and dt < E2E_BUDGET_S
    say("criterion 9 end-to-end", ok,
        f"{'; '.join(lines)}; dilated-conv non-dilated candidates {non_dilated}; total {dt:.0f} s")
    assert ok
