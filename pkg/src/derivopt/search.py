"""Hybrid derivation: breadth-first explorative search plus guided derivation.

A search state is a partially instantiated expression together with the
operator nodes emitted so far.  Explorative search applies every generated
rule application up to a depth bound and prunes states whose fingerprint was
already seen; every dequeued state is also handed to guided derivation, which
steers it toward each target operator with a deterministic sequence of moves.
A state whose expression has been reduced to a single tensor becomes a
candidate graph, and every candidate is checked with the oracle.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cost import CostEstimate, CostParams, estimate
from .errors import DerivError, RuleError
from .expr import Access, Scope, TensorDecl, accesses, all_scopes, child_scopes, free_tensors, scope_at
from .fingerprint import FingerprintSet, _h, fingerprint, fingerprint_int
from .graph import OperatorGraph, OpNode, eval_graph
from .matcher import (INTENSITY_THRESHOLD, MatchResult, generate_eoperator, match_operator, replace_with_tensor,
                      with_reconstructions)
from .oracle import eval_expression, random_bindings
from .registry import registry, template_of
from .rules import (INTRA_RULES, RuleApplication, apply_intra, intra_proposals, relax_proposals,
                    tighten_proposals, travmerge_proposals, varsub_proposals)

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    max_depth: int = 7
    rules: Tuple[str, ...] = INTRA_RULES
    targets: Optional[Tuple[str, ...]] = None
    prune: bool = True
    guided: bool = True
    explorative: bool = True
    state_cap: int = 50_000
    time_cap_s: float = 120.0
    seed: int = 0
    workers: int = 1
    trials: int = 20
    threshold: float = INTENSITY_THRESHOLD
    guided_cap: int = 16

    def target_kinds(self) -> List[str]:
        if self.targets is not None:
            return [t for t in self.targets if t in registry()]
        return [k for k, t in registry().items() if not t.nonlinear]


@dataclass(frozen=True)
class SearchState:
    expr: object
    depth: int = 0
    trace: Tuple[RuleApplication, ...] = ()
    nodes: Tuple[OpNode, ...] = ()
    tensors: Dict[str, TensorDecl] = field(default_factory=dict, compare=False, hash=False)

    def key(self) -> int:
        labels = tuple(sorted((n.label(), n.output) for n in self.nodes))
        return _h(fingerprint_int(self.expr), labels)


@dataclass
class Candidate:
    graph: OperatorGraph
    trace: List[RuleApplication]
    cost: Optional[CostEstimate] = None
    source: str = "explorative"
    depth: int = 0
    verified: bool = False

    def signature(self) -> tuple:
        return tuple((n.kind, repr(sorted(n.attrs.items(), key=str)), n.inputs, n.outputs) for n in self.graph.nodes)

    def matmul_count(self) -> int:
        return sum(1 for n in self.graph.nodes if n.kind in ("Matmul", "BatchMatmul"))


@dataclass
class GuidanceStep:
    mismatch: Optional[str]  # "GroupCount", "IteratorLayout" or None for plumbing steps
    app: RuleApplication


@dataclass
class SearchStats:
    states_generated: int = 0
    states_unique: int = 0
    states_pruned: int = 0
    states_expanded: int = 0
    guided_calls: int = 0
    guided_steps: int = 0
    candidates: int = 0
    verify_failures: int = 0
    budget_exhausted: bool = False
    elapsed_s: float = 0.0

    @property
    def prune_ratio(self) -> float:
        g = self.states_generated
        return (g - self.states_unique) / g if g else 0.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["prune_ratio"] = round(self.prune_ratio, 4)
        return d


class _Budget:
    def __init__(self, cfg: SearchConfig, stats: SearchStats):
        self.deadline = time.monotonic() + cfg.time_cap_s
        self.cap = cfg.state_cap
        self.stats = stats

    def out(self) -> bool:
        if self.stats.states_generated >= self.cap or time.monotonic() > self.deadline:
            self.stats.budget_exhausted = True
            return True
        return False


# single steps -----------------------------------------------------------------


def initial_state(e0: Scope) -> SearchState:
    return SearchState(e0, 0, (), (), {t.name: t for t in free_tensors(e0)})


def leaf_sites(expr) -> List[Tuple[tuple, Scope]]:
    """Scopes whose operands are all tensors, i.e. ready to instantiate."""
    if not isinstance(expr, Scope):
        return []
    return [(p, s) for p, s in all_scopes(expr) if not child_scopes(s)]


def apply_step(st: SearchState, app: RuleApplication, depth_cost: int = 1) -> SearchState:
    """Apply one rule application (rewrite or instantiation) to a state."""
    if app.rule in INTRA_RULES:
        expr = apply_intra(st.expr, app)
        return SearchState(expr, st.depth + depth_cost, st.trace + (app,), st.nodes, st.tensors)
    site = tuple(app.site)
    s = scope_at(st.expr, site)
    tensors = dict(st.tensors)
    nodes = list(st.nodes)
    if app.rule == "OpMatch":
        m = match_operator(s, app.params["kind"], materialize=bool(app.params.get("dlt")))
        if not m:
            raise RuleError(f"{app.params['kind']} does not match: {m.reason}")
        if app.params.get("dlt"):
            m, extra = with_reconstructions(m, tensors)
            nodes.extend(extra)
        expr, node = replace_with_tensor(st.expr, site, m, tensors)
    elif app.rule == "EOpGen":
        if child_scopes(s):
            raise RuleError("EOpGen needs a scope whose operands are tensors")
        expr, node = replace_with_tensor(st.expr, site, generate_eoperator(s), tensors)
    else:
        raise RuleError(f"unknown step {app.rule}")
    nodes.append(node)
    return SearchState(expr, st.depth + depth_cost, st.trace + (app,), tuple(nodes), tensors)


def _post_text(st: SearchState) -> str:
    from .text import format_expr

    return format_expr(st.expr) if isinstance(st.expr, Scope) else st.expr.name


def replay(e0: Scope, apps: Sequence[RuleApplication], check: bool = False) -> List[SearchState]:
    """Re-apply a trace; with ``check`` each recorded post text must match."""
    states = [initial_state(e0)]
    for k, app in enumerate(apps):
        nxt = apply_step(states[-1], app)
        if check and app.post is not None and _post_text(nxt) != app.post:
            raise RuleError(f"step {k} ({app.rule}) produced\n{_post_text(nxt)}\nexpected\n{app.post}")
        states.append(nxt)
    return states


def to_graph(st: SearchState, output_name: Optional[str] = None) -> OperatorGraph:
    final = st.expr
    nodes = list(st.nodes)
    tensors = dict(st.tensors)
    out = final.name
    if output_name and output_name != out:
        for k, n in enumerate(nodes):
            if n.output == out:
                nodes[k] = replace(n, outputs=(output_name,))
        tensors[output_name] = TensorDecl(output_name, final.shape, final.pad)
        tensors.pop(out, None)
        out = output_name
    used = {i for n in nodes for i in n.inputs} | {n.output for n in nodes} | {out}
    return OperatorGraph({k: v for k, v in tensors.items() if k in used}, nodes, [out])


def verify_candidate(c: Candidate, e0: Scope, trials: int = 20, seed: int = 0) -> bool:
    """Oracle equality between the candidate graph and the source expression."""
    rng = np.random.default_rng(seed)
    ins = free_tensors(e0)
    if not c.graph.outputs:
        return False
    for _ in range(trials):
        vals = random_bindings(ins, rng)
        try:
            got = eval_graph(c.graph, vals)[c.graph.outputs[0]]
        except DerivError:
            return False
        want = eval_expression(e0, vals)
        if got.shape != want.shape or not np.array_equal(got, want):
            return False
    return True


# guided derivation ------------------------------------------------------------


def _is_wrapper(s: Scope) -> bool:
    return not s.summation and not s.guards and isinstance(s.body, Access) and isinstance(s.body.tensor, Scope)


def _compound_pairs(s: Scope):
    """Plain iterator groups that appear together in one index (or div/mod operand)."""
    for a in accesses(s.body):
        stack = list(a.indices)
        while stack:
            ix = stack.pop()
            stack.extend(t[1] for t, _ in ix.terms if isinstance(t, tuple))
            plain = [t for t, _ in ix.terms if isinstance(t, int)]
            if len(plain) >= 2:
                yield plain


def _may_target(s: Scope, kind: str) -> bool:
    """Cheap structural pre-check: could ``s`` ever be steered toward ``kind``?"""
    style = template_of(kind).style
    body = s.body
    ops = [a for a in accesses(body)]
    if style == "gemm":
        return bool(s.summation) and len(ops) == 2 and getattr(body, "kind", None) == "mul"
    if style == "structured":
        return len(ops) == 2 and getattr(body, "kind", None) == "mul"
    if style == "reshape":
        return isinstance(body, Access) and not s.summation
    return not s.summation


def _plumbing(e: Scope, sites) -> Optional[GuidanceStep]:
    """Target-independent clean-up: merge wrappers, drop guards, tighten ranges."""
    for site, s in sites:
        for k, c in enumerate(child_scopes(s)):
            if _is_wrapper(c):
                return GuidanceStep(None, RuleApplication("TravMerge", site, {"child": k}))
    for site, s in sites:
        if s.guards:
            for p in relax_proposals(e, site):
                if "guard" in p or "guards" in p:
                    return GuidanceStep(None, RuleApplication("BoundRelax", site, p))
    # split div/mod sites before tightening so no padded wrapper is left behind
    for site, s in sites[1:]:
        for p in varsub_proposals(s):
            if p.get("kind") == "split":
                return GuidanceStep("IteratorLayout", RuleApplication("VarSub", site, p))
    for site, s in sites[1:]:
        props = tighten_proposals(e, site)
        if props:
            return GuidanceStep(None, RuleApplication("BoundTighten", site, props[0]))
    return None


def _layout(leaves) -> Optional[GuidanceStep]:
    """Iterator-layout moves on gemm-shaped leaves."""
    for site, s in leaves:
        trav = {t.id for t in s.traversal}
        pairs = list(_compound_pairs(s))
        if any(len(set(p) & trav) >= 2 for p in pairs):
            for p in varsub_proposals(s, nested=True):
                if p.get("kind") == "offset":
                    return GuidanceStep("IteratorLayout", RuleApplication("VarSub", site, p))
        for p in varsub_proposals(s, nested=True):
            if p.get("kind") == "split":
                return GuidanceStep("IteratorLayout", RuleApplication("VarSub", site, p))
        summ = {t.id: k for k, t in enumerate(s.summation)}
        outer = sorted({summ[i] for p in pairs if set(p) & trav for i in p if i in summ})
        if outer and len(outer) < len(s.summation):
            return GuidanceStep("GroupCount", RuleApplication("SumSplit", site, {"outer": outer}))
    return None


def _eop_step(st: SearchState, kind: str) -> List[GuidanceStep]:
    if any(n.kind == kind for n in st.nodes):
        for site, s in reversed(leaf_sites(st.expr)):
            if generate_eoperator(s).memory_bound:
                return [GuidanceStep(None, RuleApplication("EOpGen", site, {}))]
    return []


def select_rules(st: SearchState, kind: str, cache: Optional[dict] = None) -> List[GuidanceStep]:
    """Prescribed next moves toward ``kind``; empty when the target is unreachable.

    ``cache`` memoizes the target-independent parts per state.
    """
    e = st.expr
    if not isinstance(e, Scope):
        return []
    cache = cache if cache is not None else {}
    style = template_of(kind).style
    if style in ("structured", "reshape"):
        # exact-match templates: layout guidance cannot help, only a direct match
        for site, s in leaf_sites(e):
            if _may_target(s, kind) and match_operator(s, kind):
                return [GuidanceStep(None, RuleApplication("OpMatch", site, {"kind": kind}))]
        return _eop_step(st, kind)
    key = st.key()
    if ("plumb", key) not in cache:
        cache[("plumb", key)] = _plumbing(e, list(all_scopes(e)))
    step = cache[("plumb", key)]
    if step is not None:
        return [step]
    leaves = [(site, s) for site, s in leaf_sites(e) if _may_target(s, kind)]
    for site, s in leaves:
        if match_operator(s, kind, materialize=True):
            return [GuidanceStep(None, RuleApplication("OpMatch", site, {"kind": kind, "dlt": True}))]
    lkey = ("layout", key, style)
    if lkey not in cache:
        cache[lkey] = _layout(leaves)
    if cache[lkey] is not None:
        return [cache[lkey]]
    return _eop_step(st, kind)


def guided_derive(st: SearchState, kind: str, cfg: Optional[SearchConfig] = None,
                  stats: Optional[SearchStats] = None, budget: Optional[_Budget] = None,
                  memo: Optional[dict] = None) -> List[SearchState]:
    """Follow prescribed steps toward ``kind``; returns fully instantiated states.

    ``memo`` maps (state key, kind) to the winning step suffix (or None for a
    dead end) so states reached again from another path are not re-derived.
    """
    cfg = cfg or SearchConfig()
    stats = stats if stats is not None else SearchStats()
    memo = memo if memo is not None else {}
    if not isinstance(st.expr, Scope) or not any(_may_target(s, kind) for _, s in all_scopes(st.expr)):
        return []
    stats.guided_calls += 1
    seen = set()

    def rec(cur: SearchState, steps: int):
        """(step suffix, final state) or None."""
        if isinstance(cur.expr, TensorDecl):
            return (), cur
        key = (cur.key(), kind)
        if key in memo:
            return memo[key]
        if steps >= cfg.guided_cap or (budget is not None and budget.out()):
            return None
        found = None
        for g in select_rules(cur, kind, memo):
            akey = ("apply", key[0], g.app.to_json())
            if akey not in memo:
                try:
                    memo[akey] = apply_step(cur, g.app, depth_cost=0)
                except RuleError as exc:
                    log.debug("guided step %s failed: %s", g.app.rule, exc)
                    memo[akey] = None
            nxt = memo[akey]
            if nxt is None:
                continue
            stats.guided_steps += 1
            k = nxt.key()
            if k in seen:
                continue
            seen.add(k)
            rest = rec(nxt, steps + 1)
            if rest is not None:
                found = ((g.app,) + rest[0], rest[1])
                break
        memo[key] = found
        return found

    res = rec(st, 0)
    if res is None:
        return []
    suffix, final = res
    # memoized states carry another path's trace; only the expression and nodes are reused
    return [SearchState(final.expr, st.depth, st.trace + suffix, final.nodes, final.tensors)]


# explorative derivation ---------------------------------------------------------


def _children(st: SearchState, cfg: SearchConfig, kinds: Sequence[str]) -> List[SearchState]:
    out = []
    for app in intra_proposals(st.expr, cfg.rules):
        try:
            out.append(apply_step(st, app))
        except RuleError:
            continue
    for site, s in leaf_sites(st.expr):
        for kind in kinds:
            if not _may_target(s, kind):
                continue
            app = RuleApplication("OpMatch", site, {"kind": kind})
            try:
                out.append(apply_step(st, app))
            except RuleError:
                pass
        if generate_eoperator(s, cfg.threshold).memory_bound:
            out.append(apply_step(st, RuleApplication("EOpGen", site, {})))
    return out


class _Sink:
    def __init__(self, e0: Scope, cfg: SearchConfig, stats: SearchStats, output_name: Optional[str]):
        self.e0, self.cfg, self.stats, self.output_name = e0, cfg, stats, output_name
        self.found: Dict[tuple, Candidate] = {}

    def add(self, st: SearchState, source: str):
        c = Candidate(to_graph(st, self.output_name), list(st.trace), source=source, depth=st.depth)
        sig = c.signature()
        if sig in self.found:
            return
        if not verify_candidate(c, self.e0, self.cfg.trials, self.cfg.seed):
            self.stats.verify_failures += 1
            log.warning("candidate from %s failed verification; trace %s", source,
                        [a.rule for a in st.trace])
            return
        c.verified = True
        c.cost = estimate(c.graph)
        self.found[sig] = c
        self.stats.candidates = len(self.found)


def explorative_derive(e0: Scope, cfg: Optional[SearchConfig] = None, output_name: Optional[str] = None,
                       stats: Optional[SearchStats] = None) -> Tuple[List[Candidate], SearchStats]:
    """Breadth-first derivation to ``cfg.max_depth`` (guided calls on every dequeued state)."""
    cfg = cfg or SearchConfig()
    stats = stats if stats is not None else SearchStats()
    t0 = time.monotonic()
    budget = _Budget(cfg, stats)
    kinds = cfg.target_kinds()
    sink = _Sink(e0, cfg, stats, output_name)
    seen = FingerprintSet()
    all_keys = set()
    queue = deque([initial_state(e0)])
    stats.states_generated = 1
    all_keys.add(queue[0].key())
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    shared: dict = {}

    def process(st: SearchState) -> List[SearchState]:
        if cfg.guided:
            # the cross-state guidance memo is fingerprint dedup too, so it goes with pruning
            memo = shared if cfg.prune else {}
            for kind in kinds:
                for done in guided_derive(st, kind, cfg, stats, budget, memo):
                    sink.add(done, "guided")
        if not cfg.explorative or st.depth >= cfg.max_depth:
            return []
        return _children(st, cfg, kinds)

    try:
        while queue and not budget.out():
            batch = []
            while queue and len(batch) < max(cfg.workers, 1):
                st = queue.popleft()
                if cfg.prune and not seen.insert(st.key()):
                    stats.states_pruned += 1
                    continue
                batch.append(st)
            if not batch:
                continue
            results = list(pool.map(process, batch)) if pool else [process(b) for b in batch]
            stats.states_expanded += len(batch)
            for kids in results:
                for child in kids:
                    stats.states_generated += 1
                    all_keys.add(child.key())
                    if isinstance(child.expr, TensorDecl):
                        sink.add(child, "explorative")
                        continue
                    queue.append(child)
    finally:
        if pool:
            pool.shutdown()
    stats.states_unique = len(all_keys)
    stats.elapsed_s = round(time.monotonic() - t0, 3)
    return list(sink.found.values()), stats


def derive(e0: Scope, cfg: Optional[SearchConfig] = None, output_name: Optional[str] = None):
    """Hybrid derivation entry point; returns (candidates, stats)."""
    return explorative_derive(e0, cfg, output_name)
