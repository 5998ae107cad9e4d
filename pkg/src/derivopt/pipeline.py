"""End-to-end driver: split a program at activations, derive, rank, merge, clean up, verify."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import repeat
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .cost import CostParams, estimate, rank
from .errors import RuleError, ShapeMismatch, VerificationFailed
from .expr import Scope, free_tensors
from .frontend import Subprogram, split_at_activations
from .fingerprint import fingerprint
from .graph import OperatorGraph, OpNode, eval_graph, node_expression, rename_tensors, toposort
from .oracle import random_bindings
from .postprocess import postprocess
from .rules import fuse_expressions
from .search import Candidate, SearchConfig, derive

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    cost: CostParams = field(default_factory=CostParams)
    postprocess: bool = True
    inter_expression: bool = True
    verify_trials: int = 20
    seed: int = 0
    weight_values: Optional[Mapping[str, np.ndarray]] = None
    keep_original: bool = True  # the untouched node competes with derived candidates


@dataclass
class ExpressionReport:
    label: str
    covers: List[str]
    stats: dict
    candidates: List[dict]
    chosen: Optional[dict] = None
    budget_exhausted_without_candidate: bool = False
    cached: bool = False


@dataclass
class SubprogramReport:
    nodes: List[str]
    inputs: List[str]
    outputs: List[str]
    expressions: List[ExpressionReport] = field(default_factory=list)
    plan: List[str] = field(default_factory=list)


@dataclass
class Report:
    subprograms: List[SubprogramReport] = field(default_factory=list)
    activations: List[str] = field(default_factory=list)
    passes: List[dict] = field(default_factory=list)
    verified: bool = False
    verify_trials: int = 0
    cost_before: float = 0.0
    cost_after: float = 0.0
    final_nodes: List[str] = field(default_factory=list)
    wall_clock_s: float = 0.0

    @property
    def exhausted_without_candidate(self) -> bool:
        """Some node's own search ran out of budget before finding anything (fused alternatives excluded)."""
        return any(e.budget_exhausted_without_candidate and len(e.covers) == 1
                   for s in self.subprograms for e in s.expressions)

    def totals(self) -> dict:
        keys = ("states_generated", "states_unique", "states_pruned", "guided_calls", "guided_steps",
                "candidates")
        out = {k: 0 for k in keys}
        for s in self.subprograms:
            for e in s.expressions:
                if e.cached:
                    continue  # no search work was done for a cached expression
                for k in keys:
                    out[k] += e.stats.get(k, 0)
        gen = out["states_generated"]
        out["prune_ratio"] = round((gen - out["states_unique"]) / gen, 4) if gen else 0.0
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["totals"] = self.totals()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def text(self) -> str:
        lines = []
        for k, s in enumerate(self.subprograms):
            lines.append(f"subprogram {k}: nodes {', '.join(s.nodes)}")
            for e in s.expressions:
                st = e.stats
                lines.append(f"  {e.label}: {len(e.candidates)} candidates, "
                             f"{st.get('states_generated', 0)} states generated, "
                             f"{st.get('states_unique', 0)} unique, prune ratio {st.get('prune_ratio', 0)}, "
                             f"{st.get('guided_steps', 0)} guided steps, {st.get('elapsed_s', 0)} s"
                             + (" (cached)" if e.cached else ""))
                if e.chosen:
                    lines.append(f"    chosen: {' '.join(e.chosen['nodes'])}  cost {e.chosen['cost']:.3e} s")
            if s.plan:
                lines.append(f"  plan: {'; '.join(s.plan)}")
        if self.activations:
            lines.append(f"activations kept: {', '.join(self.activations)}")
        for p in self.passes:
            lines.append(f"pass {p['pass']}: {p['nodes_before']} -> {p['nodes_after']} nodes")
        t = self.totals()
        lines.append(f"totals: {t['states_generated']} states generated, prune ratio {t['prune_ratio']}, "
                     f"{t['guided_steps']} guided steps, {t['candidates']} candidates")
        lines.append(f"cost {self.cost_before:.3e} s -> {self.cost_after:.3e} s; final nodes: "
                     f"{' '.join(self.final_nodes)}")
        lines.append(f"verified: {self.verified} ({self.verify_trials} trials); wall clock {self.wall_clock_s} s")
        return "\n".join(lines)


def summarize(c: Candidate) -> dict:
    nodes = []
    for n in c.graph.nodes:
        entry = {"kind": n.kind, "label": n.label()}
        if not n.is_eop:
            entry["attrs"] = {k: v for k, v in n.attrs.items() if k not in ("views", "out_view", "sizes")}
        nodes.append(entry)
    return {"nodes": [n["label"] for n in nodes], "detail": nodes, "cost": c.cost.total if c.cost else None,
            "source": c.source, "depth": c.depth}


# per-expression derivation ------------------------------------------------------


@dataclass
class _Choice:
    covers: Tuple[str, ...]
    best: Optional[Candidate]
    report: ExpressionReport


_CANON_OUT = "__out"
_DERIVATIONS: Dict[tuple, tuple] = {}
_DERIVATION_CAP = 256


def clear_derivation_cache():
    _DERIVATIONS.clear()


def _renamed(c: Candidate, mapping: Dict[str, str], prefix: str) -> Candidate:
    """Candidate over caller names; intermediates get a per-node prefix so merges cannot collide."""
    full = {t: mapping.get(t, f"{prefix}_{t}") for t in c.graph.tensors}
    g = rename_tensors(c.graph, full)
    return Candidate(g, list(c.trace), c.cost, c.source, c.depth, c.verified)


def _derive_one(label: str, e0: Scope, output: str, covers, cfg: PipelineConfig,
                names: Optional[Dict[str, str]] = None) -> _Choice:
    """Derive and rank ``e0``; ``names`` maps its (canonical) input names back to the program's."""
    key = (fingerprint(e0), repr(cfg.search), cfg.cost)
    hit = _DERIVATIONS.get(key)
    if hit is None:
        cands, stats = derive(e0, cfg.search, output_name=_CANON_OUT)
        cands = rank(cands, cfg.cost) if cands else []
        hit = (cands, stats.to_dict(), stats.budget_exhausted)
        if len(_DERIVATIONS) >= _DERIVATION_CAP:
            _DERIVATIONS.clear()
        _DERIVATIONS[key] = hit
        cached = False
    else:
        cached = True
    cands, stats, exhausted = hit
    if names is None:
        names = {t.name: t.name for t in free_tensors(e0)}
    mapping = dict(names) | {_CANON_OUT: output}
    cands = [_renamed(c, mapping, output) for c in cands]
    rep = ExpressionReport(label, list(covers), dict(stats), [summarize(c) for c in cands], cached=cached)
    if not cands:
        rep.budget_exhausted_without_candidate = exhausted
        return _Choice(tuple(covers), None, rep)
    rep.chosen = summarize(cands[0])
    return _Choice(tuple(covers), cands[0], rep)


def _canonical_expression(n: OpNode, g: OperatorGraph) -> Tuple[Scope, Dict[str, str]]:
    """The node's expression over positional input names, so isomorphic nodes share derivations."""
    canon = {i: f"in{k}" for k, i in enumerate(dict.fromkeys(n.inputs))}
    tensors = {c: replace(g.tensors[i], name=c) for i, c in canon.items()}
    tensors[_CANON_OUT] = replace(g.tensors[n.output], name=_CANON_OUT)
    node = OpNode(n.kind, dict(n.attrs), tuple(canon[i] for i in n.inputs), (_CANON_OUT,))
    return node_expression(node, tensors), {c: i for i, c in canon.items()}


def _fusion_pairs(sub: Subprogram, g: OperatorGraph):
    """(producer, consumer) pairs inside ``sub`` joined by a single-use intermediate."""
    members = {n.output: n for n in sub.nodes}
    for c in toposort(sub.nodes):
        for i in dict.fromkeys(c.inputs):
            p = members.get(i)
            if p is None or i in sub.outputs or i in g.outputs:
                continue
            if sum(i in n.inputs for n in g.nodes) == 1:
                yield p, c


def _original(n: OpNode, g: OperatorGraph, cfg: PipelineConfig) -> Candidate:
    tensors = {k: g.tensors[k] for k in n.inputs + n.outputs}
    c = Candidate(OperatorGraph(tensors, [n], [n.output]), [], source="original", verified=True)
    c.cost = estimate(c.graph, cfg.cost)
    return c


def optimize_subprogram(sub: Subprogram, g: OperatorGraph, cfg: PipelineConfig) -> Tuple[List[Candidate],
                                                                                      SubprogramReport]:
    rep = SubprogramReport([n.output for n in sub.nodes], list(sub.inputs), list(sub.outputs))
    choice: Dict[str, Candidate] = {}
    for n in toposort(sub.nodes):
        e0, names = _canonical_expression(n, g)
        ch = _derive_one(f"{n.kind}->{n.output}", e0, n.output, [n.output], cfg, names)
        rep.expressions.append(ch.report)
        orig = _original(n, g, cfg)
        if ch.best is None or (cfg.keep_original and orig.cost.total < ch.best.cost.total):
            choice[n.output] = orig
        else:
            choice[n.output] = ch.best
    groups: Dict[str, Tuple[str, ...]] = {o: (o,) for o in choice}
    if cfg.inter_expression:
        # one round of producer-consumer fusion; the fused form competes with the separate pair
        used = set()
        for p, c in list(_fusion_pairs(sub, g)):
            if p.output in used or c.output in used:
                continue
            try:
                fused = fuse_expressions(node_expression(c, g.tensors), node_expression(p, g.tensors), p.output)
            except RuleError as exc:
                log.debug("no fused form for %s -> %s: %s", p.output, c.output, exc)
                continue
            ch = _derive_one(f"fused {p.output}+{c.output}", fused, c.output, [p.output, c.output], cfg)
            rep.expressions.append(ch.report)
            separate = choice[p.output].cost.total + choice[c.output].cost.total
            if ch.best is not None and ch.best.cost.total < separate:
                choice[c.output] = ch.best
                del choice[p.output]
                groups[c.output] = (p.output, c.output)
                groups.pop(p.output)
                used |= {p.output, c.output}
    picked = []
    for out, c in choice.items():
        rep.plan.append(f"{'+'.join(groups[out])}: {' '.join(n.label() for n in c.graph.nodes)} ({c.source})")
        picked.append(c)
    return picked, rep


# merge and verify ---------------------------------------------------------------


def merge_candidates(g: OperatorGraph, replaced: set, parts: List[Candidate]) -> OperatorGraph:
    """``g`` with the nodes producing ``replaced`` swapped for the candidate graphs."""
    out = OperatorGraph(dict(g.tensors), [n for n in g.nodes if n.output not in replaced], list(g.outputs),
                        set(g.weights), list(g.prelude), dict(g.constants))
    produced = {n.output for n in out.nodes}
    for c in parts:
        for n in toposort(c.graph.nodes):
            decl = c.graph.tensors[n.output]
            if n.output in produced:
                # intermediate names come from expression fingerprints: same name, same value
                if out.tensors[n.output].shape != decl.shape:
                    raise ShapeMismatch(f"two producers disagree on the shape of {n.output}")
                continue
            out.nodes.append(n)
            produced.add(n.output)
        for t, decl in c.graph.tensors.items():
            out.tensors.setdefault(t, decl)
    out.nodes = toposort(out.nodes)
    return out


def verify_graphs(reference: OperatorGraph, candidate: OperatorGraph, trials: int = 20, seed: int = 0,
                  values: Optional[Mapping[str, np.ndarray]] = None) -> List[dict]:
    """Per-trial mismatches between two graphs on shared random bindings (empty when equal)."""
    rng = np.random.default_rng(seed)
    names = reference.graph_inputs()
    failures = []
    for t in range(trials):
        b = random_bindings([reference.tensors[n] for n in names], rng)
        if values:
            b.update({k: np.asarray(v) for k, v in values.items() if k in b})
        want = eval_graph(reference, b)
        got = eval_graph(candidate, {k: v for k, v in b.items() if k in candidate.graph_inputs()})
        for o in reference.outputs:
            if o not in got or got[o].shape != want[o].shape or not np.array_equal(got[o], want[o]):
                bad = int(np.sum(got[o] != want[o])) if o in got and got[o].shape == want[o].shape else -1
                failures.append({"trial": t, "output": o, "mismatches": bad})
    return failures


def optimize(program: OperatorGraph, cfg: Optional[PipelineConfig] = None) -> Tuple[OperatorGraph, Report]:
    """Split, derive each expression, pick the cheapest candidates, merge, clean up and verify."""
    cfg = cfg or PipelineConfig()
    t0 = time.monotonic()
    report = Report()
    split = split_at_activations(program)
    report.activations = [f"{a.kind}->{a.output}" for a in split.activations]
    parts: List[Candidate] = []
    replaced = set()
    workers = max(1, cfg.search.workers)
    if workers > 1 and len(split.subprograms) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(optimize_subprogram, split.subprograms, repeat(program), repeat(cfg)))
    else:
        results = [optimize_subprogram(sub, program, cfg) for sub in split.subprograms]
    for sub, (picked, srep) in zip(split.subprograms, results):
        report.subprograms.append(srep)
        parts.extend(picked)
        replaced |= {n.output for n in sub.nodes}
    merged = merge_candidates(program, replaced, parts)
    final = merged
    if cfg.postprocess:
        final, logs, _ = postprocess(merged, cfg.weight_values)
        report.passes = [p.to_dict() for p in logs]
    report.cost_before = estimate(program, cfg.cost).total
    report.cost_after = estimate(final, cfg.cost).total
    report.final_nodes = [n.label() for n in final.nodes]
    failures = verify_graphs(program, final, cfg.verify_trials, cfg.seed, cfg.weight_values)
    report.verify_trials = cfg.verify_trials
    report.verified = not failures
    report.wall_clock_s = round(time.monotonic() - t0, 3)
    if failures:
        raise VerificationFailed(f"optimized graph differs from the program: {failures[:3]}")
    return final, report
