"""Analytic cost model used to rank candidate graphs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from .errors import EmptyCandidates
from .graph import OperatorGraph, OpNode, node_expression
from .oracle import scope_flops

BYTES_PER_ELEMENT = 4


@dataclass(frozen=True)
class CostParams:
    flops_per_s: float = 1e12
    bytes_per_s: float = 1e11
    launch_s: float = 5e-6

    def __post_init__(self):
        if min(self.flops_per_s, self.bytes_per_s, self.launch_s) <= 0:
            raise ValueError("cost parameters must be positive")

    @staticmethod
    def load(path) -> "CostParams":
        return CostParams(**json.loads(Path(path).read_text()))


@dataclass
class NodeCost:
    label: str
    output: str
    flops: int
    bytes_moved: int


@dataclass
class CostEstimate:
    flops: int = 0
    bytes_moved: int = 0
    launches: int = 0
    total: float = 0.0
    nodes: List[NodeCost] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def node_cost(node: OpNode, g: OperatorGraph) -> NodeCost:
    expr = node_expression(node, g.tensors)
    moved = sum(g.tensors[i].size for i in dict.fromkeys(node.inputs)) + g.tensors[node.output].size
    return NodeCost(node.label(), node.output, scope_flops(expr), moved * BYTES_PER_ELEMENT)


def estimate(g: OperatorGraph, params: Optional[CostParams] = None) -> CostEstimate:
    """Cost of the runtime nodes of ``g`` (the compile-time prelude is free)."""
    p = params or CostParams()
    per = [node_cost(n, g) for n in g.nodes]
    flops = sum(c.flops for c in per)
    moved = sum(c.bytes_moved for c in per)
    total = flops / p.flops_per_s + moved / p.bytes_per_s + len(per) * p.launch_s
    return CostEstimate(flops, moved, len(per), total, per)


def _trace_key(c) -> str:
    trace = getattr(c, "trace", None) or []
    return "\n".join(a.to_json() if hasattr(a, "to_json") else str(a) for a in trace)


def rank(candidates: Sequence, params: Optional[CostParams] = None) -> list:
    """Cheapest first; ties go to fewer nodes, then the lexicographically smaller trace."""
    if not candidates:
        raise EmptyCandidates("no candidates to rank")
    keyed = []
    for c in candidates:
        if getattr(c, "cost", None) is None:
            c.cost = estimate(c.graph, params)
        keyed.append(((c.cost.total, len(c.graph.nodes), _trace_key(c)), c))
    keyed.sort(key=lambda t: t[0])
    return [c for _, c in keyed]


def explain(g: OperatorGraph, params: Optional[CostParams] = None) -> str:
    est = estimate(g, params)
    lines = [f"{'node':<14} {'output':<12} {'flops':>10} {'bytes':>10}"]
    for c in est.nodes:
        lines.append(f"{c.label:<14} {c.output:<12} {c.flops:>10} {c.bytes_moved:>10}")
    lines.append(f"total {est.total:.3e} s  ({est.flops} flops, {est.bytes_moved} bytes, {est.launches} launches)")
    return "\n".join(lines)
