"""Operator graphs: library-operator and eOperator nodes over named tensors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional

import numpy as np

from .errors import CycleError, MissingInput, ShapeMismatch
from .expr import Scope, TensorDecl
from .oracle import eval_expression
from .registry import parse_index, template_of


@dataclass
class OpNode:
    kind: str
    attrs: dict
    inputs: tuple
    outputs: tuple
    expr: Optional[Scope] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.inputs = tuple(self.inputs)
        self.outputs = tuple(self.outputs)

    @property
    def output(self) -> str:
        return self.outputs[0]

    @property
    def is_eop(self) -> bool:
        return self.kind == "EOperator"

    def label(self) -> str:
        if self.is_eop:
            return self.attrs.get("name", "EOperator")
        return self.kind


@dataclass
class OperatorGraph:
    tensors: Dict[str, TensorDecl] = field(default_factory=dict)
    nodes: List[OpNode] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    weights: set = field(default_factory=set)
    prelude: List[OpNode] = field(default_factory=list)
    constants: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OperatorGraph":
        return OperatorGraph(dict(self.tensors), list(self.nodes), list(self.outputs), set(self.weights),
                             list(self.prelude), dict(self.constants))

    def producers(self) -> Dict[str, OpNode]:
        out = {}
        for n in self.prelude + self.nodes:
            for o in n.outputs:
                out[o] = n
        return out

    def consumers(self, name: str) -> List[OpNode]:
        return [n for n in self.nodes if name in n.inputs]

    def graph_inputs(self) -> List[str]:
        produced = set(self.producers())
        seen: List[str] = []
        for n in self.prelude + self.nodes:
            for i in n.inputs:
                if i not in produced and i not in seen and i not in self.constants:
                    seen.append(i)
        for o in self.outputs:
            if o not in produced and o not in seen and o not in self.constants:
                seen.append(o)
        return seen

    def eop_count(self) -> int:
        return sum(1 for n in self.nodes if n.is_eop)

    def kinds(self) -> List[str]:
        return [n.kind for n in self.nodes]


def toposort(nodes: List[OpNode]) -> List[OpNode]:
    produced = {o: n for n in nodes for o in n.outputs}
    order: List[OpNode] = []
    state: Dict[int, int] = {}

    def visit(n, stack):
        key = id(n)
        if state.get(key) == 2:
            return
        if state.get(key) == 1:
            raise CycleError(f"cycle through node producing {n.outputs}")
        state[key] = 1
        for i in n.inputs:
            p = produced.get(i)
            if p is not None:
                visit(p, stack)
        state[key] = 2
        order.append(n)

    for n in nodes:
        visit(n, [])
    return order


def node_expression(node: OpNode, tensors: Mapping[str, TensorDecl]) -> Scope:
    """Expression computing the node's formal output (before any output view)."""
    if node.is_eop:
        if node.expr is None:
            from .text import parse_expr

            node.expr = parse_expr(node.attrs["expr"], tensors)
        return node.expr
    decls = tuple(tensors[i] for i in node.inputs)
    out = tensors.get(node.output)
    out_shape = out.shape if out is not None else None
    key = (node.kind, json.dumps(node.attrs, sort_keys=True), decls, out_shape)
    hit = _EXPR_CACHE.get(key)
    if hit is None:
        hit = template_of(node.kind).instantiate(node.attrs, list(decls), out_shape)
        if len(_EXPR_CACHE) > 50_000:
            _EXPR_CACHE.clear()
        _EXPR_CACHE[key] = hit
    return hit


_EXPR_CACHE: Dict[tuple, Scope] = {}


def scatter_output(node: OpNode, scope: Scope, value: np.ndarray, out_shape) -> np.ndarray:
    view = node.attrs.get("out_view")
    if not view:
        if tuple(value.shape) != tuple(out_shape):
            raise ShapeMismatch(f"{node.kind} produced {value.shape}, tensor declared {tuple(out_shape)}")
        return value
    names = {i.name: i.id for i in scope.traversal}
    n = len(scope.traversal)
    vals = {}
    for k, i in enumerate(scope.traversal):
        shape = [1] * n
        shape[k] = i.width
        vals[i.id] = np.arange(i.lo, i.hi).reshape(shape)
    full = scope.shape
    coords = tuple(np.broadcast_to(np.asarray(parse_index(v, names).evaluate(vals)), full) for v in view)
    out = np.zeros(tuple(out_shape), dtype=np.int64)
    out[coords] = value
    return out


def eval_node(node: OpNode, tensors, values, memo: bool = True) -> np.ndarray:
    scope = node_expression(node, tensors)
    value = eval_expression(scope, values, memo=memo)
    return scatter_output(node, scope, value, tensors[node.output].shape)


def eval_graph(g: OperatorGraph, bindings: Mapping[str, np.ndarray], memo: bool = True,
               keep_all: bool = False) -> Dict[str, np.ndarray]:
    values: Dict[str, np.ndarray] = dict(g.constants)
    values.update({k: np.asarray(v, dtype=np.int64) for k, v in bindings.items()})
    for name in g.graph_inputs():
        if name not in values:
            raise MissingInput(f"graph input {name} is not bound")
    for n in toposort(g.prelude) + toposort(g.nodes):
        values[n.output] = eval_node(n, g.tensors, values, memo)
    if keep_all:
        return values
    missing = [o for o in g.outputs if o not in values]
    if missing:
        raise MissingInput(f"outputs never produced: {missing}")
    return {o: values[o] for o in g.outputs}


def _rename_expr(e: Scope, mapping: Mapping[str, str]) -> Scope:
    from .expr import Access, map_compute, rebuild

    def visit(n):
        if isinstance(n, Access):
            t = n.tensor
            if isinstance(t, Scope):
                return Access(_rename_expr(t, mapping), n.indices)
            if t.name in mapping:
                return Access(replace(t, name=mapping[t.name]), n.indices)
        return None

    return rebuild(e, body=map_compute(e.body, visit))


def rename_tensors(g: OperatorGraph, mapping: Mapping[str, str]) -> OperatorGraph:
    """Copy of ``g`` with tensors renamed (eOperator expressions included)."""
    ren = lambda n: mapping.get(n, n)  # noqa: E731

    def node(n: OpNode) -> OpNode:
        expr, attrs = n.expr, dict(n.attrs)
        if n.is_eop:
            expr = _rename_expr(node_expression(n, g.tensors), mapping)
            attrs.pop("expr", None)
        return OpNode(n.kind, attrs, tuple(ren(i) for i in n.inputs), tuple(ren(o) for o in n.outputs), expr)

    return OperatorGraph({ren(k): replace(v, name=ren(k)) for k, v in g.tensors.items()},
                         [node(n) for n in g.nodes], [ren(o) for o in g.outputs], {ren(w) for w in g.weights},
                         [node(n) for n in g.prelude], {ren(k): v for k, v in g.constants.items()})
