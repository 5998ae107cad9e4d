"""Program loading, node-to-expression translation and activation splitting.

Program file schema (JSON, unknown fields rejected)::

    {"tensors": [{"name": str, "shape": [int...], "pad": [[lo, hi]...]?, "weight": bool?}],
     "nodes":   [{"kind": str, "attrs": {...}?, "inputs": [str...], "outputs": [str]}],
     "outputs": [str...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

from .errors import BadAttr, ParseError, ShapeMismatch, UnknownOp
from .expr import Scope, TensorDecl
from .graph import OperatorGraph, OpNode, node_expression, toposort
from .registry import OP_KINDS, template_of
from .text import format_expr

_TENSOR_KEYS = {"name", "shape", "pad", "weight"}
_NODE_KEYS = {"kind", "attrs", "inputs", "outputs"}
_TOP_KEYS = {"tensors", "nodes", "outputs"}


def _reject_unknown(obj: dict, allowed: set, where: str):
    if not isinstance(obj, dict):
        raise ParseError(f"{where} must be an object")
    extra = set(obj) - allowed
    if extra:
        raise ParseError(f"unknown field(s) {sorted(extra)} in {where}")


def graph_from_dict(data: dict) -> OperatorGraph:
    _reject_unknown(data, _TOP_KEYS, "program")
    g = OperatorGraph()
    for t in data.get("tensors", []):
        _reject_unknown(t, _TENSOR_KEYS, "tensor")
        try:
            pad = tuple(tuple(p) for p in t.get("pad", [])) or ()
            decl = TensorDecl(t["name"], tuple(t["shape"]), pad)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad tensor entry {t}: {exc}") from exc
        if decl.name in g.tensors:
            raise ParseError(f"tensor {decl.name} declared twice")
        g.tensors[decl.name] = decl
        if t.get("weight"):
            g.weights.add(decl.name)
    for n in data.get("nodes", []):
        _reject_unknown(n, _NODE_KEYS, "node")
        kind = n.get("kind")
        if kind not in OP_KINDS:
            raise UnknownOp(f"unknown operator kind {kind!r}")
        node = OpNode(kind, dict(n.get("attrs", {})), tuple(n.get("inputs", [])), tuple(n.get("outputs", [])))
        if len(node.outputs) != 1:
            raise ParseError(f"{kind} node must have exactly one output")
        for name in node.inputs + node.outputs:
            if name not in g.tensors:
                raise ParseError(f"tensor {name} used by {kind} is not declared")
        g.nodes.append(node)
    g.outputs = list(data.get("outputs", []))
    for o in g.outputs:
        if o not in g.tensors:
            raise ParseError(f"output {o} is not declared")
    validate(g)
    return g


def validate(g: OperatorGraph):
    producers: Dict[str, OpNode] = {}
    for n in g.nodes:
        if n.output in producers:
            raise ParseError(f"tensor {n.output} produced twice")
        producers[n.output] = n
    toposort(g.nodes)
    for n in g.nodes:
        scope = to_expression(n, g)
        if not n.attrs.get("out_view") and scope.shape != g.tensors[n.output].shape:
            raise ShapeMismatch(f"{n.kind} computes shape {scope.shape} but {n.output} is "
                                f"{g.tensors[n.output].shape}")


def load_program(path: Union[str, Path, dict]) -> OperatorGraph:
    """Load and validate a program file (or an already-parsed dict)."""
    if isinstance(path, dict):
        return graph_from_dict(path)
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return graph_from_dict(data)


def graph_to_dict(g: OperatorGraph) -> dict:
    tensors = []
    for name, t in g.tensors.items():
        entry = {"name": name, "shape": list(t.shape)}
        if any(p != (0, 0) for p in t.pad):
            entry["pad"] = [list(p) for p in t.pad]
        if name in g.weights:
            entry["weight"] = True
        tensors.append(entry)
    nodes = []
    for n in g.prelude + g.nodes:
        attrs = dict(n.attrs)
        if n.is_eop and n.expr is not None:
            attrs["expr"] = format_expr(n.expr)
        nodes.append({"kind": n.kind, "attrs": attrs, "inputs": list(n.inputs), "outputs": list(n.outputs)})
    return {"tensors": tensors, "nodes": nodes, "outputs": list(g.outputs)}


def save_program(g: OperatorGraph, path: Union[str, Path]):
    Path(path).write_text(json.dumps(graph_to_dict(g), indent=2) + "\n")


def to_expression(node: OpNode, g: OperatorGraph) -> Scope:
    """Defining expression of a node with concrete shapes."""
    try:
        return node_expression(node, g.tensors)
    except (KeyError, TypeError) as exc:
        raise BadAttr(f"{node.kind}: {exc}") from exc


def is_nonlinear(node: OpNode) -> bool:
    return not node.is_eop and template_of(node.kind).nonlinear


@dataclass
class Subprogram:
    nodes: List[OpNode]
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)


@dataclass
class Split:
    subprograms: List[Subprogram]
    activations: List[OpNode]
    cut_edges: List[tuple]


def split_at_activations(g: OperatorGraph) -> Split:
    """Partition linear nodes into connected pieces separated by nonlinear nodes."""
    order = toposort(g.nodes)
    linear = [n for n in order if not is_nonlinear(n)]
    acts = [n for n in order if is_nonlinear(n)]
    parent = {id(n): id(n) for n in linear}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    producer = {n.output: n for n in order}
    for n in linear:
        for i in n.inputs:
            p = producer.get(i)
            if p is not None and not is_nonlinear(p):
                parent[find(id(n))] = find(id(p))
    groups: Dict[int, List[OpNode]] = {}
    for n in linear:
        groups.setdefault(find(id(n)), []).append(n)
    subs = []
    cut_edges = []
    for members in groups.values():
        names_out = {n.output for n in members}
        inputs, outputs = [], []
        for n in members:
            for i in n.inputs:
                if i not in names_out and i not in inputs:
                    inputs.append(i)
        for n in members:
            used_outside = any(n.output in m.inputs for m in order if m not in members)
            if used_outside or n.output in g.outputs:
                outputs.append(n.output)
        subs.append(Subprogram(members, inputs, outputs))
    for a in acts:
        for i in a.inputs:
            if i in producer:
                cut_edges.append((producer[i].output, a.output))
        for m in order:
            if a.output in m.inputs:
                cut_edges.append((a.output, m.output))
    return Split(subs, acts, cut_edges)
