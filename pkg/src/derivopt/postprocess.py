"""Graph clean-up after derivation: eOperator fusion, identity removal, weight folding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import RuleError
from .expr import Access, Scope, TensorDecl, child_scopes, free_tensors, map_compute, rebuild
from .graph import OperatorGraph, OpNode, eval_graph, node_expression, toposort
from .index import IndexExpr, format_index
from .matcher import generate_eoperator, is_identity
from .registry import parse_index
from .rules import fuse_expressions, merge_traversals

log = logging.getLogger(__name__)

IDENTITY_EXACT_LIMIT = 1 << 20
IDENTITY_SAMPLES = 4096


@dataclass
class PassLog:
    name: str
    before: int
    after: int

    def to_dict(self) -> dict:
        return {"pass": self.name, "nodes_before": self.before, "nodes_after": self.after}


def eop_node(expr: Scope, output: str) -> OpNode:
    e = generate_eoperator(expr)
    return OpNode("EOperator", {"name": e.name, "bound": e.bound, "intensity": round(e.intensity, 4)},
                  tuple(t.name for t in free_tensors(expr)), (output,), expr=expr)


def _drop_unused(g: OperatorGraph):
    used = {i for n in g.prelude + g.nodes for i in n.inputs}
    used |= {o for n in g.prelude + g.nodes for o in n.outputs} | set(g.outputs) | set(g.constants)
    g.tensors = {k: v for k, v in g.tensors.items() if k in used}


# fusion -------------------------------------------------------------------------


def _inline_children(e: Scope) -> Scope:
    """Merge fused-in producers into the consumer where traversal merging allows it."""
    k = 0
    while k < len(child_scopes(e)):
        try:
            e = merge_traversals(e, k)
        except RuleError:
            k += 1
    return e


def _fuse_once(g: OperatorGraph) -> bool:
    producers = {n.output: n for n in g.nodes}
    for c in toposort(g.nodes):
        if not c.is_eop:
            continue
        for name in dict.fromkeys(c.inputs):
            p = producers.get(name)
            if p is None or not p.is_eop or name in g.outputs or len(g.consumers(name)) != 1:
                continue
            try:
                fused = fuse_expressions(node_expression(c, g.tensors), node_expression(p, g.tensors), name)
            except RuleError as exc:
                log.debug("cannot fuse %s into %s: %s", p.output, c.output, exc)
                continue
            new = eop_node(_inline_children(fused), c.output)
            g.nodes = [new if n is c else n for n in g.nodes if n is not p]
            return True
    return False


def fuse_eoperators(g: OperatorGraph) -> OperatorGraph:
    """Fuse every eOperator into its eOperator consumer over single-use edges, to fixpoint."""
    g = g.copy()
    while _fuse_once(g):
        pass
    _drop_unused(g)
    return g


# identity elimination -----------------------------------------------------------


def _row_major(idx, shape) -> object:
    flat = 0
    for ix, n in zip(idx, shape):
        flat = flat * n + ix
    return flat


def identity_copy(node: OpNode, g: OperatorGraph, seed: int = 0) -> bool:
    """True if the eOperator moves no data: output flat index == input flat index everywhere."""
    if not node.is_eop or len(set(node.inputs)) != 1:
        return False
    s = node_expression(node, g.tensors)
    src, dst = g.tensors[node.inputs[0]], g.tensors[node.output]
    b = s.body
    if s.summation or s.guards or not isinstance(b, Access) or not isinstance(b.tensor, TensorDecl):
        return False
    if src.size != dst.size or any(p != (0, 0) for p in dst.pad) or s.shape != dst.shape:
        return False
    total = dst.size
    if total <= IDENTITY_EXACT_LIMIT:
        coords = np.indices(s.shape).reshape(s.rank, -1)
    else:
        rng = np.random.default_rng(seed)
        coords = np.stack([rng.integers(0, n, IDENTITY_SAMPLES) for n in s.shape])
        if not is_identity(s):
            return False
    vals = {t.id: coords[k] + t.lo for k, t in enumerate(s.traversal)}
    reads = [np.broadcast_to(np.asarray(ix.evaluate(vals)), coords.shape[1:]) for ix in b.indices]
    if any(r.min() < 0 or r.max() >= n for r, n in zip(reads, src.shape)):
        return False
    return bool(np.array_equal(_row_major(reads, src.shape), _row_major(list(coords), s.shape)))


def _strides(shape) -> List[int]:
    out, acc = [], 1
    for n in reversed(shape):
        out.append(acc)
        acc *= n
    return out[::-1]


def reindex(idx: Sequence[IndexExpr], old: Sequence[int], new: Sequence[int], env) -> Tuple[IndexExpr, ...]:
    """Indices into ``new`` that address the same flat offset as ``idx`` into ``old``."""
    flat = IndexExpr.lit(0)
    for ix, st in zip(idx, _strides(old)):
        flat = flat + ix.scale(st)
    out = []
    for k, st in enumerate(_strides(new)):
        x = flat.floordiv(st)
        if k:
            x = x.mod(new[k])
        out.append(x.simplify(env))
    return tuple(out)


def _retarget(e: Scope, old: TensorDecl, new: TensorDecl) -> Scope:
    env = e.env

    def visit(n):
        if isinstance(n, Access):
            if isinstance(n.tensor, Scope):
                return Access(_retarget(n.tensor, old, new), n.indices)
            if n.tensor.name == old.name:
                return Access(new, reindex(n.indices, old.shape, new.shape, env))
        return None

    return rebuild(e, body=map_compute(e.body, visit))


def _rewire(c: OpNode, g: OperatorGraph, old: TensorDecl, new: TensorDecl) -> Optional[OpNode]:
    """Consumer ``c`` reading ``new`` in place of the aliased ``old``; None if impossible."""
    inputs = tuple(new.name if i == old.name else i for i in c.inputs)
    if c.is_eop:
        return eop_node(_retarget(node_expression(c, g.tensors), old, new), c.output)
    if old.shape == new.shape and old.pad == new.pad:
        return OpNode(c.kind, dict(c.attrs), inputs, c.outputs)
    views = c.attrs.get("views")
    if not views:
        return None
    scope = node_expression(c, g.tensors)
    names = {i.name: i.id for i in scope.iterators}
    ids = {v: k for k, v in names.items()}
    views = {str(k): list(v) for k, v in (views.items() if isinstance(views, dict) else enumerate(views))}
    for pos, i in enumerate(c.inputs):
        if i == old.name:
            idx = [parse_index(v, names) for v in views[str(pos)]]
            views[str(pos)] = [format_index(x, ids) for x in reindex(idx, old.shape, new.shape, scope.env)]
    return OpNode(c.kind, {**c.attrs, "views": views}, inputs, c.outputs)


def eliminate_identity(g: OperatorGraph) -> OperatorGraph:
    """Remove eOperators that leave the flat data unchanged and let consumers read the source."""
    g = g.copy()
    changed = True
    while changed:
        changed = False
        for n in list(g.nodes):
            if n.output in g.outputs or not identity_copy(n, g):
                continue
            old, new = g.tensors[n.output], g.tensors[n.inputs[0]]
            repl = {}
            for c in g.consumers(n.output):
                r = _rewire(c, g, old, new)
                if r is None:
                    break
                repl[id(c)] = r
            else:
                g.nodes = [repl.get(id(m), m) for m in g.nodes if m is not n]
                changed = True
                break
    _drop_unused(g)
    return g


# compile-time evaluation --------------------------------------------------------


def fold_weights(g: OperatorGraph, values: Optional[Mapping[str, np.ndarray]] = None
                 ) -> Tuple[OperatorGraph, Dict[str, np.ndarray]]:
    """Move nodes that depend only on weights to the compile-time prelude.

    With weight ``values`` the prelude is evaluated and its results that the
    runtime graph still reads become constants.
    """
    g = g.copy()
    static = set(g.weights) | set(g.constants) | {n.output for n in g.prelude}
    moved = []
    for n in toposort(g.nodes):
        if n.inputs and all(i in static for i in n.inputs) and n.output not in g.outputs:
            moved.append(n)
            static.add(n.output)
    if not moved:
        return g, {}
    ids = {id(n) for n in moved}
    g.nodes = [n for n in g.nodes if id(n) not in ids]
    g.prelude = g.prelude + moved
    folded: Dict[str, np.ndarray] = {}
    if values is not None:
        needed = {w for n in g.prelude for w in n.inputs if w in g.weights}
        if needed <= set(values):
            pre = OperatorGraph(dict(g.tensors), [], [], set(g.weights), list(g.prelude), dict(g.constants))
            computed = eval_graph(pre, {k: values[k] for k in needed}, keep_all=True)
            runtime_reads = {i for n in g.nodes for i in n.inputs} | set(g.outputs)
            for n in g.prelude:
                if n.output in runtime_reads:
                    folded[n.output] = computed[n.output]
            g.constants.update(folded)
            g.prelude = []
    _drop_unused(g)
    return g, folded


def postprocess(g: OperatorGraph, values: Optional[Mapping[str, np.ndarray]] = None
                ) -> Tuple[OperatorGraph, List[PassLog], Dict[str, np.ndarray]]:
    """Fusion and identity removal to a joint fixpoint, then weight folding."""
    logs: List[PassLog] = []
    while True:
        start = len(g.nodes)
        for name, fn in (("fuse_eoperators", fuse_eoperators), ("eliminate_identity", eliminate_identity)):
            before = len(g.nodes)
            g = fn(g)
            logs.append(PassLog(name, before, len(g.nodes)))
        if len(g.nodes) == start:
            break
    before = len(g.nodes)
    g, folded = fold_weights(g, values)
    logs.append(PassLog("fold_weights", before, len(g.nodes)))
    return g, logs, folded
