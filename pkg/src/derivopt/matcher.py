"""Instantiating scopes: library-operator matching and eOperator generation.

Free-stride templates (gemm and elementwise styles) are matched through the
iterator mapping table.  Every scope iterator is classified by which operands
(and whether the output) it indexes; iterators sharing a class are fused,
row-major, into the template iterator of that class, and each operand is read
through a *view* whose flat address must be affine in the template iterators
(a BLAS-style strided operand).  Structured templates (Conv, ConvTranspose,
G2BMM, Reshape) infer their attributes from the scope and compare
fingerprints with a fresh instantiation.  Every match is checked with the
oracle before it is returned.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DerivError
from .expr import (Access, Const, Iterator, Op, Scope, TensorDecl, COMMUTATIVE, accesses, all_scopes,
                   child_scopes, free_tensors, it, rebuild, replace_at, scope_at)
from .fingerprint import fingerprint, fingerprint_int
from .graph import OpNode, eval_node
from .index import IndexExpr, format_index
from .oracle import count_points, eval_expression, random_bindings, scope_flops
from .registry import OpTemplate, registry, template_of
from .text import _names

log = logging.getLogger(__name__)

INTENSITY_THRESHOLD = 1.0
GROUP_PERM_CAP = 6
ORDER_TRIES = 5040
GRID_CAP = 1 << 22
CHECK_TRIALS = 3
_PROBE_SIZES = (2, 3, 5, 7, 11, 13)


@dataclass
class NoMatch:
    reason: str

    def __bool__(self):
        return False


@dataclass
class MatchResult:
    kind: str
    assignment: Dict[int, str]
    roles: Tuple[str, ...]
    attrs: dict
    inputs: Tuple[TensorDecl, ...]
    scope: Scope = field(repr=False)
    strides: Dict[str, tuple] = field(default_factory=dict)
    formals: Dict[int, list] = field(default_factory=dict, repr=False)
    plain: Tuple[bool, ...] = ()

    @property
    def strided(self) -> bool:
        return "views" in self.attrs or "out_view" in self.attrs

    def node(self, output: str) -> OpNode:
        return OpNode(self.kind, dict(self.attrs), tuple(d.name for d in self.inputs), (output,))


# body unification -----------------------------------------------------------


def _unify(t, s, binding: dict) -> List[dict]:
    """All role bindings under which template body ``t`` matches scope body ``s``."""
    if isinstance(t, Access):
        if not isinstance(s, Access) or not isinstance(s.tensor, TensorDecl):
            return []
        role = t.tensor.name
        if role in binding:
            return []
        return [{**binding, role: s}]
    if isinstance(t, Const):
        return [binding] if isinstance(s, Const) and s.value == t.value else []
    if not isinstance(s, Op) or s.kind != t.kind or len(s.args) != len(t.args):
        return []
    orders = itertools.permutations(s.args) if t.kind in COMMUTATIVE and len(s.args) <= 4 else [s.args]
    out: List[dict] = []
    for args in orders:
        partial = [binding]
        for ta, sa in zip(t.args, args):
            partial = [b2 for b in partial for b2 in _unify(ta, sa, b)]
            if not partial:
                break
        for b in partial:
            if b not in out:
                out.append(b)
    return out


# probes -----------------------------------------------------------------------


@dataclass
class _Probe:
    scope: Scope
    letters: Dict[str, str]  # formal iterator name -> size letter


def _probes(tmpl: OpTemplate, rank: int) -> List[_Probe]:
    key = (tmpl.kind, rank)
    if key not in _PROBE_CACHE:
        _PROBE_CACHE[key] = _make_probes(tmpl, rank)
    return _PROBE_CACHE[key]


_PROBE_CACHE: Dict[tuple, List[_Probe]] = {}
_MATCHES: Dict[tuple, object] = {}
_CACHE_CAP = 200_000


def _make_probes(tmpl: OpTemplate, rank: int) -> List[_Probe]:
    """Formal instantiations of a free-stride template (placeholder operands)."""
    dummies = [TensorDecl(f"__d{k}", (1,)) for k in range(len(tmpl.inputs))]
    if tmpl.style == "elementwise":
        s = tmpl.instantiate({"sizes": {"shape": [2] * rank}}, dummies)
        return [_Probe(s, {})]
    out = []
    for v in tmpl.spec["variants"]:
        letters = sorted({l for r in tmpl.inputs for l in v["shapes"][r]})
        sizes = dict(zip(letters, _PROBE_SIZES))
        s = tmpl.instantiate({"sizes": sizes}, dummies)
        by_size = {n: l for l, n in sizes.items()}
        out.append(_Probe(s, {i.name: by_size[i.width] for i in s.iterators}))
    return out


def _triples(scope: Scope, role_access: Sequence[Access]) -> Dict[int, tuple]:
    trav = {t.id for t in scope.traversal}
    out = {}
    for i in scope.iterators:
        used = tuple(any(i.id in ix.iterators() for ix in a.indices) for a in role_access)
        out[i.id] = used + (i.id in trav,)
    return out


# view analysis ------------------------------------------------------------------


def _grid(formal: Sequence[Iterator]):
    n = len(formal)
    vals = {}
    for k, f in enumerate(formal):
        shape = [1] * n
        shape[k] = f.width
        vals[f.id] = np.arange(f.lo, f.hi, dtype=np.int64).reshape(shape)
    return vals, tuple(f.width for f in formal)


def _affine_layout(idx: Sequence[IndexExpr], extents, offsets, formal, vals, full):
    """(offset, strides) if the flat address of ``idx`` is affine in ``formal``."""
    flat = np.zeros(full, dtype=np.int64)
    stride = 1
    for ix, ext, off in reversed(list(zip(idx, extents, offsets))):
        flat = flat + stride * (np.broadcast_to(np.asarray(ix.evaluate(vals), dtype=np.int64), full) + off)
        stride *= ext
    base = int(flat.flat[0])
    strides = []
    pred = np.full(full, base, dtype=np.int64)
    for k, f in enumerate(formal):
        if f.width > 1:
            pos = [0] * len(formal)
            pos[k] = 1
            s = int(flat[tuple(pos)]) - base
        else:
            s = 0
        strides.append(s)
        pred = pred + s * (vals[f.id] - f.lo)
    if not np.array_equal(pred, flat):
        return None
    return base, tuple(strides)


def _operand_layout(decl: TensorDecl, idx, formal, vals, full, loose: bool = False):
    """Try unpadded storage first, then storage with the pad band materialized.

    With ``loose`` any in-band view is accepted (returned layout ``()``); the
    caller then has to materialize the operand with a DLT.
    """
    reads = [np.broadcast_to(np.asarray(ix.evaluate(vals)), full) for ix in idx]
    if all(r.min() >= 0 and r.max() < n for r, n in zip(reads, decl.shape)):
        lay = _affine_layout(idx, decl.shape, [0] * decl.rank, formal, vals, full)
        if lay is not None:
            return lay
    lows = [-decl.valid_band(d)[0] for d in range(decl.rank)]
    if all(r.min() >= decl.valid_band(d)[0] and r.max() < decl.valid_band(d)[1] for d, r in enumerate(reads)):
        ext = [decl.shape[d] + sum(decl.pad[d]) for d in range(decl.rank)]
        lay = _affine_layout(idx, ext, lows, formal, vals, full)
        return () if lay is None and loose else lay
    return None


def _decompose(groups: Dict[str, List[Iterator]], formal: Dict[str, Iterator]) -> Dict[int, IndexExpr]:
    """Scope iterator -> expression over its fused formal iterator (row-major)."""
    env = {f.id: (f.lo, f.hi) for f in formal.values()}
    out = {}
    for name, members in groups.items():
        f = formal[name]
        inner = 1
        for m in reversed(members):
            x = IndexExpr.var(f.id).floordiv(inner).mod(m.width) + m.lo
            out[m.id] = x.simplify(env)
            inner *= m.width
    return out


def _group_orders(groups: Dict[str, List[Iterator]]):
    names = list(groups)
    per = []
    for n in names:
        g = groups[n]
        if len(g) > GROUP_PERM_CAP:
            return
        per.append(list(itertools.permutations(g)))
    for k, combo in enumerate(itertools.product(*per)):
        if k >= ORDER_TRIES:
            return
        yield {n: list(c) for n, c in zip(names, combo)}


def _free_stride(scope: Scope, tmpl: OpTemplate, probe: _Probe, roles: Dict[str, Access], loose: bool = False):
    role_names = [f"__{r}" for r in tmpl.inputs]
    accs = [roles[r] for r in role_names]
    p = probe.scope
    p_accs = [next(a for a in accesses(p.body) if a.tensor.name == r) for r in role_names]
    p_triples = _triples(p, p_accs)
    s_triples = _triples(scope, accs)
    p_iters = {i.id: i for i in p.iterators}

    if tmpl.style == "elementwise":
        if len(scope.traversal) != len(p.traversal) or scope.summation:
            return None
        if any(t != (True,) * (len(accs) + 1) for t in s_triples.values()):
            return None
        group_sets = [{pi.name: [si]} for pi, si in zip(p.traversal, scope.traversal)]
        merged = {}
        for g in group_sets:
            merged.update(g)
        orders = [merged]
    else:
        by_triple: Dict[tuple, str] = {}
        for pid, tr in p_triples.items():
            if tr in by_triple:
                return None
            by_triple[tr] = p_iters[pid].name
        groups: Dict[str, List[Iterator]] = {p_iters[pid].name: [] for pid in p_triples}
        trav_ids = {t.id for t in scope.traversal}
        for i in scope.iterators:
            name = by_triple.get(s_triples[i.id])
            if name is None and i.width == 1:
                # a unit iterator fits any group of the same kind
                name = next((n for tr, n in by_triple.items() if tr[-1] == (i.id in trav_ids)), None)
            if name is None:
                return None
            groups[name].append(i)
        if any(not g for g in groups.values()):
            return None
        orders = _group_orders(groups)

    p_names = {i.id: i.name for i in p.iterators}
    for groups in orders:
        formal = {}
        for pi in p.iterators:
            size = 1
            for m in groups[pi.name]:
                size *= m.width
            formal[pi.name] = Iterator(pi.id, pi.name, 0, size, pi.kind)
        flist = list(formal.values())
        if int(np.prod([f.width for f in flist])) > GRID_CAP:
            return None
        vals, full = _grid(flist)
        dec = _decompose(groups, formal)
        views, strides, formals, plain_flags = {}, {}, {}, []
        ok = True
        for pos, (a, pa) in enumerate(zip(accs, p_accs)):
            idx = [ix.substitute(dec) for ix in a.indices]
            lay = _operand_layout(a.tensor, idx, flist, vals, full, loose)
            if lay is None:
                ok = False
                break
            strides[tmpl.inputs[pos]] = lay
            texts = [format_index(ix, p_names) for ix in idx]
            views[str(pos)] = texts
            formal_shape = tuple(formal[p_names[ix.single_iterator()]].width if ix.single_iterator() in p_names
                                 else -1 for ix in pa.indices)
            formals[pos] = [(p_names[ix.single_iterator()], formal[p_names[ix.single_iterator()]].width)
                            for ix in pa.indices]
            plain_flags.append(lay != () and a.tensor.shape == formal_shape
                               and texts == [format_index(ix, p_names) for ix in pa.indices])
        if not ok:
            continue
        out_idx = [dec[t.id] - t.lo for t in scope.traversal]
        out_lay = _affine_layout(out_idx, scope.shape, [0] * scope.rank, flist, vals, full)
        if out_lay is None:
            continue
        out_plain = [ix.single_iterator() for ix in out_idx] == [t.id for t in p.traversal] and \
            scope.shape == tuple(formal[t.name].width for t in p.traversal)
        attrs: dict = {}
        if not all(plain_flags) or not out_plain:
            if tmpl.style == "elementwise":
                attrs["sizes"] = {"shape": [formal[t.name].width for t in p.traversal]}
            else:
                attrs["sizes"] = {probe.letters[n]: f.width for n, f in formal.items()}
            attrs["views"] = views
            if not out_plain:
                attrs["out_view"] = [format_index(ix, p_names) for ix in out_idx]
        assignment = {m.id: n for n, ms in groups.items() for m in ms}
        dense = sum(strides[tmpl.inputs[pos]] == _dense_layout(formals[pos], flist) for pos in range(len(accs)))
        return attrs, assignment, tuple(a.tensor for a in accs), strides, formals, tuple(plain_flags), dense
    return None


def _dense_layout(formal_dims, flist) -> tuple:
    """(offset, strides) of an operand stored row-major in its formal order."""
    step, by_name = 1, {}
    for name, width in reversed(formal_dims):
        by_name[name] = step if width > 1 else 0
        step *= width
    return 0, tuple(by_name.get(f.name, 0) for f in flist)


# structured templates -----------------------------------------------------------


def _coef_split(ix: IndexExpr, scope: Scope):
    trav = {t.id for t in scope.traversal}
    tc = [c for a, c in ix.terms if isinstance(a, int) and a in trav]
    sc = [c for a, c in ix.terms if isinstance(a, int) and a not in trav]
    return tc, sc


def _infer_attrs(kind: str, scope: Scope, x: Access, y: Access) -> Optional[dict]:
    if kind == "Reshape":
        return {}
    if any(t.lo != 0 for t in scope.iterators):
        return None
    if kind in ("Conv", "ConvTranspose") and (x.tensor.rank not in (3, 4) or y.tensor.rank != 4):
        return None
    if kind == "G2BMM" and (x.tensor.rank != 3 or y.tensor.rank != 3):
        return None
    if kind == "Conv":
        dims = (0, 1) if x.tensor.rank == 3 else (1, 2)
        st, dl, pd = [], [], []
        for d in dims:
            ix = x.indices[d]
            if not ix.is_affine():
                return None
            tc, sc = _coef_split(ix, scope)
            if len(tc) != 1 or len(sc) != 1:
                return None
            st.append(tc[0])
            dl.append(sc[0])
            pd.append(-ix.const)
        return {"stride": st, "dilation": dl, "pad": pd}
    if kind == "ConvTranspose":
        dims = (0, 1) if x.tensor.rank == 3 else (1, 2)
        st, pd = [], []
        for d in dims:
            ix = x.indices[d]
            if ix.is_affine():
                st.append(1)
                pd.append(ix.const)
                continue
            if len(ix.terms) != 1 or ix.terms[0][1] != 1 or ix.terms[0][0][0] != "div":
                return None
            _, inner, div = ix.terms[0][0]
            st.append(div)
            pd.append(inner.const + div * ix.const)
        return {"stride": st, "pad": pd}
    if kind == "G2BMM":
        ix = y.indices[1]
        x_ids = set().union(*(i.iterators() for i in x.indices))
        extra = [c for a, c in ix.terms if isinstance(a, int) and a not in x_ids]
        if len(extra) != 1 or extra[0] <= 0 or (-ix.const) % extra[0]:
            return None
        return {"dilation": extra[0], "width": -ix.const // extra[0]}
    return None


def _structured(scope: Scope, tmpl: OpTemplate):
    body = scope.body
    if tmpl.style == "reshape":
        if not isinstance(body, Access) or not isinstance(body.tensor, TensorDecl):
            return []
        pairs = [(body, None)]
    else:
        if not (isinstance(body, Op) and body.kind == "mul" and len(body.args) == 2
                and all(isinstance(a, Access) and isinstance(a.tensor, TensorDecl) for a in body.args)):
            return []
        a, b = body.args
        pairs = [(a, b), (b, a)]
    target = fingerprint_int(rebuild(scope, out_pad=tuple((0, 0) for _ in scope.traversal)))
    out = []
    for x, y in pairs:
        attrs = _infer_attrs(tmpl.kind, scope, x, y)
        if attrs is None:
            continue
        decls = [x.tensor] if y is None else [x.tensor, y.tensor]
        try:
            inst = tmpl.instantiate(attrs, decls, scope.shape)
        except DerivError:
            continue
        if fingerprint_int(inst) == target:
            assignment = {i.id: i.name for i in scope.iterators}
            out.append((attrs, assignment, tuple(decls), {}, {}, (True,) * len(decls)))
    return out


# public API -------------------------------------------------------------------


def check_match(m: MatchResult, trials: int = CHECK_TRIALS, seed: int = 0) -> bool:
    """Oracle cross-check: the instantiated node equals the scope."""
    out = TensorDecl("__out", m.scope.shape)
    tensors = {d.name: d for d in m.inputs}
    tensors["__out"] = out
    node = m.node("__out")
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        vals = random_bindings(list({d.name: d for d in m.inputs}.values()), rng)
        try:
            got = eval_node(node, tensors, vals)
        except DerivError:
            return False
        if not np.array_equal(got, eval_expression(m.scope, vals)):
            return False
    return True


def match_operator(scope: Scope, tmpl: Union[OpTemplate, str], trials: int = CHECK_TRIALS,
                   materialize: bool = False):
    """Match ``scope`` against a template; returns a MatchResult or NoMatch.

    ``materialize`` also accepts operand views without an affine address, for
    callers that copy those operands into plain layout (see with_reconstructions).
    """
    if isinstance(tmpl, str):
        tmpl = template_of(tmpl)
    if not isinstance(scope, Scope):
        return NoMatch("not a scope")
    if any(not isinstance(a.tensor, TensorDecl) for a in accesses(scope.body)):
        return NoMatch("operands must be instantiated tensors")
    key = (fingerprint_int(scope), tmpl.kind, materialize)
    hit = _MATCHES.get(key)
    if hit is not None:
        return _rebind(hit, scope)
    m = _match(scope, tmpl, trials)
    if not m and materialize and tmpl.style not in ("structured", "reshape"):
        m = _match(scope, tmpl, trials, loose=True)
    if len(_MATCHES) > _CACHE_CAP:
        _MATCHES.clear()
    _MATCHES[key] = m if not m else (m, _by_position(m.assignment, m.scope))
    return m


def _by_position(assignment: Dict[int, str], scope: Scope) -> List[Optional[str]]:
    return [assignment.get(i.id) for i in scope.iterators]


def _rebind(hit, scope: Scope):
    """Reuse a cached result for a fingerprint-equal scope."""
    if not hit:
        return hit
    m, names = hit
    assignment = {i.id: n for i, n in zip(scope.iterators, names) if n is not None}
    return MatchResult(m.kind, assignment, m.roles, m.attrs, m.inputs, scope, m.strides, m.formals, m.plain)


def _match(scope: Scope, tmpl: OpTemplate, trials: int, loose: bool = False):
    if tmpl.style in ("structured", "reshape"):
        found = _structured(scope, tmpl)
    else:
        if scope.guards:
            return NoMatch("guarded scope")
        found = []
        for probe in _probes(tmpl, scope.rank):
            for roles in _unify(probe.scope.body, scope.body, {}):
                if len(roles) != len(tmpl.inputs):
                    continue
                r = _free_stride(scope, tmpl, probe, roles, loose)
                if r is not None:
                    found.append(r)
            if found:
                break
    if not found:
        return NoMatch(f"no {tmpl.kind} binding")
    results = []
    # prefer role bindings whose operands already sit in row-major formal order
    found.sort(key=lambda r: -r[6] if len(r) > 6 else 0)
    for attrs, assignment, decls, strides, formals, plain, *_ in found:
        m = MatchResult(tmpl.kind, assignment, tuple(d.name for d in decls), attrs, decls, scope, strides,
                        formals, plain)
        if check_match(m, trials):
            results.append(m)
    if not results:
        return NoMatch(f"{tmpl.kind} binding failed the oracle check")
    if len(results) > 1:
        log.debug("ambiguous roles for %s: %s", tmpl.kind, [r.roles for r in results])
    return results[0]


def match_any(scope: Scope, kinds: Optional[Sequence[str]] = None, trials: int = CHECK_TRIALS):
    """First matching template in registry order (restricted to ``kinds``)."""
    for kind, tmpl in registry().items():
        if kinds is not None and kind not in kinds:
            continue
        m = match_operator(scope, tmpl, trials)
        if m:
            return m
    return NoMatch("no template matches")


# eOperators ---------------------------------------------------------------------


@dataclass
class EOperator:
    expr: Scope
    name: str
    intensity: float
    bound: str
    identity: bool = False

    @property
    def memory_bound(self) -> bool:
        return self.bound == "memory"

    def lowered(self) -> "LoweredNest":
        return lower(self.expr, self.name)

    def loop_nest(self) -> str:
        return self.lowered().text()

    def tvm(self) -> str:
        return emit_tvm(self.expr, self.name)


def arithmetic_intensity(s: Scope) -> float:
    ops = scope_flops(s)
    moved = int(np.prod(s.shape)) + sum(t.size for t in free_tensors(s))
    return ops / max(moved, 1)


def is_identity(s: Scope) -> bool:
    """True if the scope copies a tensor element-for-element in flat order."""
    b = s.body
    if s.summation or s.guards or not isinstance(b, Access) or not isinstance(b.tensor, TensorDecl):
        return False
    t = b.tensor
    if t.size != int(np.prod(s.shape)):
        return False
    vals, full = _grid(s.traversal)
    out_flat = _affine_layout([x.ix - x.lo for x in s.traversal], s.shape, [0] * s.rank, s.traversal, vals, full)
    in_flat = _operand_layout(t, b.indices, s.traversal, vals, full)
    return in_flat is not None and out_flat is not None and in_flat == out_flat \
        and all(r.min() >= 0 for r in [np.asarray(ix.evaluate(vals)) for ix in b.indices])


def _classify(s: Scope) -> str:
    b = s.body
    single = isinstance(b, Access)
    if not s.summation and single:
        return "DLT"
    if s.summation and (single or (isinstance(b, Op) and b.kind == "add"
                                   and all(isinstance(a, Access) for a in b.args))):
        return "OffsetAdd"
    if not s.summation and isinstance(b, Op) and b.kind == "add":
        return "OffsetAdd"
    return "EOp"


def generate_eoperator(s: Scope, threshold: float = INTENSITY_THRESHOLD) -> EOperator:
    ai = arithmetic_intensity(s)
    ident = is_identity(s)
    return EOperator(s, _classify(s), ai, "memory" if ai < threshold else "compute", ident)


def output_decl(s: Scope, name: Optional[str] = None) -> TensorDecl:
    fp = fingerprint(s)
    return TensorDecl(name or f"t{fp[:8]}", s.shape, s.out_pad, origin=fp)


def replace_with_tensor(parent, site: Sequence[int], result: Union[MatchResult, EOperator],
                        tensors: Optional[Dict[str, TensorDecl]] = None, name: Optional[str] = None):
    """Replace the scope at ``site`` by a fresh tensor; returns (expression, node)."""
    s = scope_at(parent, site)
    decl = output_decl(s, name)
    if isinstance(result, MatchResult):
        node = result.node(decl.name)
    else:
        node = OpNode("EOperator", {"name": result.name, "bound": result.bound,
                                    "intensity": round(result.intensity, 4)},
                      tuple(t.name for t in free_tensors(s)), (decl.name,), expr=s)
    if tensors is not None:
        tensors[decl.name] = decl
        for t in (result.inputs if isinstance(result, MatchResult) else free_tensors(s)):
            tensors.setdefault(t.name, t)
    return replace_at(parent, site, decl), node


def reconstruct(decl: TensorDecl, view: Sequence[str], formals: Sequence[Tuple[str, int]]) -> Scope:
    """Scope ``T'[formal] = T[view]``: a layout transformation of ``decl``."""
    from .text import parse_expr

    its = ", ".join(f"{n}:0..{z}" for n, z in formals)
    return parse_expr(f"L{{{its}}} {decl.name}[{', '.join(view)}]", {decl.name: decl})


def with_reconstructions(m: MatchResult, tensors: Dict[str, TensorDecl]) -> Tuple[MatchResult, List[OpNode]]:
    """Give every operand read through a non-plain view its own DLT eOperator."""
    if "views" not in m.attrs or all(m.plain):
        return m, []
    views = {k: list(v) for k, v in m.attrs["views"].items()}
    inputs = list(m.inputs)
    nodes = []
    for pos, plain in enumerate(m.plain):
        if plain:
            continue
        dlt = reconstruct(inputs[pos], views[str(pos)], m.formals[pos])
        _, node = replace_with_tensor(dlt, (), generate_eoperator(dlt), tensors)
        nodes.append(node)
        inputs[pos] = tensors[node.output]
        views[str(pos)] = [n for n, _ in m.formals[pos]]
    attrs = dict(m.attrs)
    if "out_view" in attrs:
        attrs["views"] = views
    else:
        attrs = {}
    new = MatchResult(m.kind, m.assignment, tuple(d.name for d in inputs), attrs, tuple(inputs), m.scope,
                      m.strides, m.formals, (True,) * len(inputs))
    return new, nodes


# lowering ---------------------------------------------------------------------


@dataclass
class Stage:
    name: str
    scope: Scope
    inputs: Dict[int, str]


@dataclass
class LoweredNest:
    """Loop nests in dependency order; the last stage is the result."""

    stages: List[Stage]

    def text(self) -> str:
        lines = []
        for st in self.stages:
            lines.extend(_stage_text(st))
        return "\n".join(lines)

    def run(self, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
        """Reference interpreter: scalar loops, zero-filled pad reads."""
        done: Dict[str, Tuple[np.ndarray, Tuple[int, ...]]] = {}
        for st in self.stages:
            done[st.name] = (_run_stage(st, bindings, done), st.scope.origin)
        return done[self.stages[-1].name][0]


def lower(s: Scope, name: str = "out") -> LoweredNest:
    stages: List[Stage] = []
    names: Dict[int, str] = {}

    def visit(sc: Scope, label: str):
        kids = {}
        for c in child_scopes(sc):
            key = id(c)
            if key not in names:
                names[key] = f"tmp{len(names)}"
                visit(c, names[key])
            kids[key] = names[key]
        stages.append(Stage(label, sc, kids))

    visit(s, name)
    return LoweredNest(stages)


def _tensor_label(a: Access, st: Stage) -> str:
    if isinstance(a.tensor, TensorDecl):
        return a.tensor.name
    return st.inputs[id(a.tensor)]


def _stage_text(st: Stage) -> List[str]:
    s = st.scope
    names = _names(s)
    shape = ", ".join(str(n) for n in s.shape)
    lines = [f"stage {st.name}[{shape}]:"]
    ind = "  "
    for t in s.traversal:
        lines.append(f"{ind}for {names[t.id]} in {t.lo}..{t.hi}:")
        ind += "  "
    lines.append(f"{ind}acc = 0")
    for t in s.summation:
        lines.append(f"{ind}for {names[t.id]} in {t.lo}..{t.hi}:")
        ind += "  "
    if s.guards:
        cond = " and ".join(f"{g.lo} <= {format_index(g.expr, names)} < {g.hi}" for g in s.guards)
        lines.append(f"{ind}if {cond}:")
        ind += "  "
    lines.append(f"{ind}acc += {_body_text(s.body, names, st)}")
    ind = "  " * (len(s.traversal) + 1)
    out = ", ".join(format_index(t.ix - t.lo, names) for t in s.traversal)
    lines.append(f"{ind}{st.name}[{out}] = acc")
    return lines


def _body_text(c, names, st: Stage) -> str:
    if isinstance(c, Const):
        return str(c.value)
    if isinstance(c, Access):
        idx = ", ".join(format_index(i, names) for i in c.indices)
        return f"{_tensor_label(c, st)}[{idx}]"
    parts = [_body_text(a, names, st) for a in c.args]
    if c.kind == "add":
        return "(" + " + ".join(parts) + ")"
    if c.kind == "mul":
        return "(" + " * ".join(parts) + ")"
    if c.kind == "sub":
        return f"({parts[0]} - {parts[1]})"
    if c.kind == "neg":
        return f"(-{parts[0]})"
    return f"{c.kind}({parts[0]}, {parts[1]})"


def _run_stage(st: Stage, bindings, done) -> np.ndarray:
    s = st.scope
    out = np.zeros(s.shape, dtype=np.int64)

    def read(a: Access, env) -> int:
        if isinstance(a.tensor, TensorDecl):
            arr, origin = np.asarray(bindings[a.tensor.name]), (0,) * a.tensor.rank
        else:
            arr, origin = done[st.inputs[id(a.tensor)]]
        coord = []
        for d, ix in enumerate(a.indices):
            v = int(ix.evaluate(env)) - origin[d]
            if v < 0 or v >= arr.shape[d]:
                return 0
            coord.append(v)
        return int(arr[tuple(coord)])

    def ev(c, env) -> int:
        if isinstance(c, Const):
            return c.value
        if isinstance(c, Access):
            return read(c, env)
        xs = [ev(a, env) for a in c.args]
        if c.kind == "add":
            return sum(xs)
        if c.kind == "mul":
            r = 1
            for x in xs:
                r *= x
            return r
        if c.kind == "sub":
            return xs[0] - xs[1]
        if c.kind == "neg":
            return -xs[0]
        return max(xs) if c.kind == "max" else min(xs)

    trav = [range(t.lo, t.hi) for t in s.traversal]
    summ = [range(t.lo, t.hi) for t in s.summation]
    for point in itertools.product(*trav):
        env = {t.id: v for t, v in zip(s.traversal, point)}
        acc = 0
        for red in itertools.product(*summ):
            env.update({t.id: v for t, v in zip(s.summation, red)})
            if all(g.lo <= int(g.expr.evaluate(env)) < g.hi for g in s.guards):
                acc += ev(s.body, env)
        out[tuple(v - t.lo for v, t in zip(point, s.traversal))] = acc
    return out


def _tvm_index(x: IndexExpr, names) -> str:
    parts = []
    for a, c in x.terms:
        if isinstance(a, int):
            body = names[a]
        else:
            kind, inner, d = a
            fn = "floordiv" if kind == "div" else "floormod"
            body = f"tvm.tir.{fn}({_tvm_index(inner, names)}, {d})"
        parts.append(body if c == 1 else f"{c}*{body}")
    if x.const or not parts:
        parts.append(str(x.const))
    return " + ".join(parts).replace("+ -", "- ")


def emit_tvm(s: Scope, name: str = "out") -> str:
    """TVM-compute-style stanza for human comparison (not executed)."""
    nest = lower(s, name)
    lines = ["# reads in a tensor's pad band are zero (pad the inputs first)"]
    for st in nest.stages:
        sc = st.scope
        names = _names(sc)
        env_names = dict(names)
        for t in sc.traversal:
            if t.lo:
                env_names[t.id] = f"({names[t.id]} + {t.lo})"
        for t in sc.summation:
            lines.append(f"{names[t.id]} = te.reduce_axis(({t.lo}, {t.hi}), name=\"{names[t.id]}\")")

        def body(c):
            if isinstance(c, Const):
                return str(c.value)
            if isinstance(c, Access):
                return f"{_tensor_label(c, st)}[{', '.join(_tvm_index(i, env_names) for i in c.indices)}]"
            xs = [body(a) for a in c.args]
            op = {"add": " + ", "mul": " * ", "sub": " - "}.get(c.kind)
            if op:
                return "(" + op.join(xs) + ")"
            if c.kind == "neg":
                return f"(-{xs[0]})"
            return f"te.{c.kind}({xs[0]}, {xs[1]})"

        expr = body(sc.body)
        if sc.guards:
            cond = " and ".join(f"{g.lo} <= {_tvm_index(g.expr, env_names)} < {g.hi}" for g in sc.guards)
            expr = f"tvm.tir.if_then_else({cond}, {expr}, 0)"
        if sc.summation:
            axes = ", ".join(names[t.id] for t in sc.summation)
            expr = f"te.sum({expr}, axis=[{axes}])"
        args = ", ".join(names[t.id] for t in sc.traversal)
        shape = ", ".join(str(n) for n in sc.shape) + ("," if sc.rank == 1 else "")
        lines.append(f"{st.name} = te.compute(({shape}), lambda {args}: {expr}, name=\"{st.name}\")")
    return "\n".join(lines)
