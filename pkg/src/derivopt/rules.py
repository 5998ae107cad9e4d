"""Derivation rules as pure rewrites, plus their applicability generators.

Intra-expression rules act on the scope addressed by a *site* (a path of
child-scope positions from the root).  Inter-expression rules act on whole
top-level expressions.  Every rule raises a :class:`RuleError` subclass when
its precondition does not hold.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (BodiesDiffer, NoDependency, NotAPartition, NotApplicable, NotBijective,
                     NotCoveringPartition, NotIndependent, NotProvablyConstant, NotUnionable,
                     RangeNotContained, RegionUsed, RuleError)
from .expr import (Access, Const, Guard, Iterator, Op, Scope, TensorDecl, accesses, all_scopes,
                   build_expression, child_scopes, fresh_id, map_compute, rebuild, replace_at,
                   scope_at)
from .fingerprint import fingerprint
from .index import IndexExpr

INTRA_RULES = ("SumSplit", "VarSub", "TravMerge", "BoundRelax", "BoundTighten")
INTER_RULES = ("ExprSplit", "ExprMerge", "ExprFuse")
ALL_RULES = INTER_RULES + INTRA_RULES + ("OpMatch", "EOpGen")

SUMSPLIT_CAP = 16
EXHAUSTIVE_LIMIT = 4096


def _copy(i: Iterator, kind: Optional[str] = None, lo=None, hi=None, name=None) -> Iterator:
    return Iterator(fresh_id(), name or i.name, i.lo if lo is None else lo, i.hi if hi is None else hi,
                    kind or i.kind)


def _subst_body(body, mapping: Dict[int, IndexExpr]):
    def visit(n):
        if isinstance(n, Access):
            return Access(n.tensor, tuple(i.substitute(mapping) for i in n.indices))
        return None

    return map_compute(body, visit)


def _subst_guards(guards, mapping):
    return tuple(Guard(g.expr.substitute(mapping), g.lo, g.hi) for g in guards)


# ---------------------------------------------------------------------------
# summation splitting


def split_summation(e: Scope, outer: Sequence[int]) -> Scope:
    """Sum ``outer`` iterators over a nested scope that sums the rest."""
    outer_set = set(outer)
    ids = {s.id for s in e.summation}
    if not outer_set <= ids:
        raise NotAPartition("outer part is not a subset of the summation set")
    s1 = [s for s in e.summation if s.id in outer_set]
    s2 = [s for s in e.summation if s.id not in outer_set]
    if not s1 or not s2:
        raise NotAPartition("both parts of a summation split must be nonempty")
    mapping: Dict[int, IndexExpr] = {}
    inner_trav, inner_sum = [], []
    for s in s1:
        c = _copy(s, "L")
        inner_trav.append(c)
        mapping[s.id] = c.ix
    for x in e.traversal:
        c = _copy(x, "L")
        inner_trav.append(c)
        mapping[x.id] = c.ix
    for s in s2:
        c = _copy(s, "S")
        inner_sum.append(c)
        mapping[s.id] = c.ix
    inner = build_expression(inner_trav, inner_sum, _subst_body(e.body, mapping), _subst_guards(e.guards, mapping))
    idx = tuple(s.ix for s in s1) + tuple(x.ix for x in e.traversal)
    # guards over outer iterators only stay outside as well, so the outer scope skips dead points
    visible = {i.id for i in e.traversal} | outer_set
    kept = tuple(g for g in e.guards if g.expr.iterators() <= visible)
    return build_expression(e.traversal, s1, Access(inner, idx), kept, e.out_pad)


def sumsplit_proposals(e: Scope) -> List[dict]:
    n = len(e.summation)
    if n < 2:
        return []
    out = []
    for k in range(1, n):
        for combo in itertools.combinations(range(n), k):
            out.append({"outer": list(combo)})
            if len(out) >= SUMSPLIT_CAP:
                return out
    return out


# ---------------------------------------------------------------------------
# variable substitution


@dataclass
class BijectiveMap:
    """Traversal change of variables.

    ``new`` are the replacement traversal iterators (in output order),
    ``forward[k]`` gives new iterator k in terms of the old ids and
    ``inverse[old_id]`` gives each old iterator in terms of new ids.
    """

    old: Tuple[Iterator, ...]
    new: Tuple[Iterator, ...]
    forward: Tuple[IndexExpr, ...]
    inverse: Dict[int, IndexExpr]

    def domain_size(self) -> int:
        n = 1
        for i in self.old:
            n *= i.width
        return n

    def check(self, rng: Optional[np.random.Generator] = None) -> bool:
        """Both compositions are the identity on their declared ranges.

        Exhaustive when the domain has at most 4096 points, otherwise 1024
        random samples plus a symbolic check that inverse(forward(x)) == x.
        """
        old_ids = [i.id for i in self.old]
        new_ids = [i.id for i in self.new]
        exhaustive = self.domain_size() <= EXHAUSTIVE_LIMIT
        if exhaustive:
            grids = np.meshgrid(*[np.arange(i.lo, i.hi) for i in self.old], indexing="ij")
            xs = {k: g.ravel() for k, g in zip(old_ids, grids)}
        else:
            rng = rng or np.random.default_rng(0)
            xs = {i.id: rng.integers(i.lo, i.hi, size=1024) for i in self.old}
        n = len(next(iter(xs.values())))
        ys = {k: np.broadcast_to(np.asarray(f.evaluate(xs)), (n,)) for k, f in zip(new_ids, self.forward)}
        for i in self.new:
            if ys[i.id].min() < i.lo or ys[i.id].max() >= i.hi:
                return False
        for o in self.old:
            back = np.broadcast_to(np.asarray(self.inverse[o.id].evaluate(ys)), (n,))
            if not np.array_equal(back, xs[o.id]):
                return False
        if not exhaustive:
            fwd = dict(zip(new_ids, self.forward))
            env = {i.id: (i.lo, i.hi) for i in self.old}
            for o in self.old:
                if self.inverse[o.id].substitute(fwd).simplify(env) != o.ix:
                    return False
            return True
        size = int(np.prod([i.width for i in self.new], dtype=np.int64))
        if size > EXHAUSTIVE_LIMIT * 16:
            return True
        grids = np.meshgrid(*[np.arange(i.lo, i.hi) for i in self.new], indexing="ij")
        ys = {k: g.ravel() for k, g in zip(new_ids, grids)}
        m = size
        xs = {o.id: np.broadcast_to(np.asarray(self.inverse[o.id].evaluate(ys)), (m,)) for o in self.old}
        ok = np.ones(m, dtype=bool)
        for o in self.old:
            ok &= (xs[o.id] >= o.lo) & (xs[o.id] < o.hi)
        for k, f in zip(new_ids, self.forward):
            again = np.broadcast_to(np.asarray(f.evaluate(xs)), (m,))
            if not np.array_equal(again[ok], ys[k][ok]):
                return False
        return True


def _bbox(exprs: Sequence[IndexExpr], env) -> List[Tuple[int, int]]:
    out = []
    for f in exprs:
        lo, hi = f.interval(env)
        out.append((lo, hi + 1))
    return out


def make_map(e: Scope, replaced: Sequence[int], forward: Sequence[IndexExpr], names: Sequence[str],
             inverse_of: Dict[int, IndexExpr], position: str = "end") -> BijectiveMap:
    """Build a full-traversal map that replaces ``replaced`` ids by new iterators.

    ``forward`` is written over old ids.  ``inverse_of`` gives each replaced
    old id over placeholder ids ``-1, -2, ...`` (the new iterators, in order)
    and the old ids of iterators that are kept.
    """
    boxes = _bbox(forward, e.env)
    new_its = [Iterator(fresh_id(), nm, lo, hi, "L") for nm, (lo, hi) in zip(names, boxes)]
    replaced = set(replaced)
    kept = [t for t in e.traversal if t.id not in replaced]
    kept_new = [_copy(t, "L") for t in kept]
    sub = {-(k + 1): n.ix for k, n in enumerate(new_its)}
    sub.update({t.id: c.ix for t, c in zip(kept, kept_new)})
    inverse = {t.id: c.ix for t, c in zip(kept, kept_new)}
    for old_id, ex in inverse_of.items():
        inverse[old_id] = ex.substitute(sub)
    fwd_all = {c.id: t.ix for t, c in zip(kept, kept_new)}
    for n, f in zip(new_its, forward):
        fwd_all[n.id] = f
    if position == "end":
        order = kept_new + new_its
    else:  # the new iterators take the slot of the first replaced one
        order = []
        placed = False
        for t in e.traversal:
            if t.id in replaced:
                if not placed:
                    order.extend(new_its)
                    placed = True
            else:
                order.append(kept_new[kept.index(t)])
    return BijectiveMap(tuple(e.traversal), tuple(order), tuple(fwd_all[n.id] for n in order), inverse)


def substitute_variables(e: Scope, phi: BijectiveMap, check: bool = True) -> Scope:
    """Re-express ``e`` over new traversal iterators behind a re-indexing wrapper."""
    if tuple(i.id for i in phi.old) != tuple(t.id for t in e.traversal):
        raise NotApplicable("map domain must be the scope's traversal list")
    if check and not phi.check():
        raise NotBijective("map is not a bijection on the traversal space")
    inner_sum = [_copy(s, "S") for s in e.summation]
    mapping = dict(phi.inverse)
    for s, c in zip(e.summation, inner_sum):
        mapping[s.id] = c.ix
    new_env = {i.id: (i.lo, i.hi) for i in phi.new}
    guards = list(_subst_guards(e.guards, mapping))
    for t in e.traversal:
        ex = phi.inverse[t.id]
        lo, hi = ex.simplify(new_env).interval(new_env)
        if lo < t.lo or hi >= t.hi:
            guards.append(Guard(ex, t.lo, t.hi))
    inner = build_expression(phi.new, inner_sum, _subst_body(e.body, mapping), guards)
    return build_expression(e.traversal, [], Access(inner, tuple(phi.forward)), (), e.out_pad)


def _membership(e: Scope) -> Dict[int, frozenset]:
    """Which accesses (by position) each iterator of ``e`` appears in."""
    out: Dict[int, set] = {i.id: set() for i in e.iterators}
    for k, a in enumerate(accesses(e.body)):
        for ix in a.indices:
            for i in ix.iterators():
                out[i].add(k)
    return {k: frozenset(v) for k, v in out.items()}


def _offset_sites(e: Scope, nested: bool):
    """Affine index expressions of ``e``; with ``nested`` also those under div/mod atoms."""
    exprs = [ix for a in accesses(e.body) for ix in a.indices]
    if nested:
        exprs += [g.expr for g in e.guards]
    while exprs:
        ix = exprs.pop(0)
        if nested:
            exprs.extend(atom[1] for atom, _ in ix.terms if isinstance(atom, tuple))
        if ix.is_affine():
            yield ix


def _offset_candidates(e: Scope, nested: bool = False):
    """(x, y, a, c) with x + a*y + c appearing as an index; x is the less shared one."""
    trav = {t.id for t in e.traversal}
    member = _membership(e)
    seen = []
    for ix in _offset_sites(e, nested):
        if len(ix.terms) != 2:
            continue
        (i1, c1), (i2, c2) = ix.terms
        if i1 not in trav or i2 not in trav:
            continue
        opts = [(x, cx, y, cy) for x, cx, y, cy in ((i1, c1, i2, c2), (i2, c2, i1, c1)) if cx == 1]
        if not opts:
            continue
        least = min(len(member[o[0]]) for o in opts)
        for x, cx, y, cy in opts:
            if len(member[x]) == least and (x, y, cy, ix.const) not in seen:
                seen.append((x, y, cy, ix.const))
    return seen


def varsub_proposals(e: Scope, nested: bool = False) -> List[dict]:
    """Offset maps, fusion of adjacent same-membership pairs, div/mod splits.

    ``nested`` also proposes offsets for sums found inside div/mod operands.
    """
    out: List[dict] = []
    pos = {t.id: k for k, t in enumerate(e.traversal)}
    member = _membership(e)
    offs = _offset_candidates(e, nested)
    chosen, used = [], set()
    for x, y, a, c in offs:
        if x not in used and y not in used and all(y != cx for cx, _, _, _ in chosen):
            chosen.append((x, y, a, c))
            used.add(x)
    if len(chosen) > 1 and not any(y in used for _, y, _, _ in chosen):
        out.append({"kind": "offset", "subs": [[pos[x], pos[y], a, c] for x, y, a, c in chosen]})
    for x, y, a, c in offs:
        out.append({"kind": "offset", "subs": [[pos[x], pos[y], a, c]]})
    for k in range(len(e.traversal) - 1):
        x, y = e.traversal[k], e.traversal[k + 1]
        if x.width > 1 and y.width > 1 and member[x.id] == member[y.id] and member[x.id] and _fusable(e, x, y):
            out.append({"kind": "fuse", "pos": [k, k + 1]})
    for k, t in enumerate(e.traversal):
        for d, c in _divmod_sites(e, t.id):
            out.append({"kind": "split", "pos": k, "d": d, "c": c})
    return out


def _fusable(e: Scope, x: Iterator, y: Iterator) -> bool:
    """Every access reads x and y as two adjacent plain dims that reshape into one."""
    for a in accesses(e.body):
        dims = [d for d, ix in enumerate(a.indices) if ix.iterators() & {x.id, y.id}]
        if not dims:
            continue
        if len(dims) != 2 or dims[1] != dims[0] + 1:
            return False
        ix, iy = (a.indices[d] for d in dims)
        if ix.terms != ((x.id, 1),) or iy.terms != ((y.id, 1),):
            return False
        # y must sweep the whole inner dim so the pair flattens without gaps
        if a.tensor.shape[dims[1]] != y.width or iy.const + y.lo != 0:
            return False
    return True


def _divmod_sites(e: Scope, it_id: int):
    found = []
    for a in accesses(e.body):
        for ix in a.indices:
            for atom, _ in ix.terms:
                if isinstance(atom, tuple):
                    inner = atom[1]
                    if len(inner.terms) == 1 and inner.terms[0] == (it_id, 1):
                        key = (atom[2], inner.const)
                        if key not in found:
                            found.append(key)
    for g in e.guards:
        for atom, _ in g.expr.terms:
            if isinstance(atom, tuple):
                inner = atom[1]
                if len(inner.terms) == 1 and inner.terms[0] == (it_id, 1):
                    key = (atom[2], inner.const)
                    if key not in found:
                        found.append(key)
    return found


def varsub_map(e: Scope, params: dict) -> BijectiveMap:
    trav = e.traversal
    kind = params["kind"]
    if kind == "offset":
        replaced, forward, names, inv = [], [], [], {}
        for k, (px, py, a, c) in enumerate(params["subs"]):
            x, y = trav[px], trav[py]
            if x.id in replaced or y.id in replaced or x.id == y.id:
                raise NotApplicable("offset substitutions must use distinct iterators")
            replaced.append(x.id)
            forward.append(x.ix + y.ix.scale(a) + c)
            names.append(f"t{k + 1}")
            inv[x.id] = IndexExpr.var(-(k + 1)) - y.ix.scale(a) - c
        if any(trav[py].id in replaced for _, py, _, _ in params["subs"]):
            raise NotApplicable("an offset partner is itself replaced")
        return make_map(e, replaced, forward, names, inv, "end")
    if kind == "fuse":
        p, q = params["pos"]
        x, y = trav[p], trav[q]
        fwd = (x.ix - x.lo).scale(y.width) + (y.ix - y.lo)
        m = IndexExpr.var(-1)
        inv = {x.id: m.floordiv(y.width) + x.lo, y.id: m.mod(y.width) + y.lo}
        return make_map(e, [x.id, y.id], [fwd], [f"{x.name}{y.name}"], inv, "inplace")
    if kind == "split":
        x = trav[params["pos"]]
        d, c = params["d"], params["c"]
        q = IndexExpr.var(-1)
        r = IndexExpr.var(-2)
        inv = {x.id: q.scale(d) + r - c}
        return make_map(e, [x.id], [(x.ix + c).floordiv(d), (x.ix + c).mod(d)],
                        [f"{x.name}q", f"{x.name}r"], inv, "inplace")
    raise NotApplicable(f"unknown substitution kind {kind}")


# ---------------------------------------------------------------------------
# traversal merging


def merge_traversals(e: Scope, child: int) -> Scope:
    """Inline the ``child``-th nested scope into ``e``."""
    kids = child_scopes(e)
    if not 0 <= child < len(kids):
        raise NotApplicable("no such nested scope")
    n = kids[child]
    sites = [a for a in accesses(e.body) if a.tensor == n]
    env = e.env
    for a in sites:
        for d, ix in enumerate(a.indices):
            lo, hi = ix.interval(env)
            t = n.traversal[d]
            if lo < t.lo or hi >= t.hi:
                raise RangeNotContained(f"read range [{lo},{hi}] exceeds [{t.lo},{t.hi}) of the nested scope")
    simple = not n.summation and not n.guards
    if simple:
        def visit(node):
            if isinstance(node, Access) and node.tensor == n:
                mapping = {t.id: ix for t, ix in zip(n.traversal, node.indices)}
                return _subst_body(n.body, mapping)
            return None

        return rebuild(e, body=map_compute(e.body, visit))
    if len(sites) != 1:
        raise NotApplicable("nested scope with summation is read more than once")
    body = e.body
    factor_ok = body == sites[0] or (isinstance(body, Op) and body.kind == "mul" and sites[0] in body.args)
    if not factor_ok:
        raise NotApplicable("nested reduction is not a factor of the body")
    a = sites[0]
    mapping = {t.id: ix for t, ix in zip(n.traversal, a.indices)}
    new_sum = [_copy(s, "S") for s in n.summation]
    for s, c in zip(n.summation, new_sum):
        mapping[s.id] = c.ix
    inlined = _subst_body(n.body, mapping)

    def visit(node):
        if isinstance(node, Access) and node.tensor == n:
            return inlined
        return None

    return build_expression(e.traversal, list(e.summation) + new_sum, map_compute(body, visit),
                            list(e.guards) + list(_subst_guards(n.guards, mapping)), e.out_pad)


def travmerge_proposals(e: Scope) -> List[dict]:
    out = []
    for k, n in enumerate(child_scopes(e)):
        try:
            merge_traversals(e, k)
        except RuleError:
            continue
        out.append({"child": k})
    return out


# ---------------------------------------------------------------------------
# boundary relaxing / tightening


def _band_position(t, dim, lo, hi) -> str:
    """Classify an inclusive coordinate interval against a tensor dimension."""
    if isinstance(t, Scope):
        it = t.traversal[dim]
        inner_lo, inner_hi = it.lo, it.hi
    else:
        inner_lo, inner_hi = 0, t.shape[dim]
    blo, bhi = t.valid_band(dim)
    if lo < blo or hi >= bhi:
        return "out"
    if hi < inner_lo or lo >= inner_hi:
        return "pad"
    return "mixed"


def provably_zero(s: Scope, env) -> bool:
    """True if every point of the box ``env`` contributes zero."""
    for g in s.guards:
        lo, hi = g.expr.interval(env)
        if hi < g.lo or lo >= g.hi:
            return True
    return _zero(s.body, env)


def _zero(c, env) -> bool:
    if isinstance(c, Const):
        return c.value == 0
    if isinstance(c, Access):
        for d, ix in enumerate(c.indices):
            lo, hi = ix.interval(env)
            if _band_position(c.tensor, d, lo, hi) == "pad":
                return True
        return False
    if c.kind == "mul":
        return any(_zero(a, env) for a in c.args)
    if c.kind == "neg":
        return _zero(c.args[0], env)
    return all(_zero(a, env) for a in c.args)


def reads_in_band(s: Scope, env=None) -> bool:
    env = env or s.env
    for a in accesses(s.body):
        for d, ix in enumerate(a.indices):
            lo, hi = ix.interval(env)
            blo, bhi = a.tensor.valid_band(d)
            if lo < blo or hi >= bhi:
                return False
    return True


def consumer_reads(root: Scope, site: Sequence[int]):
    """(indices, env) of every read of the scope at ``site`` by its parent."""
    if not site:
        return None
    parent = scope_at(root, site[:-1])
    target = scope_at(root, site)
    return [(a.indices, parent.env) for a in accesses(parent.body) if a.tensor == target]


def read_hull(reads, dim):
    lo, hi = None, None
    for idx, env in reads:
        a, b = idx[dim].interval(env)
        lo = a if lo is None else min(lo, a)
        hi = b if hi is None else max(hi, b)
    return lo, hi


def _slabs(it: Iterator, lo: int, hi: int):
    """Half-open ranges in [it.lo, it.hi) that fall outside [lo, hi)."""
    out = []
    if lo > it.lo:
        out.append((it.lo, lo))
    if hi < it.hi:
        out.append((hi, it.hi))
    return out


def _multi(fn, root: Scope, site, params: dict, key: str) -> Scope:
    """Apply a list of single boundary changes, tracking iterators by id."""
    s = scope_at(root, site)
    ids = [s.iterators[p].id for p, _, _ in params[key]]
    for it_id, (_, lo, hi) in zip(ids, params[key]):
        cur = scope_at(root, site)
        pos = next(k for k, i in enumerate(cur.iterators) if i.id == it_id)
        root = fn(root, site, {"pos": pos, "range": [lo, hi]})
    return root


def relax_boundary(root: Scope, site: Sequence[int], params: dict) -> Scope:
    """Widen an iterator range (added band provably zero) or drop guards
    (every consumer read provably satisfies them)."""
    s = scope_at(root, site)
    if "ranges" in params:
        return _multi(relax_boundary, root, site, params, "ranges")
    if "guards" in params:
        for k in sorted(params["guards"], reverse=True):
            root = relax_boundary(root, site, {"guard": k})
        return root
    if "guard" in params:
        k = params["guard"]
        if not 0 <= k < len(s.guards):
            raise NotApplicable("no such guard")
        g = s.guards[k]
        reads = consumer_reads(root, site)
        if not reads:
            raise RegionUsed("guard removal needs every consumer read to satisfy it")
        for idx, env in reads:
            mapping = {t.id: ix for t, ix in zip(s.traversal, idx)}
            if g.expr.iterators() - {t.id for t in s.traversal}:
                raise RegionUsed("guard depends on summation iterators")
            lo, hi = g.expr.substitute(mapping).simplify(env).interval(env)
            if lo < g.lo or hi >= g.hi:
                raise RegionUsed("a consumer reads a point the guard excludes")
        new = Scope(s.traversal, s.summation, s.body, s.guards[:k] + s.guards[k + 1:], s.out_pad)
        if not reads_in_band(new):
            raise NotProvablyConstant("relaxed domain reads outside a pad band")
        return replace_at(root, site, rebuild(s, guards=new.guards))
    pos = params["pos"]
    new_lo, new_hi = params["range"]
    its = list(s.iterators)
    it = its[pos]
    if not (new_lo <= it.lo and new_hi >= it.hi) or (new_lo, new_hi) == (it.lo, it.hi):
        raise NotApplicable("relaxing must strictly widen the range")
    is_trav = pos < len(s.traversal)
    if is_trav and not site:
        raise NotApplicable("cannot change the output shape of the root expression")
    for lo, hi in _slabs(it.with_range(new_lo, new_hi), it.lo, it.hi):
        env = dict(s.env)
        env[it.id] = (lo, hi)
        if not provably_zero(s, env):
            raise NotProvablyConstant(f"added band [{lo},{hi}) of {it.name} is not provably zero")
    widened = it.with_range(new_lo, new_hi)
    env = dict(s.env)
    env[it.id] = (new_lo, new_hi)
    if not reads_in_band(s, env):
        raise NotProvablyConstant("widened range reads outside a pad band")
    if is_trav:
        trav = tuple(widened if t.id == it.id else t for t in s.traversal)
        pad = list(s.out_pad)
        band_lo, band_hi = it.lo - pad[pos][0], it.hi + pad[pos][1]
        pad[pos] = (max(0, new_lo - band_lo), max(0, band_hi - new_hi))
        new = rebuild(s, traversal=trav, out_pad=tuple(pad))
    else:
        summ = tuple(widened if t.id == it.id else t for t in s.summation)
        new = rebuild(s, summation=summ)
    return replace_at(root, site, new)


def tighten_boundary(root: Scope, site: Sequence[int], params: dict) -> Scope:
    """Narrow an iterator range; the dropped band must be provably zero (it
    then becomes output padding) or unread by consumers."""
    if "ranges" in params:
        return _multi(tighten_boundary, root, site, params, "ranges")
    s = scope_at(root, site)
    pos = params["pos"]
    new_lo, new_hi = params["range"]
    its = list(s.iterators)
    it = its[pos]
    if not (new_lo >= it.lo and new_hi <= it.hi and new_lo < new_hi) or (new_lo, new_hi) == (it.lo, it.hi):
        raise NotApplicable("tightening must strictly narrow the range")
    is_trav = pos < len(s.traversal)
    if is_trav and not site:
        raise NotApplicable("cannot change the output shape of the root expression")
    zero = True
    for lo, hi in _slabs(it, new_lo, new_hi):
        env = dict(s.env)
        env[it.id] = (lo, hi)
        if not provably_zero(s, env):
            zero = False
    narrowed = it.with_range(new_lo, new_hi)
    if not is_trav:
        if not zero:
            raise RegionUsed(f"dropped band of {it.name} contributes to the sum")
        summ = tuple(narrowed if t.id == it.id else t for t in s.summation)
        return replace_at(root, site, rebuild(s, summation=summ))
    reads = consumer_reads(root, site)
    rlo, rhi = read_hull(reads, pos)
    pad = list(s.out_pad)
    if rlo is None:
        rlo, rhi = new_lo, new_hi - 1
    if not zero and (rlo < new_lo or rhi >= new_hi):
        raise RegionUsed(f"consumers read the dropped band of {it.name}")
    band_lo, band_hi = it.lo - pad[pos][0], it.hi + pad[pos][1]
    lo_need = max(0, new_lo - max(rlo, band_lo))
    hi_need = max(0, min(rhi + 1, band_hi) - new_hi)
    pad[pos] = (lo_need, hi_need)
    trav = tuple(narrowed if t.id == it.id else t for t in s.traversal)
    return replace_at(root, site, rebuild(s, traversal=trav, out_pad=tuple(pad)))


def _tight_targets(s: Scope, it: Iterator) -> List[Tuple[int, int]]:
    """Candidate narrower ranges suggested by guards and tensor extents."""
    out = []
    for g in s.guards:
        ex = g.expr
        if len(ex.terms) == 1 and ex.terms[0] == (it.id, 1):
            out.append((max(it.lo, g.lo - ex.const), min(it.hi, g.hi - ex.const)))
    for a in accesses(s.body):
        t = a.tensor
        for d, ix in enumerate(a.indices):
            if len(ix.terms) == 1 and ix.terms[0] == (it.id, 1):
                if isinstance(t, Scope):
                    lo, hi = t.traversal[d].lo, t.traversal[d].hi
                else:
                    lo, hi = 0, t.shape[d]
                out.append((max(it.lo, lo - ix.const), min(it.hi, hi - ix.const)))
    res = []
    for lo, hi in out:
        if lo < hi and (lo, hi) != (it.lo, it.hi) and (lo, hi) not in res:
            res.append((lo, hi))
    return res


def tighten_proposals(root: Scope, site) -> List[dict]:
    s = scope_at(root, site)
    out = []
    for pos, it in enumerate(s.iterators):
        if pos < len(s.traversal) and not site:
            continue
        for rng in _tight_targets(s, it):
            params = {"pos": pos, "range": list(rng)}
            try:
                tighten_boundary(root, site, params)
            except RuleError:
                continue
            out.append(params)
    trav = [p for p in out if p["pos"] < len(s.traversal)]
    if len(trav) > 1 and len({p["pos"] for p in trav}) == len(trav):
        combo = {"ranges": [[p["pos"], *p["range"]] for p in trav]}
        try:
            tighten_boundary(root, site, combo)
            out.insert(0, combo)
        except RuleError:
            pass
    return out


def relax_proposals(root: Scope, site) -> List[dict]:
    s = scope_at(root, site)
    out = []
    if not site:
        return out
    for k in range(len(s.guards)):
        params = {"guard": k}
        try:
            relax_boundary(root, site, params)
        except RuleError:
            continue
        out.append(params)
    if len(out) > 1:
        combo = {"guards": [p["guard"] for p in out]}
        try:
            relax_boundary(root, site, combo)
            out.insert(0, combo)
        except RuleError:
            pass
    reads = consumer_reads(root, site)
    for pos, t in enumerate(s.traversal):
        lo, hi = read_hull(reads, pos)
        if lo is None:
            continue
        rng = (min(lo, t.lo), max(hi + 1, t.hi))
        if rng != (t.lo, t.hi):
            params = {"pos": pos, "range": list(rng)}
            try:
                relax_boundary(root, site, params)
            except RuleError:
                continue
            out.append(params)
    return out


# ---------------------------------------------------------------------------
# inter-expression rules


def split_expression(e: Scope, pos: int, cut: int) -> Tuple[Scope, Scope]:
    """Split traversal iterator ``pos`` at ``cut`` into two independent expressions."""
    t = e.traversal[pos]
    if not t.lo < cut < t.hi:
        raise NotCoveringPartition(f"cut {cut} leaves an empty part of [{t.lo},{t.hi})")
    parts = []
    for lo, hi in ((t.lo, cut), (cut, t.hi)):
        trav = tuple(x.with_range(lo, hi) if x.id == t.id else x for x in e.traversal)
        pad = list(e.out_pad)
        pad[pos] = (0, 0)
        # body and guards stay verbatim so the halves remain mergeable
        parts.append(Scope(trav, e.summation, e.body, e.guards, tuple(pad)))
    return parts[0], parts[1]


def merge_expressions(e1: Scope, e2: Scope, out1: Optional[str] = None, out2: Optional[str] = None) -> Scope:
    """Union two expressions that differ only in one traversal range."""
    from .expr import free_tensors

    if out1 and any(t.name == out1 for t in free_tensors(e2)) or \
            out2 and any(t.name == out2 for t in free_tensors(e1)):
        raise NotIndependent("one expression consumes the other's output")
    if len(e1.traversal) != len(e2.traversal):
        raise BodiesDiffer("different ranks")
    diff = [k for k, (a, b) in enumerate(zip(e1.traversal, e2.traversal)) if (a.lo, a.hi) != (b.lo, b.hi)]
    if not diff:
        if fingerprint(e1) != fingerprint(e2):
            raise BodiesDiffer("bodies differ")
        return e1
    if len(diff) > 1:
        raise NotUnionable("ranges differ in more than one dimension")
    k = diff[0]
    a, b = e1.traversal[k], e2.traversal[k]
    if not (a.hi == b.lo or b.hi == a.lo):
        raise NotUnionable("ranges do not touch")
    lo, hi = min(a.lo, b.lo), max(a.hi, b.hi)
    m1 = rebuild(e1, traversal=tuple(x.with_range(lo, hi) if x.id == a.id else x for x in e1.traversal))
    m2 = rebuild(e2, traversal=tuple(x.with_range(lo, hi) if x.id == b.id else x for x in e2.traversal))
    if fingerprint(m1) != fingerprint(m2):
        raise BodiesDiffer("bodies differ beyond the split range")
    return m1


def fuse_expressions(outer: Scope, inner: Scope, name: str) -> Scope:
    """Inline ``inner`` (which produces tensor ``name``) into ``outer``."""
    targets = [a for a in accesses(outer.body) if isinstance(a.tensor, TensorDecl) and a.tensor.name == name]
    if not targets:
        raise NoDependency(f"outer expression does not read {name}")
    decl = targets[0].tensor
    if inner.shape != decl.shape:
        raise NoDependency(f"{name} shape {decl.shape} differs from producer shape {inner.shape}")
    shifted = inner
    if any(t.lo for t in inner.traversal):
        raise NotApplicable("producer must start its output at coordinate 0")
    nested = rebuild(shifted, out_pad=decl.pad)

    def visit(n):
        if isinstance(n, Access) and isinstance(n.tensor, TensorDecl) and n.tensor.name == name:
            return Access(nested, n.indices)
        return None

    return rebuild(outer, body=map_compute(outer.body, visit))


# ---------------------------------------------------------------------------
# applications and traces


@dataclass
class RuleApplication:
    rule: str
    site: Tuple[int, ...] = ()
    params: dict = field(default_factory=dict)
    pre: Optional[str] = None
    post: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps({"rule": self.rule, "site": list(self.site), "params": self.params,
                           "pre": self.pre, "post": self.post}, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "RuleApplication":
        d = json.loads(line)
        return RuleApplication(d["rule"], tuple(d.get("site", [])), d.get("params", {}), d.get("pre"), d.get("post"))


def apply_intra(root: Scope, app: RuleApplication) -> Scope:
    """Apply an intra-expression rule at its site and return the new root."""
    site = tuple(app.site)
    s = scope_at(root, site)
    p = app.params
    if app.rule == "SumSplit":
        ids = [s.summation[k].id for k in p["outer"]]
        return replace_at(root, site, split_summation(s, ids))
    if app.rule == "VarSub":
        return replace_at(root, site, substitute_variables(s, varsub_map(s, p)))
    if app.rule == "TravMerge":
        return replace_at(root, site, merge_traversals(s, p["child"]))
    if app.rule == "BoundRelax":
        return relax_boundary(root, site, p)
    if app.rule == "BoundTighten":
        return tighten_boundary(root, site, p)
    raise NotApplicable(f"{app.rule} is not an intra-expression rule")


def intra_proposals(root: Scope, rules: Iterable[str] = INTRA_RULES) -> List[RuleApplication]:
    """Every generated application, in rule order, then site order, then params order."""
    rules = [r for r in INTRA_RULES if r in set(rules)]
    sites = list(all_scopes(root))
    out: List[RuleApplication] = []
    for rule in rules:
        for site, s in sites:
            if rule == "SumSplit":
                params = sumsplit_proposals(s)
            elif rule == "VarSub":
                params = varsub_proposals(s)
            elif rule == "TravMerge":
                params = travmerge_proposals(s)
            elif rule == "BoundRelax":
                params = relax_proposals(root, site)
            else:
                params = tighten_proposals(root, site)
            out.extend(RuleApplication(rule, site, p) for p in params)
    return out


def write_trace(apps: Iterable[RuleApplication], path):
    with open(path, "w") as fh:
        for a in apps:
            fh.write(a.to_json() + "\n")


def read_trace(path) -> List[RuleApplication]:
    with open(path) as fh:
        return [RuleApplication.from_json(l) for l in fh if l.strip()]
