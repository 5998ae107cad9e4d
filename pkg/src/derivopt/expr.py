"""Tensor-algebra expression IR: iterators, tensors, compute trees and scopes.

A :class:`Scope` is ``L{traversal} S{summation} body`` whose output is
materialized as a tensor.  Scopes nested inside a body are closed: they only
reference their own iterators, so they can be evaluated and hashed on their own.
Output coordinate ``i`` along a traversal iterator with range ``[lo, hi)`` is the
iterator value itself, so nested-scope reads use the iterator's coordinate space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import ArityMismatch, BadSite, EmptyRange, UndeclaredIterator
from .index import IndexExpr

_ids = itertools.count(1)


def fresh_id() -> int:
    return next(_ids)


@dataclass(frozen=True)
class Iterator:
    id: int
    name: str
    lo: int
    hi: int
    kind: str = "L"  # "L" traversal, "S" summation

    @property
    def width(self) -> int:
        return self.hi - self.lo

    def with_range(self, lo: int, hi: int) -> "Iterator":
        return Iterator(self.id, self.name, lo, hi, self.kind)

    def as_kind(self, kind: str) -> "Iterator":
        return Iterator(self.id, self.name, self.lo, self.hi, kind)

    @property
    def ix(self) -> IndexExpr:
        return IndexExpr.var(self.id)


def it(name: str, lo: int, hi: int, kind: str = "L") -> Iterator:
    """Create an iterator with a fresh id."""
    return Iterator(fresh_id(), name, lo, hi, kind)


def renew(iterator: Iterator, kind: Optional[str] = None, name: Optional[str] = None) -> Iterator:
    return Iterator(fresh_id(), name or iterator.name, iterator.lo, iterator.hi, kind or iterator.kind)


@dataclass(frozen=True)
class TensorDecl:
    name: str
    shape: Tuple[int, ...]
    pad: Tuple[Tuple[int, int], ...] = ()
    origin: Optional[str] = None  # fingerprint of the scope that produced it

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        pad = tuple(tuple(int(v) for v in p) for p in self.pad) or tuple((0, 0) for _ in self.shape)
        if len(pad) != len(self.shape):
            raise ArityMismatch(f"pad rank {len(pad)} != shape rank {len(self.shape)} for {self.name}")
        if any(s <= 0 for s in self.shape):
            raise EmptyRange(f"tensor {self.name} has a non-positive dimension")
        if any(lo < 0 or hi < 0 for lo, hi in pad):
            raise ValueError(f"negative pad on {self.name}")
        object.__setattr__(self, "pad", pad)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    def valid_band(self, dim: int) -> Tuple[int, int]:
        lo, hi = self.pad[dim]
        return -lo, self.shape[dim] + hi


# compute tree ---------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Access:
    tensor: Union[TensorDecl, "Scope"]
    indices: Tuple[IndexExpr, ...]


@dataclass(frozen=True)
class Op:
    kind: str  # add, mul, sub, neg, max, min
    args: tuple


Compute = Union[Const, Access, Op]
COMMUTATIVE = frozenset({"add", "mul", "max", "min"})
NARY = frozenset({"add", "mul"})
ARITY = {"sub": 2, "neg": 1, "max": 2, "min": 2}


def access(tensor, *indices) -> Access:
    idx = tuple(i if isinstance(i, IndexExpr) else (i.ix if isinstance(i, Iterator) else IndexExpr.lit(i))
                for i in indices)
    return Access(tensor, idx)


def add(*xs) -> Op:
    return Op("add", tuple(xs))


def mul(*xs) -> Op:
    return Op("mul", tuple(xs))


def sub(a, b) -> Op:
    return Op("sub", (a, b))


def neg(a) -> Op:
    return Op("neg", (a,))


def maximum(a, b) -> Op:
    return Op("max", (a, b))


def minimum(a, b) -> Op:
    return Op("min", (a, b))


@dataclass(frozen=True)
class Guard:
    """Constraint ``lo <= expr < hi``; points violating it are skipped."""

    expr: IndexExpr
    lo: int
    hi: int


@dataclass(frozen=True, eq=True)
class Scope:
    traversal: Tuple[Iterator, ...]
    summation: Tuple[Iterator, ...]
    body: Compute
    guards: Tuple[Guard, ...] = ()
    out_pad: Tuple[Tuple[int, int], ...] = ()
    _cache: dict = field(default_factory=dict, compare=False, hash=False, repr=False)

    @property
    def iterators(self) -> Tuple[Iterator, ...]:
        return self.traversal + self.summation

    @property
    def env(self) -> Dict[int, Tuple[int, int]]:
        env = self._cache.get("env")
        if env is None:
            env = {i.id: (i.lo, i.hi) for i in self.iterators}
            self._cache["env"] = env
        return env

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(i.width for i in self.traversal)

    @property
    def origin(self) -> Tuple[int, ...]:
        return tuple(i.lo for i in self.traversal)

    @property
    def rank(self) -> int:
        return len(self.traversal)

    def valid_band(self, dim: int) -> Tuple[int, int]:
        t = self.traversal[dim]
        lo, hi = self.out_pad[dim]
        return t.lo - lo, t.hi + hi

    def by_id(self, it_id: int) -> Iterator:
        for i in self.iterators:
            if i.id == it_id:
                return i
        raise UndeclaredIterator(str(it_id))

    def __hash__(self):
        h = self._cache.get("hash")
        if h is None:
            h = hash((self.traversal, self.summation, self.body, self.guards, self.out_pad))
            self._cache["hash"] = h
        return h

    def __str__(self) -> str:
        from .text import format_expr

        return format_expr(self)


Expression = Union[Scope, TensorDecl]


# traversal helpers -----------------------------------------------------------


def iter_compute(c: Compute):
    """Yield every node of a compute tree (not descending into nested scopes)."""
    yield c
    if isinstance(c, Op):
        for a in c.args:
            yield from iter_compute(a)


def accesses(c: Compute) -> List[Access]:
    return [n for n in iter_compute(c) if isinstance(n, Access)]


def map_compute(c: Compute, fn: Callable[[Compute], Optional[Compute]]) -> Compute:
    """Bottom-up rebuild; ``fn`` may return a replacement or None to keep."""
    if isinstance(c, Op):
        c = Op(c.kind, tuple(map_compute(a, fn) for a in c.args))
    rep = fn(c)
    return c if rep is None else rep


def map_indices(c: Compute, fn: Callable[[IndexExpr], IndexExpr]) -> Compute:
    def visit(n):
        if isinstance(n, Access):
            return Access(n.tensor, tuple(fn(i) for i in n.indices))
        return None

    return map_compute(c, visit)


def body_iterators(c: Compute) -> set:
    out = set()
    for a in accesses(c):
        for i in a.indices:
            out |= i.iterators()
    return out


def child_scopes(s: Scope) -> List[Scope]:
    seen: List[Scope] = []
    for a in accesses(s.body):
        if isinstance(a.tensor, Scope) and a.tensor not in seen:
            seen.append(a.tensor)
    return seen


def all_scopes(e: Expression, path: tuple = ()):
    """Yield (path, scope) pairs in pre-order."""
    if not isinstance(e, Scope):
        return
    yield path, e
    for k, child in enumerate(child_scopes(e)):
        yield from all_scopes(child, path + (k,))


def scope_at(e: Expression, path: Sequence[int]) -> Scope:
    cur = e
    for k in path:
        if not isinstance(cur, Scope):
            raise BadSite(f"no scope at {tuple(path)}")
        kids = child_scopes(cur)
        if not 0 <= k < len(kids):
            raise BadSite(f"no scope at {tuple(path)}")
        cur = kids[k]
    if not isinstance(cur, Scope):
        raise BadSite(f"no scope at {tuple(path)}")
    return cur


def replace_child(parent: Scope, old: Scope, new: Union[Scope, TensorDecl]) -> Scope:
    """Replace every access to nested scope ``old`` with ``new``.

    When ``new`` is a tensor its coordinates start at 0, so indices are shifted
    by the old scope's origin.
    """
    shift = old.origin

    def visit(n):
        if isinstance(n, Access) and n.tensor == old:
            if isinstance(new, TensorDecl):
                idx = tuple(i - o for i, o in zip(n.indices, shift))
                return Access(new, idx)
            return Access(new, n.indices)
        return None

    return rebuild(parent, body=map_compute(parent.body, visit))


def replace_at(e: Expression, path: Sequence[int], new: Union[Scope, TensorDecl]) -> Expression:
    path = tuple(path)
    if not path:
        return new
    parent = scope_at(e, path[:-1])
    old = scope_at(e, path)
    new_parent = replace_child(parent, old, new)
    return replace_at(e, path[:-1], new_parent)


def free_tensors(e: Expression) -> List[TensorDecl]:
    out: List[TensorDecl] = []

    def walk(s):
        if isinstance(s, TensorDecl):
            if s not in out:
                out.append(s)
            return
        for a in accesses(s.body):
            walk(a.tensor)

    walk(e)
    return out


# construction ---------------------------------------------------------------


def _validate_compute(c: Compute, declared: set):
    for node in iter_compute(c):
        if isinstance(node, Access):
            rank = node.tensor.rank
            if len(node.indices) != rank:
                name = node.tensor.name if isinstance(node.tensor, TensorDecl) else "<scope>"
                raise ArityMismatch(f"{name}: {len(node.indices)} indices for rank {rank}")
            for i in node.indices:
                missing = i.iterators() - declared
                if missing:
                    raise UndeclaredIterator(f"iterator ids {sorted(missing)} not declared")
        elif isinstance(node, Op):
            need = ARITY.get(node.kind)
            if need is not None and len(node.args) != need:
                raise ArityMismatch(f"{node.kind} takes {need} operands")
            if node.kind not in ARITY and node.kind not in NARY:
                raise ValueError(f"unknown op {node.kind}")
        elif not isinstance(node, Const):
            raise TypeError(f"not a compute node: {node!r}")


def _flatten_nary(c: Compute) -> Compute:
    def visit(n):
        if isinstance(n, Op) and n.kind in NARY:
            args = []
            for a in n.args:
                if isinstance(a, Op) and a.kind == n.kind:
                    args.extend(a.args)
                else:
                    args.append(a)
            if len(args) == 1:
                return args[0]
            return Op(n.kind, tuple(args))
        return None

    return map_compute(c, visit)


def build_expression(traversal: Iterable[Iterator], summation: Iterable[Iterator], body: Compute,
                     guards: Iterable[Guard] = (), out_pad=None) -> Scope:
    """Validate and normalize a scope."""
    trav = tuple(t.as_kind("L") for t in traversal)
    summ = tuple(s.as_kind("S") for s in summation)
    its = trav + summ
    for i in its:
        if i.hi <= i.lo:
            raise EmptyRange(f"iterator {i.name} has empty range [{i.lo},{i.hi})")
    ids = [i.id for i in its]
    if len(set(ids)) != len(ids):
        raise ValueError("iterator declared twice in one scope")
    declared = set(ids)
    _validate_compute(body, declared)
    guards = tuple(guards)
    for g in guards:
        if g.expr.iterators() - declared:
            raise UndeclaredIterator("guard references an undeclared iterator")
    if out_pad is None:
        out_pad = tuple((0, 0) for _ in trav)
    out_pad = tuple((int(a), int(b)) for a, b in out_pad)
    if len(out_pad) != len(trav):
        raise ArityMismatch("output pad rank differs from traversal rank")

    env = {i.id: (i.lo, i.hi) for i in its}
    body = map_indices(_flatten_nary(body), lambda x: x.simplify(env))
    kept = []
    for g in guards:
        ge = g.expr.simplify(env)
        lo, hi = ge.interval(env)
        if g.lo <= lo and hi < g.hi:
            continue  # always satisfied
        if Guard(ge, g.lo, g.hi) not in kept:
            kept.append(Guard(ge, g.lo, g.hi))
    from .fingerprint import canonicalize

    return canonicalize(Scope(trav, summ, body, tuple(kept), out_pad))


def rebuild(s: Scope, **changes) -> Scope:
    fields = dict(traversal=s.traversal, summation=s.summation, body=s.body, guards=s.guards,
                  out_pad=s.out_pad)
    fields.update(changes)
    return build_expression(fields["traversal"], fields["summation"], fields["body"],
                            fields["guards"], fields["out_pad"])


def normalize(e: Expression) -> Expression:
    if isinstance(e, TensorDecl):
        return e

    def visit(n):
        if isinstance(n, Access) and isinstance(n.tensor, Scope):
            return Access(normalize(n.tensor), n.indices)
        return None

    return rebuild(e, body=map_compute(e.body, visit))


def infer_shape(e: Expression) -> Tuple[int, ...]:
    return tuple(e.shape)


def substitute_index(e: Scope, mapping: Dict[int, IndexExpr]) -> Scope:
    """Replace iterator ids in every index of ``e`` (not nested scopes)."""
    declared = {i.id for i in e.iterators}
    for k, v in mapping.items():
        if k not in declared:
            raise UndeclaredIterator(f"mapping target {k} not declared")
        if v.iterators() - declared:
            raise UndeclaredIterator("mapping introduces undeclared iterators")
    body = map_indices(e.body, lambda x: x.substitute(mapping))
    guards = tuple(Guard(g.expr.substitute(mapping), g.lo, g.hi) for g in e.guards)
    return rebuild(e, body=body, guards=guards)
