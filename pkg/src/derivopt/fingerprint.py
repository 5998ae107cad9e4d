"""Symmetry-invariant 128-bit expression hashing.

Traversal iterators hash by (range, position); summation iterators hash by
range plus an order-free signature of where they are used, so renaming
iterators or permuting summations leaves the hash unchanged.  Commutative
operands are folded with a sum modulo 2**128, everything else positionally.
Tensors produced by scopes hash through the producing scope.
"""

from __future__ import annotations

import hashlib
import threading
from functools import lru_cache
from typing import Dict, Union

from .expr import Access, Const, Op, Scope, TensorDecl, COMMUTATIVE
from .index import IndexExpr

MASK = (1 << 128) - 1


def _h(*parts) -> int:
    return _h_cached(parts)


@lru_cache(maxsize=1 << 18)
def _h_cached(parts) -> int:
    data = repr(parts).encode()
    return int.from_bytes(hashlib.blake2b(data, digest_size=16).digest(), "big")


def _fold_sum(values) -> int:
    total = 0
    for v in values:
        total = (total + v) & MASK
    return total


def tensor_hash(t: Union[TensorDecl, Scope]) -> int:
    if isinstance(t, Scope):
        return fingerprint_int(t)
    if t.origin is not None:
        return _h("origin", t.origin, t.pad)
    return _h("tensor", t.name, t.shape, t.pad)


class _Hasher:
    def __init__(self, scope: Scope):
        self.scope = scope
        self.iter_hash: Dict[int, int] = {}
        for pos, t in enumerate(scope.traversal):
            self.iter_hash[t.id] = _h("trav", pos, t.lo, t.hi)
        usage: Dict[int, list] = {s.id: [] for s in scope.summation}
        for node in _walk(scope.body):
            if isinstance(node, Access):
                th = tensor_hash(node.tensor)
                for dim, ix in enumerate(node.indices):
                    _collect_usage(ix, ("acc", th, dim), usage)
        for g in scope.guards:
            _collect_usage(g.expr, ("guard", g.lo, g.hi), usage)
        for s in scope.summation:
            self.iter_hash[s.id] = _h("sum", s.lo, s.hi, _fold_sum(usage[s.id]))

    def index(self, x: IndexExpr) -> int:
        return _h("ix", x.const, _fold_sum(_h(c, self.atom(a)) for a, c in x.terms))

    def atom(self, a) -> int:
        if isinstance(a, int):
            return self.iter_hash[a]
        kind, expr, d = a
        return _h(kind, d, self.index(expr))

    def compute(self, c):
        """Return (canonical node, hash)."""
        if isinstance(c, Const):
            return c, _h("const", c.value)
        if isinstance(c, Access):
            h = _h("access", tensor_hash(c.tensor), tuple(self.index(i) for i in c.indices))
            return c, h
        pairs = [self.compute(a) for a in c.args]
        if c.kind in COMMUTATIVE:
            pairs.sort(key=lambda p: p[1])
            h = _h("op", c.kind, len(pairs), _fold_sum(p[1] for p in pairs))
        else:
            h = _h("op", c.kind, tuple(p[1] for p in pairs))
        return Op(c.kind, tuple(p[0] for p in pairs)), h


def _walk(c):
    yield c
    if isinstance(c, Op):
        for a in c.args:
            yield from _walk(a)


def _collect_usage(x: IndexExpr, ctx, usage):
    for a, coef in x.terms:
        if isinstance(a, int):
            if a in usage:
                usage[a].append(_h(ctx, coef))
        else:
            kind, expr, d = a
            _collect_usage(expr, ctx + (kind, d, coef), usage)


def canonicalize(s: Scope) -> Scope:
    """Sort commutative operands, summations and guards; cache the fingerprint."""
    hs = _Hasher(s)
    body, body_h = hs.compute(s.body)
    summ = tuple(sorted(s.summation, key=lambda i: (hs.iter_hash[i.id], i.name, i.id)))
    gh = [(_h("guard", hs.index(g.expr), g.lo, g.hi), g) for g in s.guards]
    gh.sort(key=lambda p: p[0])
    guards = tuple(g for _, g in gh)
    fp = _h("scope", tuple(hs.iter_hash[t.id] for t in s.traversal),
            _fold_sum(hs.iter_hash[i.id] for i in s.summation), body_h,
            _fold_sum(h for h, _ in gh), s.out_pad)
    out = Scope(s.traversal, summ, body, guards, s.out_pad)
    out._cache["fp"] = fp
    return out


def fingerprint_int(e: Union[Scope, TensorDecl]) -> int:
    if isinstance(e, TensorDecl):
        return tensor_hash(e)
    fp = e._cache.get("fp")
    if fp is None:
        fp = canonicalize(e)._cache["fp"]
        e._cache["fp"] = fp
    return fp


def fingerprint(e: Union[Scope, TensorDecl]) -> str:
    """128-bit fingerprint as 32 hex characters."""
    return f"{fingerprint_int(e):032x}"


class FingerprintSet:
    """Thread-safe insert-if-absent set of fingerprints."""

    def __init__(self):
        self._items = set()
        self._lock = threading.Lock()

    def __contains__(self, fp) -> bool:
        return fp in self._items

    def __len__(self) -> int:
        return len(self._items)

    def insert(self, fp) -> bool:
        with self._lock:
            if fp in self._items:
                return False
            self._items.add(fp)
            return True


def dedup_insert(seen, fp) -> bool:
    """Insert ``fp`` into ``seen``; True iff it was absent."""
    if isinstance(seen, FingerprintSet):
        return seen.insert(fp)
    if fp in seen:
        return False
    seen.add(fp)
    return True
