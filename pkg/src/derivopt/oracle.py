"""Exact integer reference interpreter for expressions.

Every scope is evaluated by broadcasting its iterators over a dense grid
(traversal axes first, summation axes last), masking guarded-out points and
summing the summation axes.  Reads in a tensor's pad band yield 0; reads
outside it raise :class:`OutOfBoundsRead`.  Arithmetic is int64 and any
intermediate whose magnitude could exceed 2**62 raises instead of wrapping.
"""

from __future__ import annotations

from typing import Dict, Mapping, Optional

import numpy as np

from .errors import MissingInput, OutOfBoundsRead, OverflowError64, ShapeMismatch
from .expr import Access, Const, Op, Scope, TensorDecl, iter_compute

LIMIT = float(2 ** 62)


def _check(bound: np.ndarray | float, what: str):
    if np.max(bound, initial=0.0) > LIMIT:
        raise OverflowError64(f"int64 overflow risk in {what}")


class _Evaluator:
    def __init__(self, bindings: Mapping[str, np.ndarray], memo: bool = True):
        self.bindings = bindings
        self.memo: Optional[Dict[Scope, np.ndarray]] = {} if memo else None

    def tensor(self, t: TensorDecl) -> np.ndarray:
        if t.name not in self.bindings:
            raise MissingInput(f"no binding for tensor {t.name}")
        v = np.asarray(self.bindings[t.name])
        if tuple(v.shape) != t.shape:
            raise ShapeMismatch(f"{t.name}: bound shape {v.shape} != declared {t.shape}")
        return v.astype(np.int64, copy=False)

    def scope(self, s: Scope) -> np.ndarray:
        if self.memo is not None and s in self.memo:
            return self.memo[s]
        its = s.iterators
        n = len(its)
        full = tuple(i.width for i in its)
        vals = {}
        for k, i in enumerate(its):
            shape = [1] * n
            shape[k] = i.width
            vals[i.id] = np.arange(i.lo, i.hi, dtype=np.int64).reshape(shape)
        mask = np.ones(full, dtype=bool)
        for g in s.guards:
            v = np.asarray(g.expr.evaluate(vals))
            mask &= np.broadcast_to((v >= g.lo) & (v < g.hi), full)
        body = np.broadcast_to(np.asarray(self.compute(s.body, vals, mask, full), dtype=np.int64), full)
        body = np.where(mask, body, 0)
        if s.summation:
            _check(np.abs(body).astype(float).sum(axis=tuple(range(len(s.traversal), n))), "summation")
            out = body.sum(axis=tuple(range(len(s.traversal), n)))
        else:
            out = body.copy()
        out = np.asarray(out, dtype=np.int64).reshape(s.shape)
        if self.memo is not None:
            self.memo[s] = out
        return out

    def compute(self, c, vals, mask, full):
        if isinstance(c, Const):
            return np.int64(c.value)
        if isinstance(c, Access):
            return self.read(c, vals, mask, full)
        args = [np.asarray(self.compute(a, vals, mask, full), dtype=np.int64) for a in c.args]
        k = c.kind
        if k == "add":
            _check(sum(np.abs(a).astype(float) for a in args), "add")
            out = args[0]
            for a in args[1:]:
                out = out + a
            return out
        if k == "mul":
            bound = np.abs(args[0]).astype(float)
            out = args[0]
            for a in args[1:]:
                bound = bound * np.abs(a).astype(float)
                _check(bound, "mul")
                out = out * a
            return out
        if k == "sub":
            _check(np.abs(args[0]).astype(float) + np.abs(args[1]).astype(float), "sub")
            return args[0] - args[1]
        if k == "neg":
            return -args[0]
        if k == "max":
            return np.maximum(args[0], args[1])
        if k == "min":
            return np.minimum(args[0], args[1])
        raise ValueError(f"unknown op {k}")

    def read(self, a: Access, vals, mask, full):
        t = a.tensor
        if isinstance(t, Scope):
            arr = self.scope(t)
            origin = t.origin
            name = "<scope>"
        else:
            arr = self.tensor(t)
            origin = (0,) * t.rank
            name = t.name
        inside = np.ones(full, dtype=bool)
        coords = []
        for d, ix in enumerate(a.indices):
            v = np.broadcast_to(np.asarray(ix.evaluate(vals), dtype=np.int64), full)
            blo, bhi = t.valid_band(d)
            bad = ((v < blo) | (v >= bhi)) & mask
            if bad.any():
                where = tuple(int(x) for x in np.argwhere(bad)[0])
                raise OutOfBoundsRead(f"read of {name} dim {d} outside [{blo},{bhi}) at grid point {where}")
            local = v - origin[d]
            inside &= (local >= 0) & (local < arr.shape[d])
            coords.append(np.clip(local, 0, arr.shape[d] - 1))
        return np.where(inside, arr[tuple(coords)], 0)


def eval_expression(e, bindings: Mapping[str, np.ndarray], memo: bool = True) -> np.ndarray:
    """Evaluate a scope (or bare tensor) on concrete integer bindings."""
    ev = _Evaluator(bindings, memo)
    if isinstance(e, TensorDecl):
        return ev.tensor(e)
    return ev.scope(e)


def random_bindings(tensors, rng: np.random.Generator, lo: int = -4, hi: int = 4) -> Dict[str, np.ndarray]:
    """Uniform integer tensors in [lo, hi] for each declaration."""
    return {t.name: rng.integers(lo, hi + 1, size=t.shape, dtype=np.int64) for t in tensors}


def count_points(s: Scope) -> int:
    """Number of iteration points that survive the guards."""
    its = s.iterators
    n = len(its)
    full = tuple(i.width for i in its)
    if not s.guards:
        return int(np.prod(full, dtype=np.int64)) if full else 1
    vals = {}
    for k, i in enumerate(its):
        shape = [1] * n
        shape[k] = i.width
        vals[i.id] = np.arange(i.lo, i.hi, dtype=np.int64).reshape(shape)
    mask = np.ones(full, dtype=bool)
    for g in s.guards:
        v = np.asarray(g.expr.evaluate(vals))
        mask &= np.broadcast_to((v >= g.lo) & (v < g.hi), full)
    return int(mask.sum())


def body_ops(s: Scope) -> int:
    """Binary arithmetic operations per iteration point (n-ary add of k terms counts k-1)."""
    n = 0
    for node in iter_compute(s.body):
        if isinstance(node, Op):
            n += max(len(node.args) - 1, 1) if node.kind != "neg" else 1
    return n


def scope_flops(s: Scope, recursive: bool = True) -> int:
    """Arithmetic ops; a multiply-accumulate counts as two."""
    ops = body_ops(s) + (1 if s.summation else 0)
    total = count_points(s) * ops
    if recursive:
        from .expr import child_scopes

        total += sum(scope_flops(c) for c in child_scopes(s))
    return total
