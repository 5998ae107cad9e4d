"""Integer index functions: affine combinations of iterators plus floordiv/mod atoms.

An atom is either an iterator id (``int``) or a tuple ``("div"|"mod", expr, d)``
with ``expr`` an :class:`IndexExpr` and ``d > 0``.  Iterators are referenced by
id only; their ranges come from an environment mapping id -> (lo, hi).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Tuple, Union

import numpy as np

Atom = Union[int, tuple]
Env = Mapping[int, Tuple[int, int]]


def atom_key(atom: Atom) -> tuple:
    if isinstance(atom, int):
        return (0, atom)
    kind, expr, d = atom
    return (1 if kind == "div" else 2, d, expr.key())


@dataclass(frozen=True)
class IndexExpr:
    terms: Tuple[Tuple[Atom, int], ...] = ()
    const: int = 0

    # construction -----------------------------------------------------
    @staticmethod
    def make(coeffs: Mapping[Atom, int], const: int = 0) -> "IndexExpr":
        items = [(a, c) for a, c in coeffs.items() if c != 0]
        items.sort(key=lambda t: atom_key(t[0]))
        return IndexExpr(tuple(items), int(const))

    @staticmethod
    def var(it_id: int, coef: int = 1) -> "IndexExpr":
        return IndexExpr(((it_id, coef),), 0) if coef else IndexExpr()

    @staticmethod
    def lit(value: int) -> "IndexExpr":
        return IndexExpr((), int(value))

    def key(self) -> tuple:
        return (tuple((atom_key(a), c) for a, c in self.terms), self.const)

    # algebra ----------------------------------------------------------
    def coeff_map(self) -> Dict[Atom, int]:
        return dict(self.terms)

    def __add__(self, other) -> "IndexExpr":
        other = _coerce(other)
        acc = self.coeff_map()
        for a, c in other.terms:
            acc[a] = acc.get(a, 0) + c
        return IndexExpr.make(acc, self.const + other.const)

    __radd__ = __add__

    def __neg__(self) -> "IndexExpr":
        return self.scale(-1)

    def __sub__(self, other) -> "IndexExpr":
        return self + (-_coerce(other))

    def __rsub__(self, other) -> "IndexExpr":
        return _coerce(other) - self

    def scale(self, k: int) -> "IndexExpr":
        if k == 0:
            return IndexExpr()
        return IndexExpr(tuple((a, c * k) for a, c in self.terms), self.const * k)

    def __mul__(self, k: int) -> "IndexExpr":
        return self.scale(int(k))

    __rmul__ = __mul__

    def floordiv(self, d: int) -> "IndexExpr":
        return _div(self, d)

    def mod(self, d: int) -> "IndexExpr":
        return _mod(self, d)

    # inspection -------------------------------------------------------
    @property
    def is_const(self) -> bool:
        return not self.terms

    def iterators(self) -> set:
        out = set()
        for a, _ in self.terms:
            if isinstance(a, int):
                out.add(a)
            else:
                out |= a[1].iterators()
        return out

    def plain_coeff(self, it_id: int) -> int:
        for a, c in self.terms:
            if a == it_id:
                return c
        return 0

    def is_affine(self) -> bool:
        return all(isinstance(a, int) for a, _ in self.terms)

    def single_iterator(self):
        """Return the iterator id if this is exactly ``1*it + 0``."""
        if self.const == 0 and len(self.terms) == 1:
            a, c = self.terms[0]
            if isinstance(a, int) and c == 1:
                return a
        return None

    # transformation ---------------------------------------------------
    def substitute(self, mapping: Mapping[int, "IndexExpr"]) -> "IndexExpr":
        out = IndexExpr.lit(self.const)
        for a, c in self.terms:
            if isinstance(a, int):
                rep = mapping.get(a)
                out = out + (rep.scale(c) if rep is not None else IndexExpr.var(a, c))
            else:
                kind, expr, d = a
                inner = expr.substitute(mapping)
                piece = inner.floordiv(d) if kind == "div" else inner.mod(d)
                out = out + piece.scale(c)
        return out

    def simplify(self, env: Env) -> "IndexExpr":
        """Range-aware simplification; ``env`` maps iterator id -> (lo, hi)."""
        if self.is_affine():
            return self
        out = IndexExpr.lit(self.const)
        for a, c in self.terms:
            if isinstance(a, int):
                out = out + IndexExpr.var(a, c)
                continue
            kind, expr, d = a
            inner = expr.simplify(env)
            piece = _div(inner, d, env) if kind == "div" else _mod(inner, d, env)
            out = out + piece.scale(c)
        return _recombine(out)

    def interval(self, env: Env) -> Tuple[int, int]:
        """Inclusive bounds [lo, hi] of the value over the box ``env``."""
        lo = hi = self.const
        for a, c in self.terms:
            alo, ahi = atom_interval(a, env)
            if c >= 0:
                lo += c * alo
                hi += c * ahi
            else:
                lo += c * ahi
                hi += c * alo
        return lo, hi

    def evaluate(self, values: Mapping[int, object]):
        """Evaluate with ints or numpy arrays bound to iterator ids."""
        acc = self.const
        for a, c in self.terms:
            if isinstance(a, int):
                v = values[a]
            else:
                kind, expr, d = a
                inner = expr.evaluate(values)
                v = np.floor_divide(inner, d) if kind == "div" else np.mod(inner, d)
            acc = acc + c * v
        return acc

    def __str__(self) -> str:
        return format_index(self, {})


def _coerce(x) -> IndexExpr:
    if isinstance(x, IndexExpr):
        return x
    return IndexExpr.lit(int(x))


def atom_interval(a: Atom, env: Env) -> Tuple[int, int]:
    if isinstance(a, int):
        lo, hi = env[a]
        return lo, hi - 1
    kind, expr, d = a
    lo, hi = expr.interval(env)
    if kind == "div":
        return lo // d, hi // d
    if lo // d == hi // d:
        return lo % d, hi % d
    return 0, d - 1


def _split_divisible(x: IndexExpr, d: int):
    """Write x = d*q + r, moving every term whose coefficient d divides into q."""
    q: Dict[Atom, int] = {}
    r: Dict[Atom, int] = {}
    for a, c in x.terms:
        if c % d == 0:
            q[a] = c // d
        else:
            r[a] = c
    return IndexExpr.make(q, x.const // d), IndexExpr.make(r, x.const % d)


def _div(x: IndexExpr, d: int, env: Env | None = None) -> IndexExpr:
    if d <= 0:
        raise ValueError("divisor must be positive")
    if d == 1:
        return x
    if x.is_const:
        return IndexExpr.lit(x.const // d)
    q, r = _split_divisible(x, d)
    if r.is_const:
        return q + r.const // d
    # (X div a) div b == X div (a*b)
    if len(r.terms) == 1 and r.const == 0:
        (a, c), = r.terms
        if c == 1 and not isinstance(a, int) and a[0] == "div":
            return q + _div(a[1], a[2] * d, env)
    if env is not None:
        lo, hi = r.interval(env)
        if lo // d == hi // d:
            return q + lo // d
    return q + IndexExpr.make({("div", r, d): 1})


def _mod(x: IndexExpr, d: int, env: Env | None = None) -> IndexExpr:
    if d <= 0:
        raise ValueError("divisor must be positive")
    if d == 1:
        return IndexExpr()
    if x.is_const:
        return IndexExpr.lit(x.const % d)
    _, r = _split_divisible(x, d)
    if r.is_const:
        return IndexExpr.lit(r.const)
    # (X mod a) mod b == X mod b when b divides a
    if len(r.terms) == 1 and r.const == 0:
        (a, c), = r.terms
        if c == 1 and not isinstance(a, int) and a[0] == "mod" and a[2] % d == 0:
            return _mod(a[1], d, env)
    if env is not None:
        lo, hi = r.interval(env)
        if lo // d == hi // d:
            return r - (lo // d) * d
    return IndexExpr.make({("mod", r, d): 1})


def _recombine(x: IndexExpr) -> IndexExpr:
    """Fold c*d*(X div d) + c*(X mod d) back into c*X."""
    changed = True
    while changed:
        changed = False
        cm = x.coeff_map()
        for a, c in list(cm.items()):
            if isinstance(a, int) or a[0] != "mod":
                continue
            _, expr, d = a
            div_atom = ("div", expr, d)
            if cm.get(div_atom) == c * d:
                del cm[a]
                del cm[div_atom]
                x = IndexExpr.make(cm, x.const) + expr.scale(c)
                changed = True
                break
    return x


def format_index(x: IndexExpr, names: Mapping[int, str]) -> str:
    parts = []
    for a, c in x.terms:
        if isinstance(a, int):
            body = names.get(a, f"i{a}")
        else:
            kind, expr, d = a
            op = "div" if kind == "div" else "mod"
            body = f"({format_index(expr, names)} {op} {d})"
        if c == 1:
            parts.append(("+", body))
        elif c == -1:
            parts.append(("-", body))
        elif c < 0:
            parts.append(("-", f"{-c}*{body}"))
        else:
            parts.append(("+", f"{c}*{body}"))
    if x.const or not parts:
        parts.append(("-" if x.const < 0 else "+", str(abs(x.const))))
    text = ""
    for i, (sign, body) in enumerate(parts):
        if i == 0:
            text = body if sign == "+" else "-" + body
        else:
            text += sign + body
    return text


def affine_in(x: IndexExpr, ids: Iterable[int]) -> bool:
    ids = set(ids)
    return x.is_affine() and x.iterators() <= ids
