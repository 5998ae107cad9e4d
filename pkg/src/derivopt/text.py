"""Canonical text form of expressions and its parser.

Grammar (whitespace-insensitive)::

    scope   := "L{" iters "}" ["S{" iters "}"] ["G{" guard ("," guard)* "}"]
               ["P{" pad ("," pad)* "}"] compute
    iters   := [NAME ":" INT ".." INT ("," NAME ":" INT ".." INT)*]
    guard   := INT "<=" index "<" INT
    pad     := INT ":" INT                       one per traversal dim
    compute := sum ; sum := prod (("+"|"-") prod)* ; prod := unary ("*" unary)*
    unary   := "-" unary | INT | "max(" compute "," compute ")"
             | "min(" compute "," compute ")" | "(" compute ")" | access
    access  := (NAME | "{" scope "}") "[" index ("," index)* "]"
    index   := ["-"] term (("+"|"-") term)* ; term := [INT "*"] atom | INT
    atom    := NAME | "(" index ("div"|"mod") INT ")"

Example: ``L{c:0..C, r:0..R} S{k0:0..K} (A[c,k0] * B[k0,r])`` with numbers in
place of C, R, K.
"""

from __future__ import annotations

import re
from typing import Dict, List, Mapping, Optional

from .errors import ParseError
from .expr import (Access, Const, Guard, Iterator, Op, Scope, TensorDecl, build_expression, it)
from .index import IndexExpr, format_index


def _names(s: Scope) -> Dict[int, str]:
    taken = set()
    out: Dict[int, str] = {}
    for i in s.iterators:
        name, k = i.name, 0
        while name in taken:
            k += 1
            name = f"{i.name}_{k}"
        taken.add(name)
        out[i.id] = name
    return out


def _fmt_iters(its, names) -> str:
    return ", ".join(f"{names[i.id]}:{i.lo}..{i.hi}" for i in its)


def format_compute(c, names) -> str:
    if isinstance(c, Const):
        return str(c.value)
    if isinstance(c, Access):
        idx = ", ".join(format_index(i, names) for i in c.indices)
        if isinstance(c.tensor, Scope):
            return "{" + format_expr(c.tensor) + "}[" + idx + "]"
        return f"{c.tensor.name}[{idx}]"
    k = c.kind
    if k == "add":
        return "(" + " + ".join(format_compute(a, names) for a in c.args) + ")"
    if k == "mul":
        return "(" + " * ".join(format_compute(a, names) for a in c.args) + ")"
    if k == "sub":
        return f"({format_compute(c.args[0], names)} - {format_compute(c.args[1], names)})"
    if k == "neg":
        return f"-{format_compute(c.args[0], names)}"
    return f"{k}({format_compute(c.args[0], names)}, {format_compute(c.args[1], names)})"


def format_expr(e) -> str:
    """Canonical one-line text of a scope or tensor."""
    if isinstance(e, TensorDecl):
        return e.name
    names = _names(e)
    parts = ["L{" + _fmt_iters(e.traversal, names) + "}"]
    if e.summation:
        parts.append("S{" + _fmt_iters(e.summation, names) + "}")
    if e.guards:
        parts.append("G{" + ", ".join(f"{g.lo}<={format_index(g.expr, names)}<{g.hi}" for g in e.guards) + "}")
    if any(p != (0, 0) for p in e.out_pad):
        parts.append("P{" + ", ".join(f"{a}:{b}" for a, b in e.out_pad) + "}")
    parts.append(format_compute(e.body, names))
    return " ".join(parts)


# parser -----------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z0-9_']*)|(\.\.|<=|[{}\[\]():,+\-*<]))")


def _tokenize(text: str) -> List[str]:
    pos = 0
    out = []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        out.append(m.group(m.lastindex))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str, tensors: Mapping[str, TensorDecl]):
        self.toks = _tokenize(text)
        self.pos = 0
        self.tensors = tensors

    def peek(self, k=0) -> Optional[str]:
        p = self.pos + k
        return self.toks[p] if p < len(self.toks) else None

    def take(self, expect: Optional[str] = None) -> str:
        tok = self.peek()
        if tok is None or (expect is not None and tok != expect):
            raise ParseError(f"expected {expect!r}, got {tok!r} at token {self.pos}")
        self.pos += 1
        return tok

    def integer(self) -> int:
        sign = 1
        if self.peek() == "-":
            self.take()
            sign = -1
        tok = self.take()
        if not tok.isdigit():
            raise ParseError(f"expected integer, got {tok!r}")
        return sign * int(tok)

    def iters(self, kind, scope_names) -> List[Iterator]:
        out = []
        self.take("{")
        while self.peek() != "}":
            name = self.take()
            self.take(":")
            lo = self.integer()
            self.take("..")
            hi = self.integer()
            itr = it(name, lo, hi, kind)
            if name in scope_names:
                raise ParseError(f"iterator {name} declared twice")
            scope_names[name] = itr.id
            out.append(itr)
            if self.peek() == ",":
                self.take()
        self.take("}")
        return out

    def scope(self) -> Scope:
        names: Dict[str, int] = {}
        self.take("L")
        trav = self.iters("L", names)
        summ, guards, pad = [], [], None
        if self.peek() == "S" and self.peek(1) == "{":
            self.take()
            summ = self.iters("S", names)
        if self.peek() == "G" and self.peek(1) == "{":
            self.take()
            self.take("{")
            while self.peek() != "}":
                lo = self.integer()
                self.take("<=")
                ix = self.index(names)
                self.take("<")
                hi = self.integer()
                guards.append(Guard(ix, lo, hi))
                if self.peek() == ",":
                    self.take()
            self.take("}")
        if self.peek() == "P" and self.peek(1) == "{":
            self.take()
            self.take("{")
            pad = []
            while self.peek() != "}":
                a = self.integer()
                self.take(":")
                b = self.integer()
                pad.append((a, b))
                if self.peek() == ",":
                    self.take()
            self.take("}")
        body = self.compute(names)
        return build_expression(trav, summ, body, guards, pad)

    def compute(self, names):
        left = self.product(names)
        terms = [left]
        while self.peek() in ("+", "-"):
            op = self.take()
            right = self.product(names)
            if op == "+":
                terms.append(right)
            else:
                terms = [Op("sub", (_combine("add", terms), right))]
        return _combine("add", terms)

    def product(self, names):
        factors = [self.unary(names)]
        while self.peek() == "*":
            self.take()
            factors.append(self.unary(names))
        return _combine("mul", factors)

    def unary(self, names):
        tok = self.peek()
        if tok == "-":
            self.take()
            if self.peek() is not None and self.peek().isdigit():
                return Const(-int(self.take()))
            return Op("neg", (self.unary(names),))
        if tok is not None and tok.isdigit():
            return Const(int(self.take()))
        if tok in ("max", "min") and self.peek(1) == "(":
            self.take()
            self.take("(")
            a = self.compute(names)
            self.take(",")
            b = self.compute(names)
            self.take(")")
            return Op(tok, (a, b))
        if tok == "(":
            self.take()
            inner = self.compute(names)
            self.take(")")
            return inner
        if tok == "{":
            self.take()
            sub = self.scope()
            self.take("}")
            return Access(sub, self.index_list(names))
        name = self.take()
        if name not in self.tensors:
            raise ParseError(f"unknown tensor {name!r}")
        return Access(self.tensors[name], self.index_list(names))

    def index_list(self, names):
        self.take("[")
        out = []
        while self.peek() != "]":
            out.append(self.index(names))
            if self.peek() == ",":
                self.take()
        self.take("]")
        return tuple(out)

    def index(self, names) -> IndexExpr:
        sign = 1
        if self.peek() == "-":
            self.take()
            sign = -1
        acc = self.index_term(names).scale(sign)
        while self.peek() in ("+", "-"):
            s = 1 if self.take() == "+" else -1
            acc = acc + self.index_term(names).scale(s)
        return acc

    def index_term(self, names) -> IndexExpr:
        tok = self.peek()
        if tok is not None and tok.isdigit():
            value = int(self.take())
            if self.peek() == "*":
                self.take()
                return self.index_atom(names).scale(value)
            return IndexExpr.lit(value)
        return self.index_atom(names)

    def index_atom(self, names) -> IndexExpr:
        if self.peek() == "(":
            self.take()
            inner = self.index(names)
            op = self.take()
            d = self.integer()
            self.take(")")
            if op == "div":
                return inner.floordiv(d)
            if op == "mod":
                return inner.mod(d)
            raise ParseError(f"expected div or mod, got {op!r}")
        name = self.take()
        if name not in names:
            raise ParseError(f"undeclared iterator {name!r}")
        return IndexExpr.var(names[name])


def _combine(kind, items):
    return items[0] if len(items) == 1 else Op(kind, tuple(items))


def parse_expr(text: str, tensors: Mapping[str, TensorDecl]) -> Scope:
    """Parse canonical text; ``tensors`` maps names to declarations."""
    p = _Parser(text, tensors)
    s = p.scope()
    if p.peek() is not None:
        raise ParseError(f"trailing tokens from {p.peek()!r}")
    return s
