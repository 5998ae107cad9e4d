"""Predefined operator templates loaded from the bundled ``templates.json``.

Each template turns concrete tensor declarations and attributes into its
defining expression.  Templates of style ``gemm`` and ``elementwise`` also
accept *views*: per-input index lists written over the formal iterator names,
so a matched library call can read a tensor through a strided layout.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Mapping, Optional, Sequence

from .errors import BadAttr, ShapeMismatch, UnknownOp
from .expr import Access, Scope, TensorDecl, build_expression, it, map_compute, rebuild
from .index import IndexExpr
from .text import _Parser, parse_expr

_PARAM = re.compile(r"\$([A-Z][A-Z0-9]*)")


def _eval(formula: str, env: Mapping[str, object]) -> int:
    return int(eval(formula, {"__builtins__": {}}, dict(env)))  # bundled formulas only


def parse_index(text: str, names: Mapping[str, int]) -> IndexExpr:
    p = _Parser(text, {})
    out = p.index(names)
    if p.peek() is not None:
        raise BadAttr(f"trailing text in index {text!r}")
    return out


class OpTemplate:
    def __init__(self, kind: str, spec: dict):
        self.kind = kind
        self.spec = spec
        self.style = spec["style"]
        self.nonlinear = bool(spec.get("nonlinear", False))
        self.inputs = list(spec["inputs"])

    def __repr__(self):
        return f"OpTemplate({self.kind})"

    # attribute handling ------------------------------------------------
    def full_attrs(self, attrs: Mapping) -> dict:
        out = dict(self.spec.get("attrs", {}))
        out.update(attrs or {})
        for key in ("stride", "dilation"):
            v = out.get(key)
            vals = v if isinstance(v, list) else [v] if v is not None else []
            if any((not isinstance(x, int)) or x < 1 for x in vals):
                raise BadAttr(f"{self.kind}: {key} must be integers >= 1, got {v}")
        pad = out.get("pad")
        if pad is not None and any((not isinstance(x, int)) or x < 0 for x in pad):
            raise BadAttr(f"{self.kind}: pad must be integers >= 0, got {pad}")
        for key in ("width",):
            if key in out and (not isinstance(out[key], int) or out[key] < 0):
                raise BadAttr(f"{self.kind}: {key} must be an integer >= 0")
        return out

    def _bind(self, variant: dict, shapes: Sequence[Sequence[int]], sizes: Optional[Mapping]) -> Dict[str, int]:
        env: Dict[str, int] = {}
        if sizes:
            env.update({k: int(v) for k, v in sizes.items()})
            return env
        for role, shape in zip(self.inputs, shapes):
            letters = variant["shapes"][role]
            for letter, size in zip(letters, shape):
                if letter in env and env[letter] != size:
                    raise ShapeMismatch(f"{self.kind}: dimension {letter} is {env[letter]} and {size}")
                env[letter] = int(size)
        return env

    def _variant(self, ranks: Sequence[int], sizes: Optional[Mapping]) -> dict:
        for v in self.spec["variants"]:
            want = [len(v["shapes"][r]) for r in self.inputs]
            if sizes:
                letters = {l for r in self.inputs for l in v["shapes"][r]}
                if letters == set(sizes):
                    return v
            elif list(ranks) == want:
                return v
        raise ShapeMismatch(f"{self.kind}: no variant for input ranks {list(ranks)}")

    # instantiation -------------------------------------------------------
    def instantiate(self, attrs: Mapping, decls: Sequence[TensorDecl],
                    out_shape: Optional[Sequence[int]] = None) -> Scope:
        """Defining expression over the given input tensors (views applied)."""
        if len(decls) != len(self.inputs):
            raise ShapeMismatch(f"{self.kind} takes {len(self.inputs)} inputs, got {len(decls)}")
        attrs = self.full_attrs(attrs)
        views = attrs.get("views")
        sizes = attrs.get("sizes")
        if self.style == "elementwise":
            scope, formal = self._elementwise(decls, sizes)
        elif self.style == "reshape":
            scope, formal = self._reshape(decls[0], out_shape if out_shape is not None else attrs.get("shape"))
        else:
            scope, formal = self._from_text(attrs, decls, sizes)
        if views:
            scope = apply_views(scope, formal, decls, views)
        return scope

    def _from_text(self, attrs, decls, sizes):
        variant = self._variant([d.rank for d in decls], sizes)
        env = self._bind(variant, [d.shape for d in decls], sizes)
        for name, formula in self.spec.get("attr_params", {}).items():
            env[name] = _eval(formula, attrs)
        for name, formula in self.spec.get("params", {}).items():
            env[name] = _eval(formula, env)
        for name, value in env.items():
            if name.startswith("O") and value <= 0:
                raise ShapeMismatch(f"{self.kind}: non-positive output size {name}={value}")
        text = _PARAM.sub(lambda m: str(env[m.group(1)]), variant["expr"])
        tensors = {}
        formal = {}
        for pos, role in enumerate(self.inputs):
            letters = variant["shapes"][role]
            shape = tuple(env[l] for l in letters)
            if sizes:
                decl = TensorDecl(f"__{role}", shape)
                formal[decl.name] = pos
            else:
                decl = decls[pos]
                pad = list(decl.pad)
                for letter, pname in self.spec.get("pads", {}).get(role, {}).items():
                    d = letters.index(letter)
                    need = env[pname]
                    pad[d] = (max(pad[d][0], need), max(pad[d][1], need))
                decl = TensorDecl(decl.name, decl.shape, tuple(pad), decl.origin)
            tensors[role] = decl
        return parse_expr(text, tensors), formal

    def _elementwise(self, decls, sizes):
        shape = tuple(sizes["shape"]) if sizes else decls[0].shape
        if not sizes:
            for d in decls[1:]:
                if d.shape != shape:
                    raise ShapeMismatch(f"{self.kind}: operand shapes {decls[0].shape} and {d.shape}")
        its = ", ".join(f"i{k}:0..{n}" for k, n in enumerate(shape))
        idx = ", ".join(f"i{k}" for k in range(len(shape)))
        tensors, formal = {}, {}
        for pos, role in enumerate(self.inputs):
            if sizes:
                decl = TensorDecl(f"__{role}", shape)
                formal[decl.name] = pos
            else:
                decl = decls[pos]
            tensors[role] = decl
        return parse_expr(f"L{{{its}}} " + self.spec["body"].replace("$I", idx), tensors), formal

    def _reshape(self, x: TensorDecl, out_shape):
        if out_shape is None:
            raise BadAttr("Reshape needs an output shape")
        out_shape = tuple(int(s) for s in out_shape)
        n_out = 1
        for s in out_shape:
            n_out *= s
        if n_out != x.size:
            raise ShapeMismatch(f"Reshape {x.shape} -> {out_shape} changes the element count")
        its = [it(f"o{k}", 0, s) for k, s in enumerate(out_shape)]
        flat = IndexExpr()
        stride = 1
        for i, s in zip(reversed(its), reversed(out_shape)):
            flat = flat + i.ix.scale(stride)
            stride *= s
        idx = []
        stride = x.size
        for s in x.shape:
            stride //= s
            idx.append(flat.floordiv(stride).mod(s))
        return build_expression(its, [], Access(x, tuple(idx))), {}


def apply_views(scope: Scope, formal: Mapping[str, int], decls, views) -> Scope:
    """Replace formal placeholder tensors by real tensors read through views."""
    names = {i.name: i.id for i in scope.iterators}

    def visit(n):
        if isinstance(n, Access) and isinstance(n.tensor, TensorDecl) and n.tensor.name in formal:
            pos = formal[n.tensor.name]
            view = views[str(pos)] if isinstance(views, dict) else views[pos]
            idx = tuple(parse_index(v, names) if isinstance(v, str) else v for v in view)
            return Access(decls[pos], idx)
        return None

    return rebuild(scope, body=map_compute(scope.body, visit))


@lru_cache(maxsize=1)
def _load() -> Dict[str, OpTemplate]:
    text = resources.files("derivopt").joinpath("data/templates.json").read_text()
    return {k: OpTemplate(k, v) for k, v in json.loads(text).items()}


def registry() -> Dict[str, OpTemplate]:
    return dict(_load())


def template_of(kind: str) -> OpTemplate:
    reg = _load()
    if kind not in reg:
        raise UnknownOp(f"no template for operator kind {kind!r}")
    return reg[kind]


OP_KINDS = ("Conv", "ConvTranspose", "Matmul", "BatchMatmul", "Add", "Relu", "Sigmoid", "Tanh",
            "G2BMM", "Reshape", "EOperator")
