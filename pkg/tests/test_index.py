import itertools

import numpy as np
from hypothesis import given, settings, strategies as st

from derivopt.index import IndexExpr, affine_in, format_index

ENV = {1: (0, 4), 2: (-1, 3), 3: (0, 6)}


@st.composite
def index_exprs(draw, depth=2):
    coeffs = {i: draw(st.integers(-3, 3)) for i in draw(st.sets(st.sampled_from(sorted(ENV)), max_size=3))}
    x = IndexExpr.make(coeffs, draw(st.integers(-4, 4)))
    if depth and draw(st.booleans()):
        inner = draw(index_exprs(depth=depth - 1))
        d = draw(st.integers(1, 5))
        piece = inner.floordiv(d) if draw(st.booleans()) else inner.mod(d)
        x = x + piece.scale(draw(st.integers(-2, 2)))
    return x


def _points():
    ids = sorted(ENV)
    for vals in itertools.product(*(range(*ENV[i]) for i in ids)):
        yield dict(zip(ids, vals))


@settings(max_examples=200, deadline=None)
@given(index_exprs())
def test_simplify_preserves_value_on_the_box(x):
    y = x.simplify(ENV)
    for p in _points():
        assert x.evaluate(p) == y.evaluate(p)


@settings(max_examples=200, deadline=None)
@given(index_exprs())
def test_interval_bounds_every_point(x):
    lo, hi = x.interval(ENV)
    for p in _points():
        assert lo <= x.evaluate(p) <= hi


@settings(max_examples=100, deadline=None)
@given(index_exprs(), index_exprs())
def test_addition_is_pointwise(a, b):
    for p in _points():
        assert (a + b).evaluate(p) == a.evaluate(p) + b.evaluate(p)


def test_div_mod_recombine_to_the_iterator():
    x = IndexExpr.var(3)
    y = x.floordiv(2).scale(2) + x.mod(2)
    assert y.simplify(ENV) == x


def test_divisible_terms_leave_the_quotient():
    x = (IndexExpr.var(1, 4) + IndexExpr.var(2)).floordiv(4)
    # i2 in [-1, 3) does not divide cleanly; i1 does
    s = x.simplify({1: (0, 4), 2: (0, 3)})
    assert s == IndexExpr.var(1)


def test_affine_in_and_formatting():
    x = IndexExpr.var(1, 2) - 1
    assert affine_in(x, [1])
    assert not affine_in(x.mod(3), [1])
    assert format_index(x, {1: "h"}) == "2*h-1"
    assert format_index(IndexExpr.lit(0), {}) == "0"


def test_evaluate_broadcasts_arrays():
    x = IndexExpr.var(1).mod(3)
    assert np.array_equal(x.evaluate({1: np.arange(5)}), [0, 1, 2, 0, 1])
