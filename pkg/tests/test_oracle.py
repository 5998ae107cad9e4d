import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derivopt.errors import MissingInput, OutOfBoundsRead
from derivopt.expr import TensorDecl
from derivopt.oracle import count_points, eval_expression, random_bindings, scope_flops
from derivopt.registry import template_of
from derivopt.text import parse_expr


def _conv_reference(x, w, pad, stride=1, dil=1):
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    r, s, f, _ = w.shape
    oh = (xp.shape[0] - dil * (r - 1) - 1) // stride + 1
    ow = (xp.shape[1] - dil * (s - 1) - 1) // stride + 1
    out = np.zeros((oh, ow, f), dtype=np.int64)
    for h in range(oh):
        for q in range(ow):
            for i in range(r):
                for j in range(s):
                    out[h, q] += xp[h * stride + i * dil, q * stride + j * dil] @ w[i, j].T
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1), st.integers(1, 2),
       st.integers(1, 2), st.integers(0, 2**31))
def test_conv_matches_a_direct_loop(h, c, f, pad, stride, dil, seed):
    r = 3
    if h + 2 * pad - dil * (r - 1) < 1:
        return
    x, w = TensorDecl("X", (h, h, c)), TensorDecl("W", (r, r, f, c))
    e = template_of("Conv").instantiate({"pad": [pad] * 2, "stride": [stride] * 2, "dilation": [dil] * 2}, [x, w])
    vals = random_bindings([x, w], np.random.default_rng(seed))
    assert np.array_equal(eval_expression(e, vals), _conv_reference(vals["X"], vals["W"], pad, stride, dil))


def test_matmul_and_g2bmm():
    a, b = TensorDecl("A", (2, 3, 4)), TensorDecl("B", (2, 4, 5))
    vals = random_bindings([a, b], np.random.default_rng(1))
    e = template_of("BatchMatmul").instantiate({}, [a, b])
    assert np.array_equal(eval_expression(e, vals), vals["A"] @ vals["B"])
    q, k = TensorDecl("Q", (1, 5, 2)), TensorDecl("K", (1, 5, 2))
    g = template_of("G2BMM").instantiate({"width": 1, "dilation": 1}, [q, k])
    vals = random_bindings([q, k], np.random.default_rng(2))
    out = eval_expression(g, vals)
    kp = np.pad(vals["K"], ((0, 0), (1, 1), (0, 0)))
    for m in range(5):
        for w in range(3):
            assert out[0, m, w] == vals["Q"][0, m] @ kp[0, m + w]


def test_pad_band_reads_zero_and_outside_raises():
    a = TensorDecl("A", (3,), ((1, 1),))
    e = parse_expr("L{i:0..5} (A[i-1])", {"A": a})
    out = eval_expression(e, {"A": np.array([1, 2, 3])})
    assert out.tolist() == [0, 1, 2, 3, 0]
    bad = parse_expr("L{i:0..5} (A[i])", {"A": a})
    with pytest.raises(OutOfBoundsRead):
        eval_expression(bad, {"A": np.array([1, 2, 3])})


def test_missing_binding():
    a = TensorDecl("A", (3,))
    with pytest.raises(MissingInput):
        eval_expression(parse_expr("L{i:0..3} (A[i])", {"A": a}), {})


def test_guards_skip_points_and_count():
    a = TensorDecl("A", (4,))
    e = parse_expr("L{i:0..4} S{j:0..4} G{0<=i-j<2} (A[j])", {"A": a})
    assert count_points(e) == 7
    out = eval_expression(e, {"A": np.array([1, 10, 100, 1000])})
    assert out.tolist() == [1, 11, 110, 1100]
    # one multiply-free body (0 ops) plus accumulation
    assert scope_flops(e) == 7
