"""Autodiff core: forward values, gradients vs finite differences, determinism."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupmamba.rng import Rng
from groupmamba.tensor import (
    Tensor,
    ShapeError,
    concat,
    conv2d,
    dwconv1d,
    elementwise,
    gelu,
    grad_check,
    gradients,
    layer_norm,
    log_softmax,
    matmul,
    narrow,
    no_grad,
    parameter,
    permute_tokens,
    relu,
    sigmoid,
    silu,
    softplus,
    take_labels,
    texp,
    tmean,
    tsum,
)
from groupmamba.verify import naive_matmul


def t64(arr):
    return parameter(np.asarray(arr, dtype=np.float64), dtype=np.float64)


# -- forward values -------------------------------------------------------------


def test_matmul_scalar_product():
    out = matmul(t64([[2.0]]), t64([[3.0]]))
    assert out.data[0, 0] == 6.0


def test_matmul_identity():
    m = np.arange(9, dtype=np.float64).reshape(3, 3)
    out = matmul(t64(np.eye(3)), t64(m))
    assert np.array_equal(out.data, m)


def test_matmul_against_triple_loop():
    rng = Rng(11)
    a = rng.normal((4, 5))
    b = rng.normal((5, 3))
    got = matmul(t64(a), t64(b)).data
    want = naive_matmul(a, b)
    assert np.abs(got - want).max() < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


def test_gelu_at_zero():
    assert gelu(t64([0.0])).data[0] == 0.0


def test_sigmoid_at_zero():
    assert sigmoid(t64([0.0])).data[0] == 0.5


def test_softplus_against_extended_precision():
    import mpmath

    xs = np.linspace(-20.0, 20.0, 81)
    got = softplus(t64(xs)).data
    want = np.array([float(mpmath.log(1 + mpmath.e**x)) for x in xs])
    rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-300)
    assert rel.max() < 1e-6


def test_elementwise_dispatch():
    x = t64([1.0, -1.0])
    assert np.allclose(elementwise("relu", x).data, [1.0, 0.0])
    with pytest.raises(ValueError):
        elementwise("nope", x)


def test_dtype_mismatch_rejected():
    a = parameter(np.ones(3), dtype=np.float32)
    b = parameter(np.ones(3), dtype=np.float64)
    with pytest.raises(ShapeError):
        a + b


# -- gradients vs central differences ---------------------------------------------

UNARY_OPS = {
    "exp": texp,
    "softplus": softplus,
    "silu": silu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "relu": relu,
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_grad_matches_fd(name):
    rng = Rng(hash(name) & 0xFFFF)
    x = t64(rng.uniform((40,), -3.0, 3.0))
    if name == "relu":
        # keep away from the kink where the derivative jumps
        x.data[np.abs(x.data) < 1e-2] = 0.5
    w = rng.split("w").normal((40,))

    def f():
        return (UNARY_OPS[name](x) * Tensor(w)).sum()

    report = grad_check(f, [("x", x)], eps=1e-5, samples_per_param=12, seed=3)
    assert report.ok(1e-4), report.rel_errors


@pytest.mark.parametrize(
    "build",
    [
        lambda x, y: x + y,
        lambda x, y: x - y,
        lambda x, y: x * y,
        lambda x, y: x / (y + 5.0),
        lambda x, y: matmul(x.reshape(4, 10), y.reshape(10, 4)),
    ],
    ids=["add", "sub", "mul", "div", "matmul"],
)
def test_binary_grad_matches_fd(build):
    rng = Rng(5)
    x = t64(rng.uniform((40,), -3.0, 3.0))
    y = t64(rng.split("y").uniform((40,), -3.0, 3.0))
    w = rng.split("w").normal((4, 4)) if build.__code__.co_names else None

    def f():
        out = build(x, y)
        if out.ndim == 2:
            out = out * Tensor(w)
        return out.sum()

    report = grad_check(f, [("x", x), ("y", y)], eps=1e-5, samples_per_param=10, seed=1)
    assert report.ok(1e-4), report.rel_errors


def test_reduction_and_shape_op_grads():
    rng = Rng(9)
    x = t64(rng.normal((3, 4, 5)))
    w = rng.split("w").normal((5, 3, 4))

    def f():
        y = tmean(x, axis=1)          # (3, 5)
        z = tsum(x, axis=(0, 1))      # (5,)
        p = permute_tokens(x, np.array([2, 0, 3, 1]))
        return (y.sum() + z.sum()) * 0.5 + (p * Tensor(np.transpose(w, (1, 2, 0)))).sum()

    report = grad_check(f, [("x", x)], eps=1e-5, samples_per_param=20, seed=2)
    assert report.ok(1e-4), report.rel_errors


def test_concat_narrow_take_grads():
    rng = Rng(13)
    x = t64(rng.normal((4, 6)))
    y = t64(rng.normal((4, 3)))
    labels = np.array([1, 0, 2, 8])

    def f():
        joined = concat([x, y], axis=1)          # (4, 9)
        part = narrow(joined, 1, 2, 5)
        return take_labels(joined, labels).sum() + part.mean()

    report = grad_check(f, [("x", x), ("y", y)], eps=1e-5, samples_per_param=12, seed=4)
    assert report.ok(1e-4), report.rel_errors


def test_layer_norm_grad():
    rng = Rng(21)
    x = t64(rng.normal((2, 5, 8)))
    g = t64(rng.split("g").uniform((8,), 0.5, 1.5))
    b = t64(rng.split("b").normal((8,), std=0.2))
    w = rng.split("w").normal((2, 5, 8))

    def f():
        return (layer_norm(x, g, b) * Tensor(w)).sum()

    report = grad_check(f, [("x", x), ("g", g), ("b", b)], eps=1e-5, samples_per_param=10, seed=5)
    assert report.ok(1e-4), report.rel_errors


def test_log_softmax_grad_and_rows_sum_to_one():
    rng = Rng(23)
    x = t64(rng.normal((3, 7), std=2.0))
    w = rng.split("w").normal((3, 7))
    probs = np.exp(log_softmax(x).data)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12

    def f():
        return (log_softmax(x) * Tensor(w)).sum()

    report = grad_check(f, [("x", x)], eps=1e-5, samples_per_param=10, seed=6)
    assert report.ok(1e-4), report.rel_errors


def test_conv_ops_grad():
    rng = Rng(31)
    x = t64(rng.normal((2, 6, 6, 3)))
    w = t64(rng.split("w").normal((3, 3, 3, 4), std=0.5))
    b = t64(np.zeros(4))
    cw = t64(rng.split("cw").normal((5, 3), std=0.5))
    cb = t64(np.zeros(5))
    xs = t64(rng.split("xs").normal((2, 7, 5)))
    mix = rng.split("m").normal((2, 3, 3, 4))
    mix2 = rng.split("m2").normal((2, 7, 5))

    def f():
        y = conv2d(x, w, b, stride=2, padding=1)
        z = dwconv1d(xs, cw, cb)
        return (y * Tensor(mix)).sum() + (z * Tensor(mix2)).sum()

    report = grad_check(
        f, [("x", x), ("w", w), ("b", b), ("cw", cw), ("cb", cb), ("xs", xs)],
        eps=1e-5, samples_per_param=8, seed=7,
    )
    assert report.ok(1e-4), report.rel_errors


def test_grad_check_trivials():
    w = t64([3.0])

    def f():
        return (w * w).sum()

    report = grad_check(f, [("w", w)], eps=1e-5)
    analytic = gradients((w * w).sum(), [w])[0]
    assert abs(analytic[0] - 6.0) < 1e-12
    assert report.max_rel_error < 1e-9

    c = t64([1.0, 2.0])

    def g():
        return Tensor(np.asarray(5.0, dtype=np.float64)) + (c * 0.0).sum()

    rep = grad_check(g, [("c", c)], eps=1e-5)
    assert rep.max_rel_error == 0.0


def test_grad_check_flags_nonfinite():
    x = t64([1.0])

    def f():
        return tlog_of_negative(x)

    def tlog_of_negative(v):
        from groupmamba.tensor import tlog

        return tlog(v - 2.0).sum()

    with np.errstate(invalid="ignore"):
        report = grad_check(f, [("x", x)], eps=1e-5)
    assert not report.valid


# -- structural properties ---------------------------------------------------------


def test_backward_linearity():
    rng = Rng(41)
    x = t64(rng.normal((10,)))
    wf = Tensor(rng.split("f").normal((10,)))
    wg = Tensor(rng.split("g").normal((10,)))

    def fval():
        return (silu(x) * wf).sum()

    def gval():
        return (texp(x * 0.3) * wg).sum()

    a, b = 1.7, -0.4
    gf = gradients(fval(), [x])[0]
    gg = gradients(gval(), [x])[0]
    combined = gradients((a * fval()) + (b * gval()), [x])[0]
    assert np.abs(combined - (a * gf + b * gg)).max() < 1e-12


def test_forward_backward_deterministic():
    def once():
        rng = Rng(77)
        x = parameter(rng.normal((4, 9)), dtype=np.float64)
        w = parameter(rng.split("w").normal((9, 6)), dtype=np.float64)
        loss = (gelu(matmul(x, w))).sum()
        gx, gw = gradients(loss, [x, w])
        return loss.data.copy(), gx.copy(), gw.copy()

    first, second = once(), once()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_repeated_parent_accumulates():
    x = t64([2.0])
    loss = (x * x).sum()
    (gx,) = gradients(loss, [x])
    assert gx[0] == 4.0


def test_no_grad_blocks_graph():
    x = t64([1.0, 2.0])
    with no_grad():
        y = (x * 3.0).sum()
    assert y._parents == ()


def test_unbroadcast_bias_and_scalar():
    rng = Rng(51)
    x = t64(rng.normal((3, 4, 6)))
    bias = t64(rng.split("b").normal((6,)))
    w = rng.split("w").normal((3, 4, 6))

    def f():
        return ((x + bias) * Tensor(w)).sum()

    report = grad_check(f, [("x", x), ("bias", bias)], eps=1e-5, samples_per_param=10, seed=8)
    assert report.ok(1e-4), report.rel_errors


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_sum_mean_consistency(rows, cols, seed):
    x = Rng(seed).normal((rows, cols))
    t = Tensor(x)
    assert np.allclose(tmean(t).data, tsum(t).data / (rows * cols))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_rng_streams_are_reproducible_and_split_independent(seed):
    a = Rng(seed).normal((8,))
    b = Rng(seed).normal((8,))
    assert np.array_equal(a, b)
    child = Rng(seed).split("x").normal((8,))
    assert not np.array_equal(a, child)


def test_finite_check_flag_catches_nonfinite_forward():
    from groupmamba.tensor import set_check_finite

    x = t64([1.0, 2.0])
    set_check_finite(True)
    try:
        (x * 2.0).sum()  # finite path unaffected
        with np.errstate(over="ignore"):
            with pytest.raises(FloatingPointError):
                texp(x * 1e6)
    finally:
        set_check_finite(False)
