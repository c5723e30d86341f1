from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kdprune import ops
from kdprune.errors import ConfigError, DimensionError
from kdprune.gradcheck import grad_check
from kdprune.tensor import Tensor, float64_mode


def conv_loop(x, w, b, stride, pad, groups):
    """Direct nested-loop convolution used as an independent oracle."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    og = o // groups
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, g * cg : (g + 1) * cg, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, oc, i, j] = (patch * w[oc]).sum() + (b[oc] if b is not None else 0.0)
    return out


conv_cases = st.tuples(
    st.sampled_from([1, 2]),  # batch
    st.sampled_from([(2, 4, 1), (4, 4, 2), (4, 4, 4), (3, 6, 3)]),  # in, out, groups
    st.sampled_from([1, 3]),  # kernel
    st.sampled_from([1, 2]),  # stride
    st.sampled_from([0, 1]),  # padding
    st.integers(4, 7),  # spatial
    st.booleans(),  # bias
    st.integers(0, 2**16),
)


@given(conv_cases)
def test_conv2d_matches_loop_oracle(case):
    n, (cin, cout, groups), k, stride, pad, size, use_bias, seed = case
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, cin, size, size))
    w = r.standard_normal((cout, cin // groups, k, k))
    b = r.standard_normal(cout) if use_bias else None
    with float64_mode():
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b) if b is not None else None, stride, pad, groups).data
    np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad, groups), atol=1e-10)


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ConfigError):
        ops.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), groups=3)
    with pytest.raises(DimensionError):
        ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d(x, Tensor(np.zeros((4, 4, 7, 7))))


def test_unfold_matmul_equals_conv(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((5, 3, 3, 3))
    with float64_mode():
        cols = ops.unfold(Tensor(x), 3, stride=2, padding=1).data  # [B, C*K*K, L]
        conv = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    via_cols = np.einsum("ok,bkl->bol", w.reshape(5, -1), cols).reshape(conv.shape)
    np.testing.assert_allclose(via_cols, conv, atol=1e-12)


def test_unfold_channel_major_order():
    x = np.arange(2 * 3 * 3, dtype=np.float64).reshape(1, 2, 3, 3)
    cols = ops.unfold(Tensor(x), 3, padding=0).data
    np.testing.assert_array_equal(cols[0, :, 0], x.reshape(-1))


def _gc(f, inputs):
    rep = grad_check(f, inputs, h=1e-5, tolerance=1e-4)
    assert rep.passed, rep
    return rep


@pytest.mark.parametrize("cin,cout,groups,stride,pad,k", [
    (3, 4, 1, 1, 1, 3),
    (4, 4, 2, 2, 1, 3),
    (4, 4, 4, 1, 1, 3),   # depthwise
    (4, 8, 4, 2, 0, 3),   # depthwise multiplier 2
    (3, 5, 1, 2, 0, 1),
])
def test_conv2d_gradcheck(cin, cout, groups, stride, pad, k):
    r = np.random.default_rng(cin * 100 + cout * 10 + groups)
    with float64_mode():
        x = Tensor(r.standard_normal((2, cin, 5, 5)), requires_grad=True)
        w = Tensor(r.standard_normal((cout, cin // groups, k, k)), requires_grad=True)
        b = Tensor(r.standard_normal(cout), requires_grad=True)
        proj = r.standard_normal(ops.conv2d(x, w, b, stride, pad, groups).shape)
        _gc(lambda: (ops.conv2d(x, w, b, stride, pad, groups) * Tensor(proj)).sum(), [x, w, b])


def test_batchnorm_train_gradcheck():
    r = np.random.default_rng(3)
    with float64_mode():
        x = Tensor(r.standard_normal((3, 4, 3, 3)) * 2 + 1, requires_grad=True)
        gamma = Tensor(r.standard_normal(4), requires_grad=True)
        beta = Tensor(r.standard_normal(4), requires_grad=True)
        proj = Tensor(r.standard_normal((3, 4, 3, 3)))
        rm, rv = np.zeros(4), np.ones(4)
        _gc(lambda: (ops.batchnorm2d(x, gamma, beta, rm, rv, training=True) * proj).sum(), [x, gamma, beta])


def test_batchnorm_eval_identity_stats(rng):
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)),
                          np.zeros(3, np.float32), np.ones(3, np.float32), training=False).data
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-6)


def test_batchnorm_single_sample_constant_input_is_finite():
    x = Tensor(np.full((1, 2, 1, 1), 3.0, np.float32))
    out = ops.batchnorm2d(x, Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)),
                          np.zeros(2, np.float32), np.ones(2, np.float32), training=True).data
    assert np.isfinite(out).all()


def test_linear_gradcheck():
    r = np.random.default_rng(5)
    with float64_mode():
        x = Tensor(r.standard_normal((4, 6)), requires_grad=True)
        w = Tensor(r.standard_normal((3, 6)), requires_grad=True)
        b = Tensor(r.standard_normal(3), requires_grad=True)
        proj = Tensor(r.standard_normal((4, 3)))
        _gc(lambda: (ops.linear(x, w, b) * proj).sum(), [x, w, b])


@pytest.mark.parametrize("name", ["relu6", "sigmoid", "silu", "softmax", "log_softmax", "maxpool", "avgpool", "gap",
                                  "channel_scale", "concat"])
def test_misc_op_gradcheck(name):
    r = np.random.default_rng(11)
    with float64_mode():
        x = Tensor(r.standard_normal((2, 3, 4, 4)) * 3, requires_grad=True)
        s = Tensor(r.standard_normal((2, 3)), requires_grad=True)
        fns = {
            "relu6": lambda: ops.relu6(x),
            "sigmoid": lambda: ops.sigmoid(x),
            "silu": lambda: ops.silu(x),
            "softmax": lambda: ops.softmax(ops.reshape(x, (2, 48)), axis=1),
            "log_softmax": lambda: ops.log_softmax(ops.reshape(x, (2, 48)), axis=1),
            "maxpool": lambda: ops.maxpool2d(x, 3, 2, 1),
            "avgpool": lambda: ops.avgpool2d(x, 2, 2),
            "gap": lambda: ops.global_avg_pool(x),
            "channel_scale": lambda: ops.channel_scale(x, s),
            "concat": lambda: ops.concat([x, x * 2.0], axis=1),
        }
        proj = Tensor(r.standard_normal(fns[name]().shape))
        _gc(lambda: (fns[name]() * proj).sum(), [x, s] if name == "channel_scale" else [x])


def test_composed_graph_gradcheck():
    r = np.random.default_rng(8)
    with float64_mode():
        x = Tensor(r.standard_normal((3, 2, 5, 5)), requires_grad=True)
        w = Tensor(r.standard_normal((4, 2, 3, 3)) * 0.5, requires_grad=True)
        gamma = Tensor(np.ones(4) + 0.1 * r.standard_normal(4), requires_grad=True)
        beta = Tensor(0.1 * r.standard_normal(4), requires_grad=True)
        fw = Tensor(r.standard_normal((3, 4 * 25)) * 0.2, requires_grad=True)
        labels = np.array([0, 2, 1])
        rm, rv = np.zeros(4), np.ones(4)

        def f():
            h = ops.conv2d(x, w, padding=1)
            h = ops.relu(ops.batchnorm2d(h, gamma, beta, rm, rv, training=True))
            return ops.cross_entropy(ops.linear(ops.flatten(h), fw), labels)

        _gc(f, [x, w, gamma, beta, fw])


def test_gradcheck_sum_of_squares_is_tight():
    with float64_mode():
        x = Tensor(np.random.default_rng(0).standard_normal(10), requires_grad=True)
        rep = grad_check(lambda: (x * x).sum(), x)
    assert rep.passed and rep.max_rel_err < 1e-8


def test_gradcheck_detects_corrupted_backward():
    with float64_mode():
        x = Tensor(np.random.default_rng(0).standard_normal(6), requires_grad=True)

        def bad_square(t):
            return Tensor._make(t.data**2, (t,), lambda g: (g * 3.0 * t.data,), "bad_square")

        rep = grad_check(lambda: bad_square(x).sum(), x)
    assert not rep.passed


def test_maxpool_pads_with_negative_infinity():
    x = Tensor(-np.ones((1, 1, 2, 2), np.float32))
    out = ops.maxpool2d(x, 3, 1, 1).data
    np.testing.assert_array_equal(out, -1.0)


def test_global_avg_pool_value(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    with float64_mode():
        np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3)))
