import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrmatch import tensor as T
from corrmatch.errors import LabelRangeError, NumericalError, ShapeError
from corrmatch.tensor import IGNORE, Tensor

SEEDS = range(10)


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def loop_matmul(a, b):
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            s = 0.0
            for k in range(n):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def loop_conv(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = 0.0 if b is None else b[o]
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            s += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = s
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_hand_case():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]])).data
    assert np.array_equal(out, [[2.0], [4.0]])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------- softmax

def test_softmax_cases():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])
    x = [1.0, 2.0, 3.0]
    denom = math.fsum(math.exp(v) for v in x)
    np.testing.assert_allclose(T.softmax(Tensor(x), 0).data, [math.exp(v) / denom for v in x], rtol=0, atol=1e-12)
    big = T.softmax(Tensor([3.0, 1003.0]), 0).data
    assert np.all(np.isfinite(big))
    assert big[0] < 1e-300 and abs(big[1] - 1) < 1e-15


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100), st.integers(0, 1))
def test_softmax_sums_to_one_and_shift_invariant(x, c, axis):
    s = T.softmax(Tensor(x), axis).data
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axis).data, s, atol=1e-12)


# ---------------------------------------------------------------- cross entropy / KL

def test_cross_entropy_cases():
    K, H, W = 4, 3, 3
    target = np.random.default_rng(0).integers(0, K, (H, W))
    logits = np.zeros((K, H, W))
    np.put_along_axis(logits, target[None], 20.0, axis=0)
    assert T.masked_cross_entropy(Tensor(logits), target).data <= 1e-3
    assert abs(T.masked_cross_entropy(Tensor(np.zeros((K, H, W))), target).data - math.log(4)) < 1e-15


def test_cross_entropy_all_ignore_is_zero_with_zero_grad():
    x = leaf(np.random.default_rng(1).standard_normal((3, 2, 2)))
    loss = T.masked_cross_entropy(x, np.full((2, 2), IGNORE))
    assert loss.data == 0.0
    T.backward(loss)
    assert np.array_equal(x.grad, np.zeros((3, 2, 2)))


def test_cross_entropy_label_range():
    with pytest.raises(LabelRangeError):
        T.masked_cross_entropy(Tensor(np.zeros((3, 2, 2))), np.array([[0, 1], [2, 3]]))


def test_kl_cases():
    rng = np.random.default_rng(2)
    p = rng.standard_normal((3, 2, 2))
    mask = np.ones((2, 2))
    assert abs(T.kl_divergence(Tensor(p), Tensor(p), mask).data) < 1e-15
    assert T.kl_divergence(Tensor(p), Tensor(rng.standard_normal((3, 2, 2))), np.zeros((2, 2))).data == 0.0
    # Fixed 3-class pair against a scalar sum.
    pl = np.array([0.2, -1.0, 0.7])
    ql = np.array([1.5, 0.1, -0.3])
    pp = [math.exp(v) / math.fsum(math.exp(u) for u in pl) for v in pl]
    qq = [math.exp(v) / math.fsum(math.exp(u) for u in ql) for v in ql]
    ref = math.fsum(a * math.log(a / b) for a, b in zip(pp, qq))
    got = T.kl_divergence(Tensor(pl.reshape(3, 1, 1)), Tensor(ql.reshape(3, 1, 1)), np.ones((1, 1))).data
    assert abs(got - ref) < 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        T.kl_divergence(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((2, 2, 2))), np.ones((2, 2)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 2), elements=st.floats(-20, 20)),
       arrays(np.float64, (3, 2, 2), elements=st.floats(-20, 20)),
       arrays(np.bool_, (2, 2)))
def test_losses_nonnegative(p, q, mask):
    assert T.kl_divergence(Tensor(p), Tensor(q), mask).data >= -1e-15
    target = np.where(mask, p.argmin(axis=0), IGNORE)
    assert T.masked_cross_entropy(Tensor(q), target).data >= 0.0


# ---------------------------------------------------------------- conv2d

def test_conv_identity_and_box():
    x = np.random.default_rng(3).random((1, 5, 5))
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    c = 0.3
    out = T.conv2d(Tensor(np.full((1, 5, 5), c)), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 9 * c, atol=1e-15)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    x = rng.standard_normal((2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1).data
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride, 1), atol=1e-12)
    # Batched input gives the same per-sample result.
    batched = T.conv2d(Tensor(x[None]), Tensor(w), Tensor(b), stride=stride, padding=1).data[0]
    np.testing.assert_allclose(batched, got, atol=1e-12)


def test_conv_output_size_and_errors():
    out = T.conv2d(Tensor(np.zeros((1, 9, 8))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, (9 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------- resampling

def direct_bilinear(x, oh, ow):
    c, h, w = x.shape
    out = np.zeros((c, oh, ow))
    for i in range(oh):
        sy = max((i + 0.5) * h / oh - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = max((j + 0.5) * w / ow - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * x[:, y0, x0] + (1 - fy) * fx * x[:, y0, x1]
                            + fy * (1 - fx) * x[:, y1, x0] + fy * fx * x[:, y1, x1])
    return out


def test_bilinear_cases():
    x = np.random.default_rng(4).random((2, 3, 5))
    np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 3, 5).data, x, atol=1e-15)
    np.testing.assert_allclose(T.bilinear_resize(Tensor(np.full((1, 3, 3), 0.7)), 7, 2).data, 0.7, atol=1e-15)
    grid = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_allclose(T.bilinear_resize(Tensor(grid), 4, 4).data, direct_bilinear(grid, 4, 4), atol=1e-12)
    # Known values: align-corners=False puts output (1,1) at source (0.25, 0.25).
    assert abs(T.bilinear_resize(Tensor(grid), 4, 4).data[0, 1, 1] - 1.75) < 1e-12


def test_nearest_downsample_cases():
    lab = np.random.default_rng(5).integers(0, 4, (6, 6))
    np.testing.assert_array_equal(T.nearest_downsample(lab, 6, 6), lab)
    np.testing.assert_array_equal(T.nearest_downsample(np.full((4, 4), 3), 2, 2), np.full((2, 2), 3))
    checker = np.indices((4, 4)).sum(axis=0) % 2
    checker[1, 1] = IGNORE
    # Output cell i samples input row/col floor((i + 0.5) * 4 / 2) = 2i + 1.
    expected = np.array([[checker[1, 1], checker[1, 3]], [checker[3, 1], checker[3, 3]]])
    np.testing.assert_array_equal(T.nearest_downsample(checker, 2, 2), expected)
    assert T.nearest_downsample(checker, 2, 2)[0, 0] == IGNORE


# ---------------------------------------------------------------- gradient checks

def test_grad_check_trivial_functions():
    w = leaf([3.0])
    assert T.grad_check(lambda: T.sum_all(T.mul(w, w)), [w]) <= 1e-9
    c = leaf([1.0, 2.0])
    assert T.grad_check(lambda: Tensor(np.array(5.0)), [c]) == 0.0


def test_grad_check_rejects_non_finite():
    w = leaf([1.0])
    with pytest.raises(NumericalError):
        T.grad_check(lambda: T.scale(T.sum_all(w), float("inf")), [w])


def _primitive_cases(rng):
    x4 = leaf(rng.standard_normal((2, 3, 6, 6)))
    w = leaf(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    b = leaf(rng.standard_normal(4))
    a = leaf(rng.standard_normal((3, 4)))
    bm = leaf(rng.standard_normal((2, 4, 5)))
    g = leaf(rng.standard_normal(3))
    be = leaf(rng.standard_normal(3))
    lg = leaf(rng.standard_normal((2, 3, 4, 4)))
    lq = leaf(rng.standard_normal((2, 3, 4, 4)))
    tgt = rng.integers(0, 3, (2, 4, 4))
    tgt[0, 0, 0] = IGNORE
    mask = rng.random((2, 4, 4)) > 0.3
    proj = rng.standard_normal((2, 3, 6, 6))
    proj5 = rng.standard_normal((2, 3, 5, 7))
    proj_mm = rng.standard_normal((2, 3, 5))
    xs = leaf(rng.standard_normal((2, 3, 3, 3)))
    ws = leaf(rng.standard_normal((2, 3, 3, 3)) * 0.5)
    bs = leaf(rng.standard_normal(2))
    proj_small = rng.standard_normal((2, 3, 3, 3))
    proj_conv_small = rng.standard_normal((2, 2, 2, 2))
    return {
        "matmul": (lambda: T.sum_all(T.mul_const(T.matmul(a, bm), proj_mm)), [a, bm]),
        "softmax": (lambda: T.sum_all(T.mul_const(T.softmax(xs, 1), proj_small)), [xs]),
        "conv2d": (lambda: T.sum_all(T.mul_const(T.conv2d(xs, ws, bs, stride=2, padding=1), proj_conv_small)), [xs, ws, bs]),
        "relu": (lambda: T.sum_all(T.mul_const(T.relu(x4), proj)), [x4]),
        "bilinear": (lambda: T.sum_all(T.mul_const(T.bilinear_resize(x4, 5, 7), proj5)), [x4]),
        "instance_norm": (lambda: T.sum_all(T.mul_const(T.instance_norm(x4), proj)), [x4]),
        "affine": (lambda: T.sum_all(T.mul_const(T.channel_affine(x4, g, be), proj)), [x4, g, be]),
        "cross_entropy": (lambda: T.masked_cross_entropy(lg, tgt), [lg]),
        "kl": (lambda: T.kl_divergence(lg, lq, mask), [lg, lq]),
        "transpose_reshape": (lambda: T.sum_all(T.mul_const(T.reshape(T.transpose(x4), (2, 3, 36)), proj.reshape(2, 3, 36))), [x4]),
    }


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", ["matmul", "softmax", "conv2d", "relu", "bilinear", "instance_norm", "affine",
                                  "cross_entropy", "kl", "transpose_reshape"])
def test_primitive_gradients(seed, name):
    rng = np.random.default_rng(100 + seed)
    cases = _primitive_cases(rng)
    f, params = cases[name]
    assert T.grad_check(f, params) <= 1e-6


def test_backward_accumulates_over_shared_inputs():
    x = leaf([1.0, 2.0])
    y = T.add(T.mul(x, x), x)
    T.backward(T.sum_all(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_detached_tensors_build_no_graph():
    x = leaf([1.0, 2.0])
    d = x.detach()
    out = T.scale(d, 3.0)
    assert not out.requires_grad and out.parents == ()
