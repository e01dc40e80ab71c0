"""Minimal dense tensors with reverse-mode gradients.

Storage is a float64 numpy array. Every differentiable op returns a new
``Tensor`` that remembers its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks that graph once and writes
gradients only into leaf tensors that asked for them; the graph itself is
dropped with the step's tensors, so there is no global tape to reset.

Ops take either a single sample (``C x H x W``) or a batch (``N x C x H x W``).
There is no general broadcasting.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import LabelRangeError, NumericalError, ShapeError

IGNORE = 255


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros_scalar() -> Tensor:
    return Tensor(np.zeros(()))


def _make(data, parents, backward_fn, op) -> Tensor:
    parents = tuple(p for p in parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``a.shape``."""
    arr = np.broadcast_to(np.asarray(arr, dtype=np.float64), a.shape)
    return _make(a.data * arr, (a,), lambda g: (g * arr,), "mul_const")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar ``sum_i w_i * t_i``; the terms must be scalars."""
    terms = list(terms)
    weights = [float(w) for w in weights]
    value = 0.0
    for t, w in zip(terms, weights):
        value += w * float(t.data)

    def back(g):
        return tuple(g * w for w in weights)

    return _make(np.array(value), terms, back, "weighted_sum")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def take(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the leading axis."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop].copy(), (a,), back, "take")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported: ``M x N @ N x P``, batched ``B x M x N @ B x N x P`` and a shared
    left factor ``M x N @ B x N x P``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} and {b.shape}")
    if a.ndim > 3 or b.ndim > 3 or (a.ndim == 3 and b.ndim == 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared_left = a.ndim == 2 and b.ndim == 3

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared_left:
            ga = ga.sum(axis=0)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    s = softmax_array(a.data, axis)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), back, "softmax")


# ---------------------------------------------------------------- convolution

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (kernel not flipped) with zero padding."""
    xd, single = _batched(x.data)
    n, cin, h, w = xd.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin} ({x.shape} vs {weight.shape})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    k = kh
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, cin * k * k, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    if single:
        out = out[0]
    hp, wp = xp.shape[2], xp.shape[3]

    def back(g):
        gb = g.reshape(n, cout, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = (gb.transpose(1, 0, 2).reshape(cout, -1) @ cols.transpose(0, 2, 1).reshape(-1, cin * k * k))
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gb).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros((n, cin, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            if single:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, gb.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back, "conv2d")


# ---------------------------------------------------------------- resampling

@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` interpolation matrix, align-corners=False (read-only, cached)."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ry = bilinear_matrix(x.shape[-2], out_h)
    rx = bilinear_matrix(x.shape[-1], out_w)
    return ry @ x @ rx.T


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    ry = bilinear_matrix(x.shape[-2], out_h)
    rx = bilinear_matrix(x.shape[-1], out_w)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,), "bilinear_resize")


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index of each output cell: the input cell containing its center."""
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def nearest_downsample(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resampling of label maps (``H x W`` or ``N x H x W``)."""
    labels = np.asarray(labels)
    rows = nearest_indices(labels.shape[-2], out_h)
    cols = nearest_indices(labels.shape[-1], out_w)
    return labels[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------- normalization

def instance_norm(x: Tensor, eps: float = 1e-9) -> Tensor:
    """Per-sample, per-channel normalization over spatial positions."""
    xd, single = _batched(x.data)
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat[0] if single else xhat

    def back(g):
        gb, _ = _batched(g)
        gx = inv * (gb - gb.mean(axis=(2, 3), keepdims=True) - xhat * (gb * xhat).mean(axis=(2, 3), keepdims=True))
        return (gx[0] if single else gx,)

    return _make(out, (x,), back, "instance_norm")


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``gamma[c] * x + beta[c]`` over the channel axis."""
    xd, single = _batched(x.data)
    gd = gamma.data[None, :, None, None]
    out = xd * gd + beta.data[None, :, None, None]

    def back(g):
        gb, _ = _batched(g)
        gx = gb * gd
        return (gx[0] if single else gx, (gb * xd).sum(axis=(0, 2, 3)), gb.sum(axis=(0, 2, 3)))

    return _make(out[0] if single else out, (x, gamma, beta), back, "channel_affine")


# ---------------------------------------------------------------- losses

def _class_last(logits: np.ndarray, class_axis: int | None) -> tuple[np.ndarray, int]:
    """Move the class axis to the end and flatten pixels: returns (P x K, class_axis).

    The default class axis is 1 for rank-4 input and 0 otherwise.
    """
    axis = (1 if logits.ndim == 4 else 0) if class_axis is None else class_axis
    if not 0 <= axis < logits.ndim:
        raise ShapeError(f"class axis {axis} out of range for logits of shape {logits.shape}")
    k = logits.shape[axis]
    return np.moveaxis(logits, axis, -1).reshape(-1, k), axis


def masked_cross_entropy(logits: Tensor, target: np.ndarray, class_axis: int | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-IGNORE pixels.

    ``target`` has the shape of ``logits`` with the class axis removed.
    Returns exactly 0 (with zero gradient) when every pixel is ignored.
    """
    target = np.asarray(target)
    flat, axis = _class_last(logits.data, class_axis)
    k = flat.shape[1]
    spatial = tuple(np.delete(np.array(logits.shape), axis))
    if tuple(target.shape) != spatial:
        raise ShapeError(f"masked_cross_entropy: logits {logits.shape} vs target {target.shape}")
    t = target.reshape(-1).astype(np.int64)
    valid = t != IGNORE
    bad = valid & ((t < 0) | (t >= k))
    if bad.any():
        raise LabelRangeError(f"label {int(t[bad][0])} outside 0..{k - 1} (IGNORE={IGNORE})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _make(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),), "ce")
    rows = np.nonzero(valid)[0]
    cls = t[rows]
    logp = log_softmax_array(flat[rows], axis=1)
    loss = -logp[np.arange(n_valid), cls].mean()
    moved_shape = np.moveaxis(logits.data, axis, -1).shape

    def back(g):
        d = np.exp(logp)
        d[np.arange(n_valid), cls] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = d * (float(g) / n_valid)
        return (np.moveaxis(full.reshape(moved_shape), -1, axis),)

    return _make(np.array(loss), (logits,), back, "ce")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, mask: np.ndarray, class_axis: int | None = None) -> Tensor:
    """Mean over ``mask == 1`` pixels of ``KL(softmax(p) || softmax(q))``."""
    _check_same(p_logits, q_logits, "kl_divergence")
    mask = np.asarray(mask).astype(bool)
    pf, axis = _class_last(p_logits.data, class_axis)
    qf, _ = _class_last(q_logits.data, axis)
    if pf.shape[0] != mask.size:
        raise ShapeError(f"kl_divergence: logits {p_logits.shape} vs mask {mask.shape}")
    rows = np.nonzero(mask.reshape(-1))[0]
    n = rows.size
    if n == 0:
        zeros = lambda g: (np.zeros(p_logits.shape), np.zeros(q_logits.shape))  # noqa: E731
        return _make(np.array(0.0), (p_logits, q_logits), zeros, "kl")
    logp = log_softmax_array(pf[rows], 1)
    logq = log_softmax_array(qf[rows], 1)
    p = np.exp(logp)
    per_pixel = (p * (logp - logq)).sum(axis=1)
    moved_shape = np.moveaxis(p_logits.data, axis, -1).shape

    def scatter(d):
        full = np.zeros_like(pf)
        full[rows] = d
        return np.moveaxis(full.reshape(moved_shape), -1, axis)

    def back(g):
        c = float(g) / n
        gp = gq = None
        if p_logits.requires_grad:
            gp = scatter(p * (logp - logq - per_pixel[:, None]) * c)
        if q_logits.requires_grad:
            gq = scatter((np.exp(logq) - p) * c)
        return gp, gq

    return _make(np.array(per_pixel.mean()), (p_logits, q_logits), back, "kl")


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` re-evaluates the scalar loss from the current ``params`` data; the
    parameters are perturbed in place and restored.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError(f"grad_check: non-finite loss {loss.data}")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f().data)
            flat[i] = orig - epsilon
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"grad_check: non-finite loss while perturbing entry {i} of {p.shape}")
            numeric = (fp - fm) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
