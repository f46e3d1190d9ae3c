"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are float64 numpy arrays frozen at construction; an operation
returns a fresh Tensor whose backward closure scatters the incoming
gradient to its parents. Graphs are implicit (parent pointers) and
single-owner: build, call :func:`backward` on a scalar, read ``.grad``
off the leaves. There is no broadcasting beyond the explicit bias-add
patterns accepted by :func:`add`; everything else must match shapes
exactly so silent shape bugs cannot survive.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

# When enabled every op output is scanned for NaN/Inf. Off by default:
# training code checks loss scalars instead, which is where blowups
# surface first.
_CHECK_FINITE = False


def set_check_finite(flag):
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


class Tensor:
    """Immutable float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, _own=False):
        if _own:
            arr = np.asarray(data, dtype=np.float64)
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
        else:
            arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        if _CHECK_FINITE and not np.isfinite(arr).all():
            raise NumericError("non-finite tensor value")
        self.data = arr
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def leaf(data):
    """Trainable leaf; gradients accumulate here."""
    return Tensor(data, requires_grad=True)


def const(data):
    """Non-trainable value (inputs, labels, frozen weights)."""
    return Tensor(data)


def _out(data, parents, backward_fn):
    return Tensor(data, parents=parents, backward_fn=backward_fn, _own=True)


def _acc(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)
        else:
            t.grad += g


def backward(root, seed=1.0):
    """Reverse-mode sweep from a scalar root.

    Visits every reachable node exactly once in reverse topological
    order; forward values are never touched.
    """
    if root.data.size != 1:
        raise DimensionError(f"backward root must be scalar, got shape {root.data.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    root.grad = np.full_like(root.data, float(seed))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# matrix products

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _out(out_data, (a, b), bw)


def ordered_matmul(a, b):
    """Matrix product accumulated rank-by-rank in a fixed order.

    Each output element is a sequential sum over the inner dimension,
    independent of the other columns of ``b``; a column subset of ``b``
    therefore reproduces bit-identical values. Used for factor recovery
    so pruned recoveries are exact sub-tensors of full ones.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("ordered_matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"ordered_matmul inner dims {a.data.shape} x {b.data.shape}")
    out_data = np.zeros((a.data.shape[0], b.data.shape[1]))
    for r in range(a.data.shape[1]):
        out_data += np.multiply.outer(a.data[:, r], b.data[r, :])

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _out(out_data, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution (im2col + one matrix product)

def _im2col(x, k, stride, pad):
    """Columns in (channel, ky, kx, batch*out_h*out_w) order.

    Assembled with one well-strided copy per kernel offset, which is far
    cheaper than a single 6-axis gather.
    """
    bsz, ch, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((ch, k, k, bsz, ho, wo))
    for ky in range(k):
        for kx in range(k):
            src = x[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
            cols[:, ky, kx] = src.transpose(1, 0, 2, 3)
    return cols.reshape(ch * k * k, bsz * ho * wo), ho, wo


def _col2im(gcols, xshape, k, stride, pad, ho, wo):
    bsz, ch, h, w = xshape
    gx = np.zeros((bsz, ch, h + 2 * pad, w + 2 * pad))
    g6 = gcols.reshape(ch, k, k, bsz, ho, wo)
    for ky in range(k):
        for kx in range(k):
            gx[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += \
                g6[:, ky, kx].transpose(1, 0, 2, 3)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def _conv_forward(x, w, stride, pad, bias=None):
    bsz = x.shape[0]
    t, s, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    w2 = w.transpose(1, 2, 3, 0).reshape(s * k * k, t)  # rows follow cols order
    out2 = w2.T @ cols                                  # (T, B*ho*wo)
    if bias is not None:
        out2 += bias[:, None]
    out = np.ascontiguousarray(out2.reshape(t, bsz, ho, wo).transpose(1, 0, 2, 3))
    return out, cols, w2, ho, wo


def conv2d(x, w, stride=1, pad=0, bias=None):
    """Cross-correlation of (B,S,H,W) input with (T,S,k,k) weight.

    Maps onto exactly one matrix product of B*q^2*k^2*S*T multiply-adds;
    an optional (T,) bias is fused so its gradient is one contiguous
    reduction.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    bsz, ch, h, wdt = x.data.shape
    t, s, k, k2 = w.data.shape
    if k != k2:
        raise DimensionError("conv2d kernel must be square")
    if s != ch:
        raise DimensionError(f"conv2d channels: input {ch}, weight {s}")
    if k > h + 2 * pad or k > wdt + 2 * pad:
        raise DimensionError(f"kernel {k} exceeds padded input {h + 2 * pad}x{wdt + 2 * pad}")
    if bias is not None and bias.data.shape != (t,):
        raise DimensionError(f"conv2d bias shape {bias.data.shape}, expected ({t},)")
    out_data, cols, w2, ho, wo = _conv_forward(
        x.data, w.data, stride, pad, None if bias is None else bias.data)
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(t, bsz * ho * wo)
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(t, s, k, k)
            _acc(w, gw)
        if bias is not None and bias.requires_grad:
            _acc(bias, g2.sum(axis=1))
        if x.requires_grad:
            _acc(x, _col2im(w2 @ g2, x.data.shape, k, stride, pad, ho, wo))

    return _out(out_data, parents, bw)


def conv2d_infer(x, w, stride=1, pad=0):
    """Plain-array convolution via the same im2col kernel (no graph)."""
    out, _, _, _, _ = _conv_forward(x, w, stride, pad)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural primitives

def relu(x):
    # np.maximum (unlike where) propagates NaN, so poisoned values reach
    # the loss instead of being silently clipped to zero
    out_data = np.maximum(x.data, 0.0)

    def bw(g):
        _acc(x, g * (out_data > 0))

    return _out(out_data, (x,), bw)


def relu_infer(x):
    return np.maximum(x, 0.0)


def maxpool2x2(x):
    """2x2/stride-2 max pooling; exact ties share the incoming gradient."""
    if x.data.ndim != 4:
        raise DimensionError("maxpool2x2 expects a 4-D tensor")
    bsz, ch, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # elementwise maxima over window slots beat strided axis reductions
    rows = x.data.reshape(bsz, ch, h2, 2, w)
    row_max = np.maximum(rows[:, :, :, 0, :], rows[:, :, :, 1, :])
    pairs = row_max.reshape(bsz, ch, h2, w2, 2)
    out_data = np.maximum(pairs[..., 0], pairs[..., 1])

    def bw(g):
        x4 = x.data.reshape(bsz, ch, h2, 2, w2, 2)
        gx = np.empty_like(x.data).reshape(bsz, ch, h2, 2, w2, 2)
        for dy in (0, 1):
            for dx in (0, 1):
                slot = x4[:, :, :, dy, :, dx]
                gx[:, :, :, dy, :, dx] = (slot == out_data) * g
        _acc(x, gx.reshape(bsz, ch, h, w))

    return _out(out_data, (x,), bw)


def maxpool2x2_infer(x):
    bsz, ch, h, w = x.shape
    rows = x.reshape(bsz, ch, h // 2, 2, w)
    row_max = np.maximum(rows[:, :, :, 0, :], rows[:, :, :, 1, :])
    pairs = row_max.reshape(bsz, ch, h // 2, w // 2, 2)
    return np.maximum(pairs[..., 0], pairs[..., 1])


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis of a 1-D or 2-D tensor."""
    if x.data.ndim not in (1, 2) or x.data.shape[-1] == 0:
        raise DimensionError(f"softmax on shape {x.data.shape}")
    y = _softmax_np(x.data)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _acc(x, (g - dot) * y)

    return _out(y, (x,), bw)


def cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels against (n,K) logits."""
    if logits.data.ndim != 2 or logits.data.shape[0] == 0 or logits.data.shape[1] == 0:
        raise DimensionError(f"cross_entropy on logits shape {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.data.shape[0],):
        raise DimensionError("cross_entropy labels must be one id per row")
    n = labels.shape[0]
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out_data = np.array((lse - z[np.arange(n), labels]).mean())

    def bw(g):
        p = _softmax_np(z)
        p[np.arange(n), labels] -= 1.0
        _acc(logits, (g.item() / n) * p)

    return _out(out_data, (logits,), bw)


def add(a, b):
    """Elementwise add; the only broadcasts accepted are bias patterns.

    Allowed: same shape, (n,m)+(m,), (n,m)+(n,1), (B,C,H,W)+(C,).
    """
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        reduce_b = None
    elif len(sa) == 2 and sb == (sa[1],):
        reduce_b = lambda g: g.sum(axis=0)
    elif len(sa) == 2 and sb == (sa[0], 1):
        reduce_b = lambda g: g.sum(axis=1, keepdims=True)
    elif len(sa) == 4 and sb == (sa[1],):
        reduce_b = lambda g: g.sum(axis=(0, 2, 3))
    else:
        raise DimensionError(f"add shapes {sa} + {sb}")
    if reduce_b is None:
        out_data = a.data + b.data

        def bw(g):
            _acc(a, g)
            _acc(b, g)
    else:
        out_data = a.data + (b.data if len(sb) == 2 else b.data.reshape((1, sb[0]) + (1,) * (len(sa) - 2)))

        def bw(g):
            _acc(a, g)
            _acc(b, reduce_b(g))

    return _out(out_data, (a, b), bw)


def scale(x, c):
    c = float(c)

    def bw(g):
        _acc(x, g * c)

    return _out(x.data * c, (x,), bw)


def neg(x):
    return scale(x, -1.0)


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes {a.data.shape} * {b.data.shape}")

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _out(a.data * b.data, (a, b), bw)


def mul_scalar(x, s):
    """Multiply by a 0-D tensor (e.g. a learnable inverse temperature)."""
    if s.data.shape != ():
        raise DimensionError(f"mul_scalar needs a 0-D tensor, got {s.data.shape}")
    sval = float(s.data)

    def bw(g):
        _acc(x, g * sval)
        _acc(s, np.array((g * x.data).sum()))

    return _out(x.data * sval, (x, s), bw)


def exp(x):
    y = np.exp(x.data)

    def bw(g):
        _acc(x, g * y)

    return _out(y, (x,), bw)


def detach(x):
    """Value copy with no gradient path back to its input."""
    return Tensor(x.data, _own=True)


def frobenius_sq(x):
    out_data = np.array((x.data * x.data).sum())

    def bw(g):
        _acc(x, (2.0 * g.item()) * x.data)

    return _out(out_data, (x,), bw)


def reshape(x, shape):
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def bw(g):
        _acc(x, g.reshape(x.data.shape))

    return _out(out_data, (x,), bw)


def transpose(x, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        _acc(x, np.ascontiguousarray(g.transpose(inv)))

    return _out(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def slice_t(x, key):
    """Basic slicing; the gradient scatters back into a zero tensor."""
    key = key if isinstance(key, tuple) else (key,)
    out_data = np.asarray(x.data[key])
    if not out_data.flags.c_contiguous:
        out_data = np.ascontiguousarray(out_data)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[key] = g
            _acc(x, full)

    return _out(out_data, (x,), bw)


def add_n(terms):
    """Sum a non-empty list of same-shape tensors."""
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc
