"""Differentiable operations over :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input.  Broadcasting follows
numpy rules; gradients are summed back to each input's shape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError
from .tensor import DTYPE, Tensor, as_tensor, make_output


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_output(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_output(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_output(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_output(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_output(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return make_output(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_output(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_output(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_output(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient flows only where the input was not clipped."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    keep = out == a.data
    return make_output(out, (a,), lambda g: (g * keep,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return make_output(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                   _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_output(np.asarray(out), (a,), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return make_output(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_output(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)

    def grad(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return make_output(np.array(a.data[index], dtype=DTYPE), (a,), grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_output(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_output(
        out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def matmul(a, b) -> Tensor:
    """numpy ``matmul`` semantics for operands with at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def grad(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return make_output(a.data @ b.data, (a, b), grad)


# ---------------------------------------------------------------------------
# probability helpers
# ---------------------------------------------------------------------------

def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return make_output(out if keepdims else np.squeeze(out, axis=axis), (a,), grad)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax; outputs are positive and sum to one along ``axis``."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output(out, (a,), grad)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def grad(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_output(out, (a,), grad)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = power(add(sum(mul(a, a), axis=axis, keepdims=True), eps), 0.5)
    return div(a, norm)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean (optionally weighted) negative log-likelihood of integer ``targets``.

    ``logits`` has shape ``(n, classes)``.  With ``weights`` the result is
    ``sum(w_i * nll_i) / sum(w_i)``.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    logp = log_softmax(logits, axis=1)
    picked = getitem(logp, (np.arange(len(targets)), targets))
    if weights is None:
        return neg(mean(picked))
    w = np.asarray(weights, dtype=DTYPE)
    return neg(div(sum(mul(picked, w)), float(w.sum())))


# ---------------------------------------------------------------------------
# spatial ops, layout (C, H, W) or (N, C, H, W)
# ---------------------------------------------------------------------------

def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    Output spatial size is ``(H + 2*padding - kh) // stride + 1`` (same for W).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ContractError("stride must be >= 1")
    x4, squeeze = _batched(x)
    n, cin, h, w = x4.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"input has {cin} channels, kernel expects {kcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError("kernel larger than padded input")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x4.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    inputs = (x4, kernel) if bias is None else (x4, kernel, as_tensor(bias))
    if bias is not None:
        out = out + inputs[2].data.reshape(1, cout, 1, 1)

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (g2.T @ cols).reshape(kernel.shape)
        gx = None
        if x4.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return (gx, gk)
        return (gx, gk, g.sum(axis=(0, 2, 3)))

    y = make_output(np.ascontiguousarray(out), inputs, grad)
    return reshape(y, y.shape[1:]) if squeeze else y


def avg_pool(x, window: int | None = None) -> Tensor:
    """Non-overlapping mean pooling; ``window=None`` pools the full spatial extent."""
    x = as_tensor(x)
    x4, squeeze = _batched(x)
    n, c, h, w = x4.shape
    if window is None:
        wh, ww = h, w
    else:
        if h % window or w % window:
            raise DimensionError(f"spatial dims {(h, w)} not divisible by window {window}")
        wh = ww = window
    blocks = reshape(x4, (n, c, h // wh, wh, w // ww, ww))
    y = mean(blocks, axis=(3, 5))
    return reshape(y, y.shape[1:]) if squeeze else y


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: ``(C,H,W) -> (C,)`` or ``(N,C,H,W) -> (N,C)``."""
    x = as_tensor(x)
    return mean(x, axis=(-2, -1))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def grad(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return make_output(out, (x,), grad)


# ---------------------------------------------------------------------------
# operator overloads
# ---------------------------------------------------------------------------

def _install():
    T = Tensor
    T.__add__ = lambda s, o: add(s, o)
    T.__radd__ = lambda s, o: add(o, s)
    T.__sub__ = lambda s, o: sub(s, o)
    T.__rsub__ = lambda s, o: sub(o, s)
    T.__mul__ = lambda s, o: mul(s, o)
    T.__rmul__ = lambda s, o: mul(o, s)
    T.__truediv__ = lambda s, o: div(s, o)
    T.__rtruediv__ = lambda s, o: div(o, s)
    T.__neg__ = lambda s: neg(s)
    T.__pow__ = lambda s, p: power(s, p)
    T.__matmul__ = lambda s, o: matmul(s, o)
    T.__getitem__ = lambda s, idx: getitem(s, idx)
    T.sum = lambda s, axis=None, keepdims=False: sum(s, axis, keepdims)
    T.mean = lambda s, axis=None, keepdims=False: mean(s, axis, keepdims)
    T.reshape = lambda s, *shape: reshape(s, *shape)
    T.transpose = lambda s, *axes: transpose(s, *axes)
    T.exp = lambda s: exp(s)
    T.log = lambda s: log(s)
    T.relu = lambda s: relu(s)
    T.T = property(lambda s: transpose(s))


_install()


def batch_standardize(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance columns using statistics of the current batch."""
    x = as_tensor(x)
    centred = sub(x, mean(x, axis=0, keepdims=True))
    var = mean(mul(centred, centred), axis=0, keepdims=True)
    return div(centred, power(add(var, eps), 0.5))
