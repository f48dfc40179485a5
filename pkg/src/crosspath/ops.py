"""Differentiable primitives on NCHW / NF tensors.

Every op computes its forward value with numpy and hands ``emit`` a closure
mapping the upstream gradient to one gradient per input (``None`` where an
input needs none).
"""
from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, emit

# piecewise ops append their branch decisions here while record_branches() is active
_branch_log: list | None = None


@contextlib.contextmanager
def record_branches():
    """Collect relu masks and maxpool argmaxes of every op run inside the block."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _same_dtype(*ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise TypeError(f"mixed dtypes {sorted(map(str, dts))}")


# --- convolution ------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and FxCxKxK weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d bias {b.shape} does not match {f} filters")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _same_dtype(x, w, b)
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"same padding needs an odd kernel, got K={k}")
        ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
        # pad so that the last window fits; symmetric k//2 on the leading side
        p = k // 2
        ph = max((ho - 1) * stride + k - h - p, 0)
        pw = max((wo - 1) * stride + k - wd - p, 0)
        pads = (p, ph, p, pw)
    elif padding == "valid":
        if h < k or wd < k:
            raise ShapeError(f"valid conv with K={k} needs spatial dims >= K, got {x.shape}")
        ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")

    top, bottom, left, right = pads
    xh = x.data.transpose(0, 2, 3, 1)
    if any(pads):
        xh = np.pad(xh, ((0, 0), (top, bottom), (left, right), (0, 0)))
    hp, wp = xh.shape[1], xh.shape[2]
    cols = _im2col(xh, k, stride, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, k * k * c)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gm.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = gm.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                gx = _conv_input_grad(g, w.data, top, left, h, wd)
            else:
                dcols = (gm @ wmat).reshape(n, ho, wo, k, k, c)
                gxp = np.zeros((n, hp, wp, c), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                gx = gxp[:, top:top + h, left:left + wd, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return emit(out, (x, w, b), backward, "conv2d")


def _im2col(xh: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output pixels (n, y, x); columns are (ky, kx, channel)."""
    n, _, _, c = xh.shape
    cols = np.empty((n, ho, wo, k, k, c), dtype=xh.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _conv_input_grad(g, w, top, left, h, wd):
    """Input gradient of a stride-1 conv: correlate the zero-padded upstream
    gradient with the spatially flipped, channel-transposed kernel."""
    f = g.shape[1]
    _, c, k, _ = w.shape
    gh = np.pad(g.transpose(0, 2, 3, 1), ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    gh = gh[:, top:top + h + k - 1, left:left + wd + k - 1, :]
    short_h, short_w = h + k - 1 - gh.shape[1], wd + k - 1 - gh.shape[2]
    if short_h > 0 or short_w > 0:
        gh = np.pad(gh, ((0, 0), (0, max(short_h, 0)), (0, max(short_w, 0)), (0, 0)))
    cols = _im2col(gh, k, 1, h, wd)
    # wflip[c, ky, kx, f] = w[f, c, k-1-ky, k-1-kx]
    wflip = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * f)
    n = g.shape[0]
    return np.ascontiguousarray((cols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))


# --- dense / activations ----------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias {b.shape} does not match weights {w.shape}")
    _same_dtype(x, w, b)
    out = x.data @ w.data + b.data

    def backward(g):
        return (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return emit(out, (x, w, b), backward, "dense")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # relu'(0) = 0
    if _branch_log is not None:
        _branch_log.append(mask)
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (g * mask,)

    return emit(out, (x,), backward, "relu")


def maxpool2x2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]  # first occurrence on ties
    if _branch_log is not None:
        _branch_log.append(idx)
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return emit(out, (x,), backward, "maxpool2x2")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one element on the last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return emit(out, (x,), backward, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = x.dtype.type(1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)

    return emit(out, (x,), backward, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return emit(out, (x,), backward, "flatten")


# --- elementwise ------------------------------------------------------------

def scalar_broadcast_mul(g: Tensor, x: Tensor) -> Tensor:
    """Multiply ``x`` by a scalar, or by one scalar per batch row.

    ``g`` has shape ``()`` (shared) or ``(N,)`` (per sample); it is broadcast
    over every non-batch axis of ``x``.
    """
    x = as_tensor(x)
    g = as_tensor(g, dtype=x.dtype)
    _same_dtype(g, x)
    if g.ndim == 0:
        gb = g.data
        reduce_axes = None
    elif g.ndim == 1 and x.ndim >= 1 and g.shape[0] == x.shape[0]:
        gb = g.data.reshape((-1,) + (1,) * (x.ndim - 1))
        reduce_axes = tuple(range(1, x.ndim))
    else:
        raise ShapeError(f"scalar_broadcast_mul: gate shape {g.shape} does not broadcast over {x.shape}")
    out = gb * x.data

    def backward(up):
        gx = up * gb if x.requires_grad else None
        gg = None
        if g.requires_grad:
            prod = x.data * up
            gg = np.asarray(prod.sum() if reduce_axes is None else prod.sum(axis=reduce_axes), dtype=g.dtype)
        return gg, gx

    return emit(out, (g, x), backward, "scalar_broadcast_mul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    _same_dtype(a, b)

    def backward(g):
        return g, g

    return emit(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub needs equal shapes, got {a.shape} and {b.shape}")
    _same_dtype(a, b)

    def backward(g):
        return g, -g

    return emit(a.data - b.data, (a, b), backward, "sub")


def add_n(ts: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of equally shaped tensors."""
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("add_n of an empty list")
    out = ts[0]
    for t in ts[1:]:
        out = add(out, t)
    return out


def mean_over(ts: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("mean_over of an empty list")
    total = add_n(ts)
    if len(ts) == 1:
        return total
    return mul_const(total, 1.0 / len(ts))


def mul_const(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)

    def backward(g):
        return (g * c,)

    return emit(x.data * c, (x,), backward, "mul_const")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum_all")


def select(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``select(G, (slice(None), j))``."""
    x = as_tensor(x)
    out = np.array(x.data[key], copy=True)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return emit(out, (x,), backward, "select")


# --- loss -------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects N x classes logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return emit(loss, (logits,), backward, "cross_entropy_loss")
