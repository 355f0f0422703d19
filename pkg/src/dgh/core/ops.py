"""Differentiable ops. Image tensors are NCHW."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_node("mul", out, (a, b), bw)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def bw(g):
        return (2.0 * x.data * g,)

    return make_node("square", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bw(g):
        return (g * (out > 0),)

    return make_node("relu", out, (x,), bw, check=False)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return make_node("reshape", out, (x,), bw, check=False)


def flatten(x: Tensor) -> Tensor:
    """Flattens all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def astype(x: Tensor, dtype) -> Tensor:
    out = x.data.astype(dtype)

    def bw(g):
        return (g.astype(x.dtype),)

    return make_node("astype", out, (x,), bw, check=False)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_node("sum", out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / n)


def moment(x: Tensor, axes: tuple, order: int = 1) -> Tensor:
    """Raw moment E[x^order] over ``axes`` (order 1 or 2), accumulated in float64.

    The result is float64; gradients are returned to ``x`` in its own dtype.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    axes = tuple(axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError("moment", f"empty reduction over axes {axes} of {x.shape}")
    xd = x.data.astype(np.float64)
    out = (xd if order == 1 else xd * xd).mean(axis=axes)
    keep = [1 if i in axes else s for i, s in enumerate(x.shape)]

    def bw(g):
        gb = g.reshape(keep) / n
        if order == 1:
            return (np.broadcast_to(gb, x.shape).astype(x.dtype),)
        return ((2.0 * gb * xd).astype(x.dtype),)

    return make_node(f"moment{order}", out, (x,), bw)


def reduce_max(x: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis``; gradient flows to the first maximal index on ties."""
    return _extreme(x, axis, np.argmax, "max")


def reduce_min(x: Tensor, axis: int = -1) -> Tensor:
    return _extreme(x, axis, np.argmin, "min")


def _extreme(x: Tensor, axis: int, argfn, name: str) -> Tensor:
    axis = axis % x.data.ndim
    idx = argfn(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_node(name, out, (x,), bw)


# ---------------------------------------------------------------- layers

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with w of shape (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_node("linear", out, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation, zero padding, weight shape (out, in, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d", f"input has {c} channels, weight expects {ci}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    # im2col over a channel-major (C, N, H, W) copy: one strided block copy per kernel tap
    xc = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xc[:, :, pad:pad + h, pad:pad + wd] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = None
        if w.requires_grad:
            gw = (gmat @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(kh, kw, c, n, ho, wo)
            gxc = np.zeros((c, n, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
            gx = np.ascontiguousarray(gxc[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node("conv2d", out, parents, bw, check=False)


def batchnorm(x: Tensor, mu: np.ndarray, var: np.ndarray, gamma: Tensor, beta: Tensor,
              eps: float = 1e-5) -> Tensor:
    """Inference-form batch norm with frozen per-channel mean and variance."""
    c = x.shape[1]
    if mu.shape != (c,) or var.shape != (c,):
        raise ShapeError("batchnorm", f"statistics of length {mu.shape} for {c} channels")
    inv = 1.0 / np.sqrt(var.astype(np.float64) + eps)
    scale = (gamma.data * inv).astype(x.dtype).reshape(1, c, 1, 1)
    shift = (beta.data - mu * gamma.data * inv).astype(x.dtype).reshape(1, c, 1, 1)
    out = x.data * scale
    out += shift

    def bw(g):
        gx = g * scale if x.requires_grad else None
        gg = gb = None
        if gamma.requires_grad:
            xhat = (x.data - mu.astype(x.dtype).reshape(1, c, 1, 1)) * inv.astype(x.dtype).reshape(1, c, 1, 1)
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return make_node("batchnorm", out, (x, gamma, beta), bw, check=False)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Training-form batch norm. Returns (output, batch_mean, batch_var).

    Batch statistics are biased (population) estimates over N, H, W.
    """
    c = x.shape[1]
    m = x.shape[0] * x.shape[2] * x.shape[3]
    xd = x.data.astype(np.float64)
    bm = xd.mean(axis=(0, 2, 3))
    bv = ((xd - bm.reshape(1, c, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(bv + eps)
    xhat = ((xd - bm.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)).astype(x.dtype)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, gg, gb

    return make_node("batchnorm_train", out, (x, gamma, beta), bw), bm, bv


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pool; ties route to the first maximal element."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("max_pool2d", f"spatial size {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return make_node("max_pool2d", out, (x,), bw, check=False)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d", f"spatial size {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3)
        return (gx.astype(x.dtype, copy=False),)

    return make_node("avg_pool2d", out, (x,), bw, check=False)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_node("global_avg_pool", out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    labels = np.asarray(labels)
    out = np.asarray(-logp[np.arange(n), labels].mean())

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g * p / n).astype(logits.dtype),)

    return make_node("softmax_cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------- image index maps

def pad_reflect(x: Tensor, p: int) -> Tensor:
    """Mirror padding without edge repetition (numpy 'reflect')."""
    if p == 0:
        return x
    h, w = x.shape[2], x.shape[3]
    if p >= h or p >= w:
        raise ShapeError("pad_reflect", f"pad {p} too large for {h}x{w}")
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")

    def bw(g):
        g = g.copy()
        # fold mirrored rows/cols back onto their sources
        g[:, :, p + 1:2 * p + 1, :] += g[:, :, p - 1::-1, :]
        g[:, :, -2 * p - 1:-p - 1, :] += g[:, :, :-p - 1:-1, :]
        g = g[:, :, p:-p, :]
        g[:, :, :, p + 1:2 * p + 1] += g[:, :, :, p - 1::-1]
        g[:, :, :, -2 * p - 1:-p - 1] += g[:, :, :, :-p - 1:-1]
        return (np.ascontiguousarray(g[:, :, :, p:-p]),)

    return make_node("pad_reflect", out, (x,), bw, check=False)


def depthwise_filter3x3(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Valid 3x3 correlation with one fixed kernel applied to every channel."""
    n, c, h, w = x.shape
    kernel = np.asarray(kernel, dtype=x.dtype)
    ho, wo = h - 2, w - 2
    if ho < 1 or wo < 1:
        raise ShapeError("depthwise_filter3x3", f"input {h}x{w} smaller than kernel")
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            if kernel[i, j]:
                out += kernel[i, j] * x.data[:, :, i:i + ho, j:j + wo]

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                if kernel[i, j]:
                    gx[:, :, i:i + ho, j:j + wo] += kernel[i, j] * g
        return (gx,)

    return make_node("depthwise_filter3x3", out, (x,), bw, check=False)


def flip_horizontal(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mirror the width axis of the images selected by boolean ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ShapeError("flip_horizontal", f"mask shape {mask.shape} for batch {x.shape[0]}")
    out = x.data.copy()
    out[mask] = out[mask][..., ::-1]

    def bw(g):
        g = g.copy()
        g[mask] = g[mask][..., ::-1]
        return (g,)

    return make_node("flip_horizontal", out, (x,), bw, check=False)


def crop(x: Tensor, offsets: np.ndarray, size: tuple[int, int]) -> Tensor:
    """Per-image crop: image k keeps rows oy:oy+h, cols ox:ox+w for offsets[k] = (oy, ox)."""
    n, c, h, w = x.shape
    oh, ow = size
    offsets = np.asarray(offsets, dtype=int).reshape(n, 2)
    if (offsets < 0).any() or (offsets[:, 0] + oh > h).any() or (offsets[:, 1] + ow > w).any():
        raise ShapeError("crop", f"crop {oh}x{ow} at {offsets.tolist()} exceeds {h}x{w}")
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for k, (oy, ox) in enumerate(offsets):
        out[k] = x.data[k, :, oy:oy + oh, ox:ox + ow]

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for k, (oy, ox) in enumerate(offsets):
            gx[k, :, oy:oy + oh, ox:ox + ow] = g[k]
        return (gx,)

    return make_node("crop", out, (x,), bw, check=False)
