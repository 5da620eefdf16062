"""Neural-network primitives on :class:`~memreg.tensor.Tensor`.

Image-like tensors use the ``[N, C, H, W]`` layout throughout.
"""

from __future__ import annotations

import numpy as np

from memreg.errors import ShapeError
from memreg.tensor import Tensor, _make, as_tensor


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit random generator")
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: [N, C, H, W]; ``weight``: [O, C, kh, kw]; ``bias``: [O]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N, C, H, W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [O, C, kh, kw], got shape {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weight expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # column matrix laid out [C, kh, kw, N, Ho, Wo] so every tap is one block copy
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxt[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    n, c, h, w = x.shape
    o = weight.shape[0]
    wmat = weight.data.reshape(o, c)
    xf = x.data.reshape(n, c, h * w)
    out = wmat @ xf
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gf = g.reshape(n, o, h * w)
        gx = (wmat.T @ gf).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("noh,nch->oc", gf, xf).reshape(weight.shape) if weight.requires_grad else None
        gb = gf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(n, o, h, w), parents, backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell ``factor`` times along H and W."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)
