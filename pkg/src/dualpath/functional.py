"""Differentiable operations.

Every function takes and returns :class:`~dualpath.autograd.Tensor` objects
and records a backward closure when any input requires a gradient. Image-like
tensors use the NCHW layout; the text path reuses the same layout with
``H == 1`` and the sentence length on the W axis.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .autograd import Tensor, as_tensor, make_result
from .errors import BatchSizeError, DimensionError, LabelIndexError, NumericError, ParameterError

Padding = Union[int, Sequence[int], Sequence[Sequence[int]]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and reduction primitives
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(out, (a, b), backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return make_result(out, (x,), backward)


def maximum_zero(x: Tensor) -> Tensor:
    """Hinge ``max(0, x)``; identical to :func:`relu`, kept for readable loss code."""
    return relu(x)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; the backward pass scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, index, g)
        return (dx,)

    return make_result(out, (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm.

    Raises:
        NumericError: if any row has norm below ``eps``.
    """
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    small = np.flatnonzero(norms[:, 0] <= eps)
    if small.size:
        raise NumericError(f"row {int(small[0])} has near-zero norm {float(norms[small[0], 0]):.3g}")
    y = x.data / norms

    def backward(g):
        # d(x/|x|) = (g - y <g,y>) / |x|
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return make_result(y, (x,), backward)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"rowwise_dot needs equal 2-D shapes, got {a.shape} and {b.shape}")
    out = np.sum(a.data * b.data, axis=1)

    def backward(g):
        g = g[:, None]
        return g * b.data, g * a.data

    return make_result(out, (a, b), backward)


# --------------------------------------------------------------------------
# network layers
# --------------------------------------------------------------------------


def _normalize_padding(pad: Padding) -> tuple[int, int, int, int]:
    """Return (top, bottom, left, right)."""
    if isinstance(pad, (int, np.integer)):
        return int(pad), int(pad), int(pad), int(pad)
    ph, pw = pad
    if isinstance(ph, (int, np.integer)):
        top = bottom = int(ph)
    else:
        top, bottom = (int(v) for v in ph)
    if isinstance(pw, (int, np.integer)):
        left = right = int(pw)
    else:
        left, right = (int(v) for v in pw)
    if min(top, bottom, left, right) < 0:
        raise DimensionError(f"negative padding {pad}")
    return top, bottom, left, right


def conv2d(x: Tensor, kernel: Tensor, pad: Padding = 0, stride: int = 1, layout: str = "NCHW") -> Tensor:
    """Cross-correlate ``x`` with ``kernel`` [C_out, C_in, kh, kw].

    ``x`` is [N, C_in, H, W] (``layout="NCHW"``) or [N, H, W, C_in]
    (``layout="NHWC"``, used inside the network to avoid transposes). A 3-D
    input is treated as a batch of one and the result is returned 3-D.
    ``pad`` is an int, ``(ph, pw)`` for symmetric padding, or
    ``((top, bottom), (left, right))``. Output extents are
    ``(H + top + bottom - kh) // stride + 1`` and likewise for W.
    """
    if layout not in ("NCHW", "NHWC"):
        raise ParameterError(f"unknown layout {layout!r}")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    c_in = x.shape[1] if layout == "NCHW" else x.shape[3]
    if kernel.shape[1] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} ({layout}) vs kernel {kernel.shape}")
    if layout == "NCHW":
        out = transpose(_conv2d_nhwc(transpose(x, (0, 2, 3, 1)), kernel, pad, stride), (0, 3, 1, 2))
    else:
        out = _conv2d_nhwc(x, kernel, pad, stride)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def _conv2d_nhwc(x: Tensor, kernel: Tensor, pad: Padding, stride: int) -> Tensor:
    n, h, w, c_in = x.shape
    c_out, _, kh, kw = kernel.shape
    top, bottom, left, right = _normalize_padding(pad)
    hp, wp = h + top + bottom, w + left + right
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d kernel {kernel.shape} larger than padded input extents {(hp, wp)}")
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    padded = bool(top or bottom or left or right)
    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0))) if padded else x.data
    # columns ordered (kh, kw, c_in) to match the flattened kernel below
    if kh == kw == 1:
        cols = np.ascontiguousarray(xp[:, : stride * ho : stride, : stride * wo : stride, :]).reshape(-1, c_in)
    else:
        cols6 = np.empty((n, ho, wo, kh, kw, c_in), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
        cols = cols6.reshape(n * ho * wo, kh * kw * c_in)
    wmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out)

    def backward(g):
        gmat = g.reshape(-1, c_out)
        dkernel = None
        if kernel.requires_grad:
            dkernel = (gmat.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        dx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, c_in)
            dxp = np.zeros((n, hp, wp, c_in), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, top : top + h, left : left + w, :] if padded else dxp
        return dx, dkernel

    return make_result(out, (x, kernel), backward)


def pool2d(x: Tensor, window: Sequence[int], kind: str = "max", layout: str = "NCHW") -> Tensor:
    """Non-overlapping max or average pooling over the two spatial axes.

    The spatial axes are the last two (``NCHW``) or axes 1 and 2 (``NHWC``).
    Max-pool ties route the gradient to the lowest flat index in the window.
    """
    if layout == "NHWC":
        return transpose(pool2d(transpose(x, (0, 3, 1, 2)), window, kind), (0, 2, 3, 1))
    wh, ww = (int(v) for v in window)
    *lead, h, w = x.shape
    if h % wh or w % ww:
        raise DimensionError(f"pool window {(wh, ww)} does not divide spatial extents {(h, w)}")
    if kind not in ("max", "avg"):
        raise ParameterError(f"unknown pool kind {kind!r}")
    ho, wo = h // wh, w // ww
    blocks = x.data.reshape(*lead, ho, wh, wo, ww)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, ho, wo, wh * ww)
    if kind == "avg":
        out = blocks.mean(axis=-1)

        def backward(g):
            spread = np.broadcast_to((g / (wh * ww))[..., None], g.shape + (wh * ww,))
            return (_unblock(spread, lead, ho, wo, wh, ww),)

    else:
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            routed = np.zeros(g.shape + (wh * ww,), dtype=g.dtype)
            np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
            return (_unblock(routed, lead, ho, wo, wh, ww),)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def _unblock(blocks, lead, ho, wo, wh, ww):
    arr = blocks.reshape(*lead, ho, wo, wh, ww)
    arr = np.moveaxis(arr, -2, -3)
    return arr.reshape(*lead, ho * wh, wo * ww)


def global_avg_pool(x: Tensor, layout: str = "NCHW") -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] or [N,H,W,C] -> [N,C]."""
    return mean(x, axis=(2, 3) if layout == "NCHW" else (1, 2))


def batchnorm(x: Tensor, state, channel_axis: int = 1) -> Tensor:
    """Batch normalization over every axis but ``channel_axis``.

    ``state`` is a :class:`dualpath.nn.BatchNorm` (gamma, beta, running stats,
    momentum, epsilon, training flag). In training mode the running statistics
    are updated in place by exponential moving average, or by a cumulative
    average when ``state.momentum`` is ``None``.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects [N,C] or [N,C,H,W], got {x.shape}")
    channel_axis = channel_axis % x.ndim
    if x.ndim == 2 and channel_axis != 1:
        raise DimensionError("2-D batchnorm input must be [N, C]")
    c = x.shape[channel_axis]
    if c != state.num_features:
        raise DimensionError(f"batchnorm channel mismatch: input {x.shape}, state has {state.num_features}")
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    bshape = tuple(c if a == channel_axis else 1 for a in range(x.ndim))
    gamma, beta, eps = state.gamma, state.beta, state.epsilon
    if state.training:
        count = x.size // c
        if x.shape[0] < 2:
            raise BatchSizeError(f"batchnorm in train mode needs at least 2 samples, got {x.shape[0]}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.update_running(mu, var * count / max(count - 1, 1))
    else:
        mu, var = state.running_mean.astype(x.dtype), state.running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = state.training

    def backward(g):
        dgamma = np.sum(g * xhat, axis=axes) if gamma.requires_grad else None
        dbeta = np.sum(g, axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gx = g * gamma.data.reshape(bshape)
            if training:
                m = x.size // c
                dx = (
                    inv_std.reshape(bshape)
                    / m
                    * (m * gx - gx.sum(axis=axes).reshape(bshape) - xhat * (gx * xhat).sum(axis=axes).reshape(bshape))
                )
            else:
                dx = gx * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight stored [D_in, D_out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return make_result(out, (x,), backward)


def embedding(indices: np.ndarray, table: Tensor, pad: int = -1) -> Tensor:
    """Look up rows of ``table`` [d, E] for an integer array of word indices.

    Entries equal to ``pad`` produce all-zero rows, the same as multiplying an
    all-zero one-hot row by the table. Output shape is ``indices.shape + (E,)``.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise LabelIndexError(f"word indices must be integers, got dtype {idx.dtype}")
    d = table.shape[0]
    valid = idx != pad
    bad = valid & ((idx < 0) | (idx >= d))
    if bad.any():
        raise LabelIndexError(f"word index {int(idx[bad][0])} outside vocabulary of size {d}")
    safe = np.where(valid, idx, 0)
    out = table.data[safe] * valid[..., None]

    def backward(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, safe[valid], g[valid])
        return (dtable,)

    return make_result(out, (table,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N,K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelIndexError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = log_z - shifted[rows, labels]
    out = np.asarray(losses.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - log_z[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result(out, (logits,), backward)
