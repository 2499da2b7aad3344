"""Differentiable layer ops on :class:`~cbs.autodiff.Node` values (NCHW)."""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import constant, forward_record
from .exceptions import ContractError, ShapeError
from .tensor import DTYPE, check_finite


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    # (N, C, Hp, Wp) -> (N*ho*wo, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(dcols, xp_shape, kh, kw, stride, ho, wo):
    n, c = xp_shape[:2]
    dcols = dcols.reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp


@dataclass
class Conv2dParams:
    weight: object  # Parameter[C_out, C_in, kH, kW]
    bias: object  # Parameter[C_out]
    stride: int = 1
    padding: int = 0


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation (no kernel flip) with zero padding and per-channel bias."""
    x, weight = constant(x), constant(weight)
    xv, wv = x.value, weight.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and 4-d weight, got {xv.shape}, {wv.shape}")
    n, c, h, w = xv.shape
    co, ci, kh, kw = wv.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be {ho}x{wo} for input {h}x{w}")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wv.reshape(co, -1)
    out = cols @ wmat.T
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    inputs = (x, weight)
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.value.reshape(1, co, 1, 1)
        inputs = inputs + (bias,)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        dw = (g2.T @ cols).reshape(wv.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = _col2im(g2 @ wmat, xp.shape, kh, kw, stride, ho, wo)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = (dx, dw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return forward_record("conv2d", check_finite(out, "conv2d"), inputs, vjp)


def maxpool2d(x, window=2, stride=None, return_indices=False):
    """Max over ``window x window`` patches; ties go to the first row-major index."""
    x = constant(x)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ShapeError("maxpool2d: window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.value, (window, window), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.value.dtype

    def vjp(g):
        dx = np.zeros(shape, dtype=dtype)
        for i in range(window):
            for j in range(window):
                hit = idx == i * window + j
                if hit.any():
                    dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        return (dx,)

    node = forward_record("maxpool2d", out, (x,), vjp)
    return (node, idx) if return_indices else node


def relu(x):
    x = constant(x)
    mask = x.value > 0
    return forward_record("relu", np.where(mask, x.value, 0).astype(x.value.dtype), (x,),
                          lambda g: (g * mask,))


def linear(x, weight, bias=None):
    """``x @ W + b`` with ``W`` stored as ``[in, out]``."""
    x, weight = constant(x), constant(weight)
    xv, wv = x.value, weight.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"linear: {xv.shape} @ {wv.shape}")
    out = xv @ wv
    inputs = (x, weight)
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (wv.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({wv.shape[1]},)")
        out = out + bias.value
        inputs = inputs + (bias,)

    def vjp(g):
        grads = (g @ wv.T, xv.T @ g)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return forward_record("linear", check_finite(out, "linear"), inputs, vjp)


def global_avg_pool(x):
    x = constant(x)
    n, c, h, w = x.shape
    return forward_record(
        "global_avg_pool", x.value.mean(axis=(2, 3)), (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.value.dtype),),
    )


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels, momentum=0.1, eps=1e-5):
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE), momentum, eps)


def batchnorm2d(x, gamma, beta, state):
    """Per-channel batch normalization.

    Training mode normalizes by batch statistics and folds them into the
    running estimates (the running variance uses the unbiased estimator).
    Eval mode is a fixed affine map built from the running estimates.
    """
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    xv = x.value
    n, c, h, w = xv.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    g4 = gamma.value.reshape(1, c, 1, 1)
    b4 = beta.value.reshape(1, c, 1, 1)

    if not state.training:
        inv = 1.0 / np.sqrt(state.running_var.astype(xv.dtype) + state.eps)
        xhat = (xv - state.running_mean.astype(xv.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * g4 + b4

        def vjp_eval(gr):
            return (gr * g4 * inv.reshape(1, c, 1, 1),
                    (gr * xhat).sum(axis=(0, 2, 3)),
                    gr.sum(axis=(0, 2, 3)))

        return forward_record("batchnorm2d", out, (x, gamma, beta), vjp_eval)

    m = n * h * w
    if m < 2:
        raise ContractError("batchnorm2d needs at least 2 values per channel in training mode")
    mean = xv.mean(axis=(0, 2, 3))
    var = xv.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat * g4 + b4
    mom = state.momentum
    state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(DTYPE)
    state.running_var = ((1 - mom) * state.running_var + mom * var * (m / (m - 1))).astype(DTYPE)

    def vjp(gr):
        dxhat = gr * g4
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
        return dx, (gr * xhat).sum(axis=(0, 2, 3)), gr.sum(axis=(0, 2, 3))

    return forward_record("batchnorm2d", out, (x, gamma, beta), vjp)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = constant(logits)
    labels = np.asarray(labels)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross entropy: logits {z.shape}, labels {labels.shape}")
    k = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    n = z.shape[0]
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return forward_record("softmax_cross_entropy", check_finite(loss, "loss"), (logits,), vjp)
