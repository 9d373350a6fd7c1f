"""Differentiable primitives used by the backbone, discriminator and losses.

All spatial tensors use the ``[batch, channel, height, width]`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
L2_EPS = 1e-12


class ShapeError(ValueError):
    pass


# -- convolution ---------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - ((k - 1) * dilation + 1)) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Dilated 2-D cross-correlation, ``y[i,j] = sum_mn x[i + r*m, j + r*n] * w[m,n]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d needs dilation >= 1, stride >= 1, padding >= 0")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if eh > hp or ew > wp:
        raise ShapeError(f"effective kernel {eh}x{ew} exceeds padded input {hp}x{wp}")
    ho = (hp - eh) // stride + 1
    wo = (wp - ew) // stride + 1

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(cin, b * ho * wo)
    else:
        cols6 = np.empty((cin, kh, kw, b, ho, wo), dtype=xd.dtype)
        for m in range(kh):
            r0 = m * dilation
            for n in range(kw):
                c0 = n * dilation
                patch = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
                cols6[:, m, n] = patch.transpose(1, 0, 2, 3)
        cols = cols6.reshape(cin * kh * kw, b * ho * wo)
    w2 = kernel.data.reshape(cout, -1)
    out = np.ascontiguousarray((w2 @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))

    x_tracked, k_tracked = x.requires_grad, kernel.requires_grad

    def grad(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if k_tracked else None
        gx = None
        if x_tracked:
            dcols = (w2.T @ g2).reshape(cin, kh, kw, b, ho, wo)
            gxp = np.zeros((b, cin, hp, wp), dtype=g.dtype)
            for m in range(kh):
                r0 = m * dilation
                for n in range(kw):
                    c0 = n * dilation
                    gxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dcols[
                        :, m, n
                    ].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return make_result(out, (x, kernel), grad, "conv2d")


# -- normalization ---------------------------------------------------------------


@dataclass
class BNStats:
    """Per-channel running statistics of one batch-norm site."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BNStats | None,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (batch, height, width).

    Train mode normalizes with biased batch variance and (if ``update_stats``) folds
    the batch statistics into ``stats`` (unbiased variance, exponential momentum).
    Eval mode uses ``stats`` as-is.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [b,c,h,w], got {x.shape}")
    b, c, h, w = x.shape
    n = b * h * w
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    if mode == "train":
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if stats is not None and update_stats:
            stats.mean = ((1 - momentum) * stats.mean + momentum * mean).astype(stats.mean.dtype)
            stats.var = ((1 - momentum) * stats.var + momentum * var * (n / (n - 1))).astype(stats.var.dtype)
    elif mode == "eval":
        if stats is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        mean, var = stats.mean, stats.var
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = (xd - mean.reshape(1, c, 1, 1).astype(xd.dtype)) * invstd
    out = gd * xhat + bd

    def grad(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if mode == "train":
            gx = (gd * invstd / n) * (n * g - gbeta.reshape(1, c, 1, 1) - xhat * ggamma.reshape(1, c, 1, 1))
        else:
            gx = g * gd * invstd
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), grad, "batch_norm")


def l2_normalize(x: Tensor, axis: int = 1, eps: float = L2_EPS) -> Tensor:
    """Divide each vector along ``axis`` by ``max(||v||_2, eps)``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps).astype(xd.dtype)
    y = xd / denom

    def grad(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / denom),)

    return make_result(y, (x,), grad, "l2_normalize")


# -- activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0 < slope < 1:
        raise ValueError("leaky_relu slope must lie in (0, 1)")
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data).astype(x.data.dtype)
    return make_result(out, (x,), lambda g: (np.where(mask, g, slope * g),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    # keep the range open at both ends even where exp under/overflows
    fi = np.finfo(xd.dtype)
    out = np.clip(out, fi.tiny, 1.0 - fi.epsneg)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# -- pooling / resampling ----------------------------------------------------------


def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; ties route the gradient to the first cell in row-major order."""
    stride = stride or window
    b, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w}")
    xd = x.data
    xp = xd
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    hp, wp = xp.shape[2:]
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def grad(g):
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + idx // window
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + idx % window
        plane = (np.arange(b * c).reshape(b, c, 1, 1)) * (hp * wp)
        flat_idx = (plane + rows * wp + cols).ravel()
        gxp = np.bincount(flat_idx, weights=g.ravel(), minlength=b * c * hp * wp).astype(g.dtype)
        gxp = gxp.reshape(b, c, hp, wp)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(np.ascontiguousarray(out), (x,), grad, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """``[b,c,h,w] -> [b,c]`` channel means."""
    b, c, h, w = x.shape
    scale = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))
    return make_result(
        out,
        (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], (b, c, h, w)),),
        "global_avg_pool",
    )


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` resampling matrix (half-pixel centers, edge clamp)."""
    if n_in < 1 or n_out < 1:
        raise ShapeError("bilinear resize needs non-empty extents")
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    return a.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling to any non-empty extent (no antialiasing)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("zero-size output")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "bilinear")
    ah = bilinear_matrix(h, out_h, x.data.dtype)
    aw = bilinear_matrix(w, out_w, x.data.dtype)
    out = ah @ x.data @ aw.T
    return make_result(out, (x,), lambda g: (ah.T @ g @ aw,), "bilinear")


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ShapeError("zero-size output")
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    return bilinear_resize(x, out_h, out_w)


# -- dense layers ----------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x:[b,n]``, ``weight:[m,n]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return make_result(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = out + bias.data
    return make_result(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "linear")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval mode is identity."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must lie in [0, 1)")
    if mode == "eval" or p == 0:
        return make_result(x.data, (x,), lambda g: (g,), "dropout")
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits:[b,k]`` against integer ``labels``."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def grad(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return make_result(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad, "cross_entropy")
