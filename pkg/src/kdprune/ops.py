"""Differentiable tensor operations.

Every op takes and returns :class:`~kdprune.tensor.Tensor` and registers its
backward rule through ``Tensor._make``. Broadcasting is deliberately limited:
elementwise ``add``/``mul`` accept equal shapes or a scalar; biases and
per-channel affines are handled inside the ops that need them.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# -- elementwise ---------------------------------------------------------------


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.data.ndim == 0


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = b
        return Tensor._make(a.data + s, (a,), lambda g: (g,), "add_scalar")
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        ga = g if a.shape == g.shape else np.asarray(g.sum()).reshape(a.shape)
        gb = g if b.shape == g.shape else np.asarray(g.sum()).reshape(b.shape)
        return ga, gb

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = b
        return Tensor._make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.asarray(ga.sum()).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.asarray(gb.sum()).reshape(b.shape)
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Tensor._make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


# -- activations ---------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def relu6(a: Tensor) -> Tensor:
    mask = (a.data > 0) & (a.data < 6)
    return Tensor._make(np.clip(a.data, 0, 6), (a,), lambda g: (g * mask,), "relu6")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    return Tensor._make(out, (a,), lambda g: (g * (s + out * (1 - s)),), "silu")


# -- softmax family --------------------------------------------------------------


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise DimensionError("softmax: non-finite logits")
    s = np.exp(_log_softmax(a.data, axis))

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(a.data, axis)
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    logp = _log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def kl_div(log_q: Tensor, p) -> Tensor:
    """Batch-mean of per-sample KL(p || q), given log-probabilities of q.

    ``p`` is a probability target and receives no gradient.
    """
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=log_q.dtype)
    if p.shape != log_q.shape:
        raise DimensionError(f"kl_div: shapes {log_q.shape} and {p.shape} differ")
    n = log_q.shape[0]
    safe_log_p = np.log(np.where(p > 0, p, 1.0))
    value = (p * (safe_log_p - log_q.data)).sum() / n
    return Tensor._make(np.asarray(value, dtype=log_q.dtype), (log_q,), lambda g: (-p * (g / n),), "kl_div")


# -- dense layers ---------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._make(out, parents, backward, "linear")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return Tensor._make(out, tensors, lambda g: np.split(g, bounds, axis=axis), "concat")


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """``x[b, c, h, w] * scale[b, c]`` (squeeze-and-excitation gating)."""
    if scale.shape != x.shape[:2]:
        raise DimensionError(f"channel_scale: scale {scale.shape} vs input {x.shape}")
    s = scale.data[:, :, None, None]

    def backward(g):
        return g * s, (g * x.data).sum(axis=(2, 3))

    return Tensor._make(x.data * s, (x, scale), backward, "channel_scale")


# -- convolution ----------------------------------------------------------------


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Strided view [B, C, Ho, Wo, kh, kw] of a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _scatter_windows(dwin: np.ndarray, padded_shape, sh: int, sw: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum [B, C, Ho, Wo, kh, kw] back onto the padded grid."""
    _, _, ho, wo, kh, kw = dwin.shape
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += dwin[:, :, :, :, i, j]
    return dxp


def _crop(dxp: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = dxp.shape[2], dxp.shape[3]
    return dxp[:, :, ph : h - ph, pw : w - pw]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation via im2col + (batched) matrix multiply."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d: groups={groups} must divide in={cin} and out={cout} channels")
    if cg != cin // groups:
        raise DimensionError(f"conv2d: weight expects {cg * groups} input channels, got {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    og = cout // groups

    xp = _pad(x.data, ph, pw)
    win = _windows(xp, kh, kw, sh, sw, ho, wo)
    # cols: [G, B*Ho*Wo, Cg*kh*kw]
    cols = (
        win.reshape(b, groups, cg, ho, wo, kh, kw)
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(groups, b * ho * wo, cg * kh * kw)
    )
    wmat = weight.data.reshape(groups, og, cg * kh * kw)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # [G, N, Og]
    out = out.reshape(groups, b, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(b, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, b * ho * wo, og)
        dw = np.matmul(gmat.transpose(0, 2, 1), cols).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(gmat, wmat)  # [G, N, Cg*kh*kw]
            dwin = (
                dcols.reshape(groups, b, ho, wo, cg, kh, kw)
                .transpose(1, 0, 4, 2, 3, 5, 6)
                .reshape(b, cin, ho, wo, kh, kw)
            )
            dx = _crop(_scatter_windows(dwin, xp.shape, sh, sw), ph, pw)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._make(out, parents, backward, "conv2d")


def unfold(x: Tensor, kernel_size: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Extract sliding patches: [B, C, H, W] -> [B, C*K*K, L], channel-major like im2col."""
    if x.ndim != 4:
        raise DimensionError(f"unfold expects a 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    k = int(kernel_size)
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"unfold: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = _pad(x.data, padding, padding)
    win = _windows(xp, k, k, stride, stride, ho, wo)  # [B, C, Ho, Wo, K, K]
    out = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)

    def backward(g):
        dwin = g.reshape(b, c, k, k, ho, wo).transpose(0, 1, 4, 5, 2, 3)
        return (_crop(_scatter_windows(dwin, xp.shape, stride, stride), padding, padding),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "unfold")


def involution_aggregate(x: Tensor, kernel: Tensor, kernel_size: int, stride: int = 1) -> Tensor:
    """Apply per-pixel kernels shared across the channels of each group.

    ``x`` is [B, C, H, W]; ``kernel`` is [B, G, K*K, H', W'] with zero padding
    (K-1)//2. ``out[b, c, p] = sum_k kernel[b, g(c), k, p] * patch(x)[b, c, k, p]``.
    Computed by shifting the padded input once per kernel offset, so the
    [B, C*K*K, L] unfold buffer is never materialised.
    """
    b, c, h, w = x.shape
    k = int(kernel_size)
    pad = (k - 1) // 2
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if kernel.ndim != 5 or kernel.shape[0] != b or kernel.shape[2] != k * k or kernel.shape[3:] != (ho, wo):
        raise DimensionError(f"involution: kernel {kernel.shape} incompatible with input {x.shape}, K={k}")
    groups = kernel.shape[1]
    if c % groups:
        raise ConfigError(f"involution: groups={groups} must divide channels={c}")
    cg = c // groups
    xp = _pad(x.data, pad, pad).reshape(b, groups, cg, h + 2 * pad, w + 2 * pad)
    kd = kernel.data
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1

    out = np.zeros((b, groups, cg, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, :, i : i + span_h : stride, j : j + span_w : stride]
            out += kd[:, :, None, i * k + j] * patch

    def backward(g):
        g = g.reshape(b, groups, cg, ho, wo)
        dk = np.empty_like(kd)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(None), slice(i, i + span_h, stride), slice(j, j + span_w, stride))
                dk[:, :, i * k + j] = (g * xp[sl]).sum(axis=2)
                if dxp is not None:
                    dxp[sl] += kd[:, :, None, i * k + j] * g
        dx = None
        if dxp is not None:
            dx = _crop(dxp.reshape(b, c, h + 2 * pad, w + 2 * pad), pad, pad)
        return dx, dk

    return Tensor._make(out.reshape(b, c, ho, wo), (x, kernel), backward, "involution")


# -- normalisation ---------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    In training mode the running buffers are updated in place (unbiased
    variance, like the usual frameworks); in eval mode they are read only.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects a 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} vs {c} channels")
    axes = (0, 2, 3)
    if training:
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        n = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * m
        running_var *= 1 - momentum
        running_var += momentum * v * (n / max(n - 1, 1))
    else:
        m, v = running_mean, running_var
    inv_std = (1.0 / np.sqrt(v + eps)).astype(x.dtype)
    xhat = (x.data - m.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            n = x.size // c
            dx = (inv_std[None, :, None, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


# -- pooling ----------------------------------------------------------------------


def maxpool2d(x: Tensor, kernel_size: int, stride: int | None = None, padding: int = 0) -> Tensor:
    k = int(kernel_size)
    s = k if stride is None else int(stride)
    b, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, k, s, padding), conv_output_size(w, k, s, padding)
    xp = _pad(x.data, padding, padding, value=-np.inf)
    win = _windows(xp, k, k, s, s, ho, wo).reshape(b, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((b, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dxp = _scatter_windows(dwin.reshape(b, c, ho, wo, k, k), xp.shape, s, s)
        return (_crop(dxp, padding, padding),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def avgpool2d(x: Tensor, kernel_size: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    k = int(kernel_size)
    s = k if stride is None else int(stride)
    b, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"avgpool2d: window {k} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, k, s, padding), conv_output_size(w, k, s, padding)
    xp = _pad(x.data, padding, padding)
    out = _windows(xp, k, k, s, s, ho, wo).mean(axis=(-2, -1))

    def backward(g):
        dwin = np.broadcast_to((g / (k * k))[..., None, None], (b, c, ho, wo, k, k))
        return (_crop(_scatter_windows(dwin, xp.shape, s, s), padding, padding),)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), backward, "avgpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C]."""
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return Tensor._make(out, (x,), backward, "global_avg_pool")


__all__ = [
    "add", "neg", "mul", "matmul", "sum", "mean", "reshape", "flatten", "transpose",
    "relu", "relu6", "sigmoid", "silu", "softmax", "log_softmax", "cross_entropy", "kl_div",
    "linear", "concat", "channel_scale", "conv2d", "unfold", "involution_aggregate",
    "batchnorm2d", "maxpool2d", "avgpool2d", "global_avg_pool", "conv_output_size", "as_tensor",
]
