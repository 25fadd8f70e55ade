"""Neural-network primitives built on :mod:`mamba_st.tensor`.

Convolutions are written as explicit shifted-window sums (depthwise) or as
an im2col matrix product (dense); both carry hand-written backward passes.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _wrap, matmul, reshape, sqrt

LAYER_NORM_EPS = 1e-5


class ConfigurationError(ValueError):
    pass


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: ``x @ weight + bias``."""
    x = _wrap(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1:]} does not match weight {weight.shape}")
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias
    if squeeze:
        out = reshape(out, (weight.shape[1],))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(a, widths)


def depthwise_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel k x k convolution (cross-correlation) with zero "same" padding.

    x: [..., d, h, w]; kernels: [d, k, k].
    """
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ShapeError(f"depthwise kernels must be [d, k, k], got {kernels.shape}")
    k = kernels.shape[1]
    if k % 2 == 0:
        raise ConfigurationError(f"depthwise kernel size must be odd, got {k}")
    if x.ndim < 3 or x.shape[-3] != kernels.shape[0]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} vs kernels {kernels.shape}")
    pad = (k - 1) // 2
    h, w = x.shape[-2:]
    xp = _pad_hw(x.data, pad)
    kd = kernels.data
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, kd.dtype))
    for i in range(k):
        for j in range(k):
            out += kd[:, i, j, None, None] * xp[..., :, i:i + h, j:j + w]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gk = np.empty(kd.shape, dtype=g.dtype)
        batch_axes = tuple(range(g.ndim - 3))
        for i in range(k):
            for j in range(k):
                gxp[..., :, i:i + h, j:j + w] += kd[:, i, j, None, None] * g
                gk[:, i, j] = (g * xp[..., :, i:i + h, j:j + w]).sum(axis=batch_axes + (-2, -1))
        gx = gxp[..., pad:pad + h, pad:pad + w] if pad else gxp
        return np.ascontiguousarray(gx), gk

    return Tensor.from_op(out, (x, kernels), backward, flops=2 * out.size * k * k)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # [..., c, ph, pw] -> [..., c*k*k, h*w] with (c, i, j) row order
    windows = np.stack([xp[..., :, i:i + h, j:j + w] for i in range(k) for j in range(k)], axis=-3)
    lead = xp.shape[:-2]
    return windows.reshape(lead[:-1] + (lead[-1] * k * k, h * w))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense k x k convolution, stride 1, zero "same" padding.

    x: [..., c_in, h, w]; weight: [c_out, c_in, k, k]; bias: [c_out].
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be [c_out, c_in, k, k], got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {k}")
    if x.ndim < 3 or x.shape[-3] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    pad = (k - 1) // 2
    h, w = x.shape[-2:]
    xp = _pad_hw(x.data, pad)
    cols = _im2col(xp, k, h, w)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(x.shape[:-3] + (c_out, h, w))

    def backward(g):
        g2 = g.reshape(g.shape[:-3] + (c_out, h * w))
        gw = np.matmul(g2, np.swapaxes(cols, -1, -2))
        gw = gw.reshape((-1, c_out, c_in * k * k)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2).reshape(g.shape[:-3] + (c_in, k * k, h, w))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[..., :, i:i + h, j:j + w] += gcols[..., :, i * k + j, :, :]
        gx = gxp[..., pad:pad + h, pad:pad + w] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.reshape((-1, c_out, h * w)).sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, flops=2 * out.size * c_in * k * k)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return Tensor.from_op(out, (x,), backward)


def avg_pool2x(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x needs even spatial extents, got {(h, w)}")
    out = x.data.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return Tensor.from_op(out, (x,), backward, flops=x.size)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def mse(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return (diff * diff).mean()
