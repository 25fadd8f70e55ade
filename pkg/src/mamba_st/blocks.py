"""VSSM blocks, encoder and style-transfer decoder layers, patch (de)embedding
and the convolutional image decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import (ConfigurationError, conv2d, depthwise_conv2d, layer_norm, linear,
                         upsample_nearest2x)
from .scan2d import PatchSeq, directions_for, scan_2d
from .ssm import SSMLayerParams
from .tensor import Module, ShapeError, Tensor, clamp, relu, reshape, silu, take, transpose

CONV_KERNEL = 3
BIAS_JITTER = 0.01


def _param(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)


def _const(shape, value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def tokens_to_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """[..., h*w, d] -> [..., d, h, w]"""
    h, w = grid
    lead = tokens.shape[:-2]
    d = tokens.shape[-1]
    x = reshape(tokens, lead + (h, w, d))
    n = x.ndim
    return transpose(x, tuple(range(n - 3)) + (n - 1, n - 3, n - 2))


def map_to_tokens(fmap: Tensor) -> Tensor:
    """[..., d, h, w] -> [..., h*w, d]"""
    n = fmap.ndim
    d, h, w = fmap.shape[-3:]
    x = transpose(fmap, tuple(range(n - 3)) + (n - 2, n - 1, n - 3))
    return reshape(x, fmap.shape[:-3] + (h * w, d))


class VSSMBlockParams(Module):
    def __init__(self, d_model: int, n_state: int, expansion: int = 2, scan_directions: int = 4,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        d_inner = expansion * d_model
        self.d_model = d_model
        self.d_inner = d_inner
        self.in_x_w = _param(rng, (d_model, d_inner), 1.0 / np.sqrt(d_model), dtype)
        self.in_x_b = _const(d_inner, 0.0, dtype)
        self.in_z_w = _param(rng, (d_model, d_inner), 1.0 / np.sqrt(d_model), dtype)
        self.in_z_b = _const(d_inner, 0.0, dtype)
        self.conv = _param(rng, (d_inner, CONV_KERNEL, CONV_KERNEL), 1.0 / CONV_KERNEL, dtype)
        self.ssm = [SSMLayerParams(d_inner, n_state, rng, dtype) for _ in range(scan_directions)]
        self.norm_g = _const(d_inner, 1.0, dtype)
        self.norm_b = _const(d_inner, 0.0, dtype)
        self.out_w = _param(rng, (d_inner, d_model), 1.0 / np.sqrt(d_inner), dtype)
        self.out_b = _const(d_model, 0.0, dtype)


def _check_width(p: PatchSeq, params: VSSMBlockParams) -> None:
    if p.width != params.d_model:
        raise ShapeError(f"token width {p.width} != block width {params.d_model}")


def _conv_silu(tokens: Tensor, grid: tuple[int, int], params: VSSMBlockParams) -> Tensor:
    fmap = depthwise_conv2d(tokens_to_map(tokens, grid), params.conv)
    return silu(map_to_tokens(fmap))


def _readout(y: Tensor, z: Tensor, params: VSSMBlockParams) -> Tensor:
    y = layer_norm(y, params.norm_g, params.norm_b)
    y = y * silu(z)
    return linear(y, params.out_w, params.out_b)


def base_vssm(p: PatchSeq, params: VSSMBlockParams) -> PatchSeq:
    """Single-stream block: projections, conv, multi-direction scan with D skip, gated readout."""
    _check_width(p, params)
    x = linear(p.tokens, params.in_x_w, params.in_x_b)
    z = linear(p.tokens, params.in_z_w, params.in_z_b)
    x = p.with_tokens(_conv_silu(x, p.grid, params))
    y = scan_2d(params.ssm, x, x, use_skip=True, directions=directions_for(len(params.ssm)))
    return p.with_tokens(_readout(y.tokens, z, params))


def st_vssm(content: PatchSeq, style: PatchSeq, params: VSSMBlockParams) -> PatchSeq:
    """Two-stream block: state driven and fed by style, read out through content.

    B and delta come from the style stream, C from the content stream; the
    recurrence consumes the style tokens and the gate comes from content.
    No D skip term.
    """
    _check_width(content, params)
    _check_width(style, params)
    if content.grid != style.grid:
        raise ShapeError(f"content grid {content.grid} != style grid {style.grid}")
    x = linear(content.tokens, params.in_x_w, params.in_x_b)
    s = linear(style.tokens, params.in_x_w, params.in_x_b)
    z = linear(content.tokens, params.in_z_w, params.in_z_b)
    x = content.with_tokens(_conv_silu(x, content.grid, params))
    s = style.with_tokens(_conv_silu(s, style.grid, params))
    y = scan_2d(params.ssm, driver=s, scan_input=s, content=x, use_skip=False,
                directions=directions_for(len(params.ssm)))
    return content.with_tokens(_readout(y.tokens, z, params))


@dataclass
class ShufflePlan:
    permutation: np.ndarray
    seed: int

    def inverse(self) -> np.ndarray:
        return np.argsort(self.permutation)


def shuffle_style(style: PatchSeq, seed: int) -> tuple[PatchSeq, ShufflePlan]:
    n = style.tokens.shape[-2]
    perm = np.random.default_rng(seed).permutation(n)
    return style.with_tokens(take(style.tokens, perm, axis=-2)), ShufflePlan(perm, int(seed))


class EncoderLayerParams(Module):
    def __init__(self, d_model: int, n_state: int, expansion: int = 2, scan_directions: int = 4,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        self.norm_g = _const(d_model, 1.0, dtype)
        self.norm_b = _const(d_model, 0.0, dtype)
        self.block = VSSMBlockParams(d_model, n_state, expansion, scan_directions, rng, dtype)


class MSTDLayerParams(EncoderLayerParams):
    """Same layout as an encoder layer. The two-stream block has no D skip, so
    D is kept as a frozen tensor rather than a trainable parameter."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for ssm in self.block.ssm:
            ssm.D_skip.requires_grad = False


def encoder_layer(p: PatchSeq, params: EncoderLayerParams) -> PatchSeq:
    normed = p.with_tokens(layer_norm(p.tokens, params.norm_g, params.norm_b))
    return p.with_tokens(p.tokens + base_vssm(normed, params.block).tokens)


def mstd_layer(content: PatchSeq, style: PatchSeq, params: MSTDLayerParams, seed: int | None = None,
               shuffle: bool = True) -> PatchSeq:
    if content.grid != style.grid:
        raise ShapeError(f"content grid {content.grid} != style grid {style.grid}")
    c = content.with_tokens(layer_norm(content.tokens, params.norm_g, params.norm_b))
    s = style.with_tokens(layer_norm(style.tokens, params.norm_g, params.norm_b))
    if shuffle:
        if seed is None:
            raise ValueError("mstd_layer: shuffling needs a seed")
        s, _ = shuffle_style(s, seed)
    return content.with_tokens(content.tokens + st_vssm(c, s, params.block).tokens)


class PatchEmbedParams(Module):
    def __init__(self, patch_size: int, d_model: int, rng: np.random.Generator | None = None,
                 dtype=np.float64, channels: int = 3):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = channels * patch_size * patch_size
        self.patch_size = patch_size
        self.channels = channels
        self.weight = _param(rng, (fan_in, d_model), 1.0 / np.sqrt(fan_in), dtype)
        self.bias = _const(d_model, 0.0, dtype)


def patch_embed(image: Tensor, proj: PatchEmbedParams) -> PatchSeq:
    """Cut [..., C, H, W] into raster-ordered p x p patches and project each one."""
    p = proj.patch_size
    c, H, W = image.shape[-3:]
    if c != proj.channels:
        raise ShapeError(f"image has {c} channels, patch embedding expects {proj.channels}")
    if H % p or W % p:
        raise ShapeError(f"image size {H}x{W} is not divisible by patch size {p}; "
                         f"center-crop to {H - H % p}x{W - W % p} first")
    h, w = H // p, W // p
    lead = image.shape[:-3]
    n = len(lead)
    x = reshape(image, lead + (c, h, p, w, p))
    x = transpose(x, tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4))
    x = reshape(x, lead + (h * w, c * p * p))
    return PatchSeq(linear(x, proj.weight, proj.bias), (h, w))


def depatchify(seq: PatchSeq) -> Tensor:
    return tokens_to_map(seq.tokens, seq.grid)


class CNNDecoderParams(Module):
    """log2(p) stages of (conv, ReLU, 2x upsample) halving channels, then a conv to RGB."""

    def __init__(self, d_model: int, patch_size: int, rng: np.random.Generator | None = None,
                 dtype=np.float64, out_channels: int = 3):
        rng = rng if rng is not None else np.random.default_rng(0)
        stages = int(round(np.log2(patch_size))) if patch_size >= 1 else -1
        if stages < 0 or 2 ** stages != patch_size:
            raise ConfigurationError(f"CNN decoder needs a power-of-two patch size, got {patch_size}")
        if d_model >> stages < 1:
            raise ConfigurationError(f"width {d_model} cannot be halved {stages} times")
        k = CONV_KERNEL
        self.d_model = d_model
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c = d_model
        for _ in range(stages):
            self.weights.append(_param(rng, (c // 2, c, k, k), np.sqrt(2.0 / (c * k * k)), dtype))
            # small nonzero biases keep pre-activations off the ReLU kink where
            # an upstream window is entirely zero
            self.biases.append(_param(rng, c // 2, BIAS_JITTER, dtype))
            c //= 2
        self.weights.append(_param(rng, (out_channels, c, k, k), np.sqrt(1.0 / (c * k * k)), dtype))
        self.biases.append(_const(out_channels, 0.5, dtype))

    @property
    def stages(self) -> int:
        return len(self.weights) - 1


def cnn_decode(fmap: Tensor, params: CNNDecoderParams) -> Tensor:
    if fmap.ndim < 3 or fmap.shape[-3] != params.d_model:
        raise ShapeError(f"feature map {fmap.shape} does not have {params.d_model} channels")
    x = fmap
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        x = upsample_nearest2x(relu(conv2d(x, w, b)))
    x = conv2d(x, params.weights[-1], params.biases[-1])
    return clamp(x, 0.0, 1.0)
