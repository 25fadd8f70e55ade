"""Full style-transfer pipeline and its configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .blocks import (CNNDecoderParams, EncoderLayerParams, MSTDLayerParams, PatchEmbedParams,
                     cnn_decode, depatchify, encoder_layer, mstd_layer, patch_embed)
from .tensor import Module, ShapeError, Tensor, _wrap

PRECISIONS = {"f64": np.float64, "f32": np.float32}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 192
    n_state: int = 16
    patch_size: int = 8
    encoder_layers: int = 3
    decoder_layers: int = 3
    scan_directions: int = 4
    expansion: int = 2
    precision: str = "f64"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        problems = []
        if self.d_model < 1:
            problems.append(f"d_model must be >= 1 (got {self.d_model})")
        if self.n_state < 1:
            problems.append(f"n_state must be >= 1 (got {self.n_state})")
        if self.patch_size < 1 or self.patch_size & (self.patch_size - 1):
            problems.append(f"patch_size must be a power of two >= 1 (got {self.patch_size})")
        elif self.d_model >> int(np.log2(self.patch_size)) < 1:
            problems.append(f"d_model {self.d_model} too small for {int(np.log2(self.patch_size))} "
                            "channel-halving decoder stages")
        if self.encoder_layers < 1:
            problems.append(f"encoder_layers must be >= 1 (got {self.encoder_layers})")
        if self.decoder_layers < 1:
            problems.append(f"decoder_layers must be >= 1 (got {self.decoder_layers})")
        if self.scan_directions not in (1, 2, 4):
            problems.append(f"scan_directions must be 1, 2 or 4 (got {self.scan_directions})")
        if self.expansion < 1:
            problems.append(f"expansion must be >= 1 (got {self.expansion})")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {sorted(PRECISIONS)} (got {self.precision!r})")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data).validate()


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        dt = cfg.dtype
        layer_args = (cfg.d_model, cfg.n_state, cfg.expansion, cfg.scan_directions)
        self.content_embed = PatchEmbedParams(cfg.patch_size, cfg.d_model, rng, dt)
        self.style_embed = PatchEmbedParams(cfg.patch_size, cfg.d_model, rng, dt)
        self.content_encoder = [EncoderLayerParams(*layer_args, rng, dt) for _ in range(cfg.encoder_layers)]
        self.style_encoder = [EncoderLayerParams(*layer_args, rng, dt) for _ in range(cfg.encoder_layers)]
        self.decoder = [MSTDLayerParams(*layer_args, rng, dt) for _ in range(cfg.decoder_layers)]
        self.cnn = CNNDecoderParams(cfg.d_model, cfg.patch_size, rng, dt)

    def __call__(self, content_img, style_img, seed: int = 0, shuffle: bool = True) -> Tensor:
        return forward(self, content_img, style_img, seed, shuffle)


def build_model(cfg: ModelConfig, seed: int | None = None) -> Model:
    return Model(cfg, seed)


def layer_shuffle_seed(seed: int, layer: int) -> int:
    """Independent per-layer shuffle seed derived from the forward seed."""
    return int(np.random.SeedSequence([int(seed), layer]).generate_state(1)[0])


def encode(model: Model, image: Tensor, stream: str):
    embed, layers = ((model.content_embed, model.content_encoder) if stream == "content"
                     else (model.style_embed, model.style_encoder))
    seq = patch_embed(image, embed)
    for params in layers:
        seq = encoder_layer(seq, params)
    return seq


def forward(model: Model, content_img, style_img, seed: int = 0, shuffle: bool = True) -> Tensor:
    """Stylize ``content_img`` with ``style_img``; both [..., 3, H, W] in [0, 1]."""
    content_img, style_img = _wrap(content_img), _wrap(style_img)
    if content_img.shape[-3:-2] != (3,) or style_img.shape[-3:-2] != (3,):
        raise ShapeError(f"expected RGB images, got {content_img.shape} and {style_img.shape}")
    content = encode(model, content_img, "content")
    style = encode(model, style_img, "style")
    if content.grid != style.grid:
        raise ShapeError(f"content grid {content.grid} and style grid {style.grid} differ; "
                         "crop or resize the style image first")
    for i, params in enumerate(model.decoder):
        content = mstd_layer(content, style, params, layer_shuffle_seed(seed, i), shuffle=shuffle)
    return cnn_decode(depatchify(content), model.cnn)
