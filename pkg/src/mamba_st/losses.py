"""Perceptual, moment-matching and identity losses over a frozen feature extractor.

Every ``||a - b||`` in the loss definitions is read as a mean squared
deviation. Images and feature maps are [..., C, H, W].
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Protocol, Sequence

import numpy as np

from .functional import avg_pool2x, conv2d, mse
from .tensor import Module, Tensor, _wrap, no_grad, relu, sqrt

STD_EPS = 1e-6


class Extractor(Protocol):
    n_taps: int
    provenance: str

    def __call__(self, image: Tensor) -> list[Tensor]: ...


class FeatureExtractor(Module):
    """Frozen conv pyramid: (3x3 conv, ReLU) per tap, 2x average-pool between taps."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 provenance: str = "seeded-random"):
        if not weights or len(weights) != len(biases):
            raise ValueError("feature extractor needs at least one tap and one bias per tap")
        self.weights = [Tensor(w) for w in weights]
        self.biases = [Tensor(b) for b in biases]
        self.provenance = provenance

    @classmethod
    def seeded(cls, seed: int = 0, channels: Sequence[int] = (8, 16, 32, 64), in_channels: int = 3,
               dtype=np.float64) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        c = in_channels
        for out in channels:
            weights.append(rng.normal(0.0, np.sqrt(2.0 / (c * 9)), (out, c, 3, 3)).astype(dtype))
            biases.append(rng.normal(0.0, 0.01, out).astype(dtype))
            c = out
        return cls(weights, biases, "seeded-random")

    @classmethod
    def from_checkpoint(cls, path) -> "FeatureExtractor":
        """Load external weights stored as ``weights.<i>`` / ``biases.<i>`` tensors."""
        from .checkpoint import read_tensors

        _, tensors = read_tensors(path)
        n = sum(1 for name in tensors if name.startswith("weights."))
        weights = [tensors[f"weights.{i}"] for i in range(n)]
        biases = [tensors[f"biases.{i}"] for i in range(n)]
        return cls(weights, biases, "external-weights")

    def save(self, path) -> None:
        from .checkpoint import write_tensors

        tensors = dict(self.named_tensors(frozen=True))
        write_tensors(path, {"kind": "feature-extractor", "provenance": self.provenance},
                      {k: v.data for k, v in tensors.items()})

    @property
    def n_taps(self) -> int:
        return len(self.weights)

    def __call__(self, image: Tensor) -> list[Tensor]:
        x = _wrap(image)
        taps = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i:
                x = avg_pool2x(x)
            x = relu(conv2d(x, w, b))
            taps.append(x)
        return taps


class IdentityExtractor:
    """Single tap returning the image itself; used to hand-check the losses."""

    n_taps = 1
    provenance = "identity"

    def __call__(self, image: Tensor) -> list[Tensor]:
        return [_wrap(image)]


@dataclass(frozen=True)
class LossWeights:
    content: float = 7.0
    style: float = 10.0
    id1: float = 70.0
    id2: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class LossComponents:
    content: Tensor
    style: Tensor
    id1: Tensor
    id2: Tensor

    def values(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}


def _features(fx: Extractor, image, frozen_input: bool) -> list[Tensor]:
    if frozen_input:
        with no_grad():
            return fx(image)
    return fx(image)


def feature_distance(fa: Sequence[Tensor], fb: Sequence[Tensor]) -> Tensor:
    return sum((mse(a, b) for a, b in zip(fa, fb)), Tensor(0.0)) / float(len(fa))


def content_loss(x_g, x_c, fx: Extractor) -> Tensor:
    return feature_distance(fx(_wrap(x_g)), fx(_wrap(x_c)))


def channel_moments(fmap: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and population standard deviation."""
    mu = fmap.mean(axis=(-2, -1), keepdims=True)
    centered = fmap - mu
    var = (centered * centered).mean(axis=(-2, -1))
    return mu.reshape(mu.shape[:-2]), sqrt(var + STD_EPS)


def moment_distance(fa: Sequence[Tensor], fb: Sequence[Tensor]) -> Tensor:
    total = Tensor(0.0)
    for a, b in zip(fa, fb):
        mu_a, sd_a = channel_moments(a)
        mu_b, sd_b = channel_moments(b)
        total = total + mse(mu_a, mu_b) + mse(sd_a, sd_b)
    return total / float(len(fa))


def style_loss(x_g, x_s, fx: Extractor) -> Tensor:
    return moment_distance(fx(_wrap(x_g)), fx(_wrap(x_s)))


def identity_terms(x_gc, x_c, x_gs, x_s, fx: Extractor) -> tuple[Tensor, Tensor]:
    x_c, x_s = _wrap(x_c), _wrap(x_s)
    id1 = mse(x_gc, x_c) + mse(x_gs, x_s)
    f_c = _features(fx, x_c, not x_c.requires_grad)
    f_s = _features(fx, x_s, not x_s.requires_grad)
    id2 = feature_distance(fx(x_gc), f_c) + feature_distance(fx(x_gs), f_s)
    return id1, id2


def identity_losses(model, x_c, x_s, fx: Extractor, seed: int = 0, shuffle: bool = True
                    ) -> tuple[Tensor, Tensor]:
    """Reconstruction losses when each image serves as its own style.

    ``model`` is any callable ``(content, style, seed, shuffle) -> image``.
    """
    x_gc = model(x_c, x_c, seed, shuffle)
    x_gs = model(x_s, x_s, seed, shuffle)
    return identity_terms(x_gc, x_c, x_gs, x_s, fx)


def total_loss(components: LossComponents, w: LossWeights = LossWeights()) -> Tensor:
    for f in fields(components):
        value = getattr(components, f.name).data
        if not np.all(np.isfinite(value)):
            raise ValueError(f"loss component {f.name!r} is not finite ({value})")
    return (components.content * w.content + components.style * w.style
            + components.id1 * w.id1 + components.id2 * w.id2)
