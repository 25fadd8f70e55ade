"""Toy-scale training loop and a synthetic paired dataset."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .blocks import depatchify, cnn_decode, mstd_layer
from .losses import (Extractor, FeatureExtractor, LossComponents, LossWeights, content_loss,
                     identity_terms, style_loss, total_loss)
from .model import Model, encode, layer_shuffle_seed
from .optim import AdamState, DEFAULT_LR, adam_step
from .scan2d import PatchSeq
from .tensor import Tensor, concat, take

Pair = tuple[np.ndarray, np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainOptions:
    iters: int = 500
    batch: int = 8
    lr: float = DEFAULT_LR
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    identity_only: bool = False
    shuffle: bool = True
    log_every: int = 0


def generate_batch(model: Model, x_c: Tensor, x_s: Tensor, seed: int, shuffle: bool = True,
                   transfer: bool = True) -> tuple[Tensor | None, Tensor, Tensor]:
    """Compute forward(c, s), forward(c, c) and forward(s, s) in one batched pass.

    Each encoder runs once over [c; s] and the decoder stack runs once over the
    stacked (content, style) pairings. All pairings share ``seed``, which makes
    the result identical to three separate ``forward`` calls.
    """
    b = x_c.shape[0]
    both = concat([x_c, x_s], axis=0)
    enc_c = encode(model, both, "content")
    enc_s = encode(model, both, "style")
    ec_c, ec_s = take(enc_c.tokens, np.arange(b), 0), take(enc_c.tokens, np.arange(b, 2 * b), 0)
    es_c, es_s = take(enc_s.tokens, np.arange(b), 0), take(enc_s.tokens, np.arange(b, 2 * b), 0)
    contents = [ec_c, ec_s] if not transfer else [ec_c, ec_c, ec_s]
    styles = [es_c, es_s] if not transfer else [es_s, es_c, es_s]
    grid = enc_c.grid
    content = PatchSeq(concat(contents, axis=0), grid)
    style = PatchSeq(concat(styles, axis=0), grid)
    for i, params in enumerate(model.decoder):
        content = mstd_layer(content, style, params, layer_shuffle_seed(seed, i), shuffle=shuffle)
    out = cnn_decode(depatchify(content), model.cnn)
    parts = [take(out, np.arange(k * b, (k + 1) * b), 0) for k in range(len(contents))]
    if transfer:
        return parts[0], parts[1], parts[2]
    return None, parts[0], parts[1]


def compute_losses(model: Model, x_c, x_s, fx: Extractor, seed: int, shuffle: bool = True,
                   identity_only: bool = False) -> LossComponents:
    x_c, x_s = Tensor(np.asarray(x_c, dtype=model.cfg.dtype)), Tensor(np.asarray(x_s, dtype=model.cfg.dtype))
    x_g, x_gc, x_gs = generate_batch(model, x_c, x_s, seed, shuffle, transfer=not identity_only)
    id1, id2 = identity_terms(x_gc, x_c, x_gs, x_s, fx)
    if identity_only:
        zero = Tensor(0.0)
        return LossComponents(zero, zero, id1, id2)
    return LossComponents(content_loss(x_g, x_c, fx), style_loss(x_g, x_s, fx), id1, id2)


def _select(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    if n <= batch:
        return rng.permutation(n)
    return rng.choice(n, size=batch, replace=False)


def train_toy(model: Model, dataset: Sequence[Pair], opts: TrainOptions = TrainOptions(),
              fx: Extractor | None = None) -> tuple[Model, list[float]]:
    """Adam on the weighted total loss; returns the model and per-iteration losses."""
    if len(dataset) == 0:
        raise ValueError("train_toy: dataset is empty")
    if opts.iters < 0 or opts.batch < 1:
        raise ValueError(f"train_toy: need iters >= 0 and batch >= 1 (got {opts.iters}, {opts.batch})")
    fx = fx if fx is not None else FeatureExtractor.seeded(opts.seed)
    contents = np.stack([np.asarray(c) for c, _ in dataset])
    styles = np.stack([np.asarray(s) for _, s in dataset])
    if contents.shape != styles.shape:
        raise ValueError(f"content batch {contents.shape} and style batch {styles.shape} differ")

    rng = np.random.default_rng(opts.seed)
    state = AdamState(lr=opts.lr)
    params = dict(model.named_parameters())
    weights = (LossWeights(0.0, 0.0, opts.weights.id1, opts.weights.id2) if opts.identity_only
               else opts.weights)
    curve: list[float] = []
    for it in range(opts.iters):
        idx = _select(len(dataset), opts.batch, rng)
        step_seed = int(np.random.SeedSequence([opts.seed, it]).generate_state(1)[0])
        model.zero_grad()
        comps = compute_losses(model, contents[idx], styles[idx], fx, step_seed, opts.shuffle,
                               opts.identity_only)
        try:
            loss = total_loss(comps, weights)
        except ValueError as exc:
            raise TrainingError(f"iteration {it}: {exc}; components {comps.values()}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"iteration {it}: total loss {value}; components {comps.values()}")
        loss.backward()
        adam_step(params, state)
        curve.append(value)
        if opts.log_every and it % opts.log_every == 0:
            print(f"iter {it:5d}  loss {value:.6f}", file=sys.stderr)
    return model, curve


def smoothed(curve: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average; element 0 equals the first loss."""
    c = np.asarray(curve, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(c)])
    idx = np.arange(1, len(c) + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)


def _smooth_field(rng: np.random.Generator, size: int, max_freq: int, terms: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    out = np.zeros((size, size))
    for _ in range(terms):
        fy, fx = rng.integers(0, max_freq + 1, 2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out


def _normalize(img: np.ndarray, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    span = img.max() - img.min()
    if span < 1e-12:
        return np.full_like(img, (lo + hi) / 2)
    return lo + (hi - lo) * (img - img.min()) / span


def make_toy_pairs(n: int = 8, size: int = 32, seed: int = 0) -> list[Pair]:
    """Smooth synthetic (content, style) pairs with values in [0, 1].

    Contents are low-frequency luminance scenes with a mild tint; styles are
    higher-frequency colour patterns with a random three-colour palette.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        base = _normalize(_smooth_field(rng, size, 1, 3))
        tint = rng.uniform(0.7, 1.0, 3)
        content = np.clip(np.stack([base * t + 0.05 * _smooth_field(rng, size, 1, 1) for t in tint]), 0.0, 1.0)
        palette = rng.uniform(0.0, 1.0, (3, 3))
        mix = np.stack([_normalize(_smooth_field(rng, size, 2, 2)) for _ in range(3)])
        weights = mix / mix.sum(0, keepdims=True)
        style = _normalize(np.einsum("kc,khw->chw", palette, weights))
        pairs.append((content, style))
    return pairs


def load_image_pairs(content_dir, style_dir) -> list[Pair]:
    """Pair the i-th sorted content file with the i-th sorted style file."""
    from pathlib import Path

    from .imageio import IMAGE_SUFFIXES, image_read

    def listing(d):
        files = sorted(p for p in Path(d).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"no images in {d}")
        return [image_read(p) for p in files]

    cs, ss = listing(content_dir), listing(style_dir)
    if len(cs) != len(ss):
        raise ValueError(f"{len(cs)} content images but {len(ss)} style images")
    return list(zip(cs, ss))


def write_toy_dataset(root, n: int = 8, size: int = 32, seed: int = 0):
    """Write ``make_toy_pairs`` as PNGs under ``root/content`` and ``root/style``."""
    from pathlib import Path

    from .imageio import image_write

    root = Path(root)
    (root / "content").mkdir(parents=True, exist_ok=True)
    (root / "style").mkdir(parents=True, exist_ok=True)
    for i, (c, s) in enumerate(make_toy_pairs(n, size, seed)):
        image_write(c, root / "content" / f"{i:03d}.png")
        image_write(s, root / "style" / f"{i:03d}.png")
    return root / "content", root / "style"
