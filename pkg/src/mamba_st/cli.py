"""Command-line entry point: ``mamba-st <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 bad input or usage.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Sequence

import numpy as np

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
SEED_ENV = "MAMBA_ST_SEED"


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _lengths(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"lengths must be positive integers, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mamba-st", description="State-space style transfer toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("stylize", help="stylize one content image with one style image")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-shuffle", action="store_true", help="keep style tokens in scan order")

    p = sub.add_parser("train-toy", help="train a model on paired image directories")
    p.add_argument("--content-dir", required=True)
    p.add_argument("--style-dir", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--identity-only", action="store_true", help="train on the identity losses alone")
    p.add_argument("--loss-log", default=None, help="write the per-iteration loss curve as CSV")

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("bench", help="scan vs. attention scaling sweep")
    p.add_argument("--lengths", type=_lengths, default=[64, 256, 1024, 4096])
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--n-state", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("artfid", help="combine FID and LPIPS into ArtFID")
    p.add_argument("--fid", type=float, required=True)
    p.add_argument("--lpips", type=float, required=True)
    return parser


def _fit_style(style: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Centre-crop (or, if too small, resize) the style image to the content size."""
    from PIL import Image

    from .imageio import quantize

    H, W = shape
    h, w = style.shape[-2:]
    if (h, w) == (H, W):
        return style
    if h >= H and w >= W:
        top, left = (h - H) // 2, (w - W) // 2
        print(f"notice: center-cropping style from {h}x{w} to {H}x{W}", file=sys.stderr)
        return style[:, top:top + H, left:left + W]
    print(f"notice: resizing style from {h}x{w} to {H}x{W}", file=sys.stderr)
    im = Image.fromarray(quantize(style), mode="RGB").resize((W, H), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0


def cmd_stylize(args) -> int:
    from .checkpoint import load_checkpoint
    from .imageio import center_crop, image_read, image_write
    from .model import forward
    from .tensor import no_grad

    model, cfg = load_checkpoint(args.checkpoint)
    content = center_crop(image_read(args.content), cfg.patch_size, "content")
    style = _fit_style(image_read(args.style), content.shape[-2:])
    seed = args.seed if args.seed is not None else default_seed()
    with no_grad():
        out = forward(model, content.astype(cfg.dtype), style.astype(cfg.dtype), seed,
                      shuffle=not args.no_shuffle)
    image_write(out.data, args.out)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .checkpoint import save_checkpoint
    from .imageio import center_crop
    from .model import ModelConfig, build_model
    from .train import TrainOptions, load_image_pairs, smoothed, train_toy

    seed = args.seed if args.seed is not None else default_seed()
    cfg = ModelConfig(d_model=args.width, seed=seed).validate()
    pairs = [(center_crop(c, cfg.patch_size, "content"), center_crop(s, cfg.patch_size, "style"))
             for c, s in load_image_pairs(args.content_dir, args.style_dir)]
    shapes = {img.shape for pair in pairs for img in pair}
    if len(shapes) != 1:
        raise InputError(f"training images must share one size after cropping, got {sorted(shapes)}")
    opts = TrainOptions(iters=args.iters, batch=args.batch, lr=args.lr, seed=seed,
                        identity_only=args.identity_only)
    model, curve = train_toy(build_model(cfg), pairs, opts)
    save_checkpoint(model, cfg, args.out_checkpoint)
    if args.loss_log:
        with open(args.loss_log, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("iteration", "loss"))
            w.writerows(enumerate(curve))
    if curve:
        sm = smoothed(curve)
        print(f"iterations {len(curve)}  initial loss {curve[0]:.6f}  final smoothed loss {sm[-1]:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import verify

    seed = args.seed if args.seed is not None else default_seed()
    try:
        report = verify(args.suite, seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for line in report.lines():
        print(line)
    print("all properties passed" if report.ok else "verification FAILED")
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_bench(args) -> int:
    from .bench import bench_scaling, write_csv

    if args.repeats < 3:
        raise InputError(f"--repeats must be >= 3 (got {args.repeats})")
    records = bench_scaling(args.lengths, args.d, args.n_state, args.repeats, default_seed())
    write_csv(records, args.out)
    for r in records:
        print(f"{r.kernel:9s} L={r.L:6d}  {r.seconds:.6f}s  {r.flops} flops  {r.peak_bytes} bytes")
    return EXIT_OK


def cmd_artfid(args) -> int:
    from .bench import artfid_combine

    print(round(artfid_combine(args.fid, args.lpips), 6))
    return EXIT_OK


COMMANDS = {
    "stylize": cmd_stylize,
    "train-toy": cmd_train_toy,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "artfid": cmd_artfid,
}


def main(argv: Sequence[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .imageio import ImageFormatError
    from .model import ConfigError
    from .tensor import ShapeError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (InputError, CheckpointError, ImageFormatError, ConfigError, ShapeError,
            FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"mamba-st {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
