"""8-bit RGB image reading and writing via Pillow."""

from __future__ import annotations

import sys

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png"}
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PNG_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


class ImageFormatError(ValueError):
    """Unsupported bit depth or colour type."""


def image_read(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a float64 [3, H, W] array in [0, 1]."""
    with open(path, "rb") as f:
        head = f.read(26)
    if head[:8] == PNG_SIGNATURE and len(head) == 26:
        # Pillow silently narrows 16-bit RGB, so check the IHDR fields directly
        depth, color = head[24], head[25]
        if (depth, color) != (8, 2):
            kind = PNG_COLOR_TYPES.get(color, f"color type {color}")
            raise ImageFormatError(f"{path}: unsupported color type {kind} at bit depth {depth}; "
                                   "expected 8-bit RGB")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ImageFormatError(f"{path}: unsupported color type / bit depth {im.mode!r}; "
                                   "expected 8-bit RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and round to 8-bit levels ([3, H, W] -> [H, W, 3] uint8)."""
    img = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected a [3, H, W] image, got shape {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def image_write(img, path) -> None:
    Image.fromarray(quantize(img), mode="RGB").save(path, format="PNG")


def center_crop(img: np.ndarray, multiple: int, label: str = "image") -> np.ndarray:
    """Crop [..., H, W] to the largest centred multiple of ``multiple``; notes the crop on stderr."""
    H, W = img.shape[-2:]
    h, w = H - H % multiple, W - W % multiple
    if h == 0 or w == 0:
        raise ImageFormatError(f"{label} of size {H}x{W} is smaller than one {multiple}x{multiple} patch")
    if (h, w) == (H, W):
        return img
    top, left = (H - h) // 2, (W - w) // 2
    print(f"notice: center-cropping {label} from {H}x{W} to {h}x{w}", file=sys.stderr)
    return img[..., top:top + h, left:left + w]
