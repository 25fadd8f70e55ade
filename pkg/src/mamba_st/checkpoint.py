"""Binary checkpoint format ("MBST", little-endian).

Layout::

    b"MBST" | u32 version | u64 header_len | header (UTF-8 JSON)
    u32 tensor_count
    per tensor: u16 name_len | name | u8 dtype | u8 rank | rank x u64 dims | u64 offset
    blob region (row-major values; offsets are relative to its start)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MBST"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    """Base class; also raised for malformed structure not covered below."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def write_tensors(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    index = bytearray()
    blobs = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODE_FOR:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        index += struct.pack("<H", len(raw)) + raw
        index += struct.pack("<BB", CODE_FOR[arr.dtype], arr.ndim)
        index += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        index += struct.pack("<Q", len(blobs))
        blobs += np.ascontiguousarray(arr, dtype=DTYPE_CODES[CODE_FOR[arr.dtype]]).tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
        f.write(struct.pack("<I", len(tensors)) + bytes(index) + bytes(blobs))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, {name: array}) with full structural checks."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (supported: {VERSION})")
    (head_len,) = r.unpack("<Q", "header length")
    try:
        header = json.loads(r.take(head_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc

    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        code, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        (offset,) = r.unpack("<Q", f"offset of {name!r}")
        entries.append((name, DTYPE_CODES[code], dims, offset))

    blob = r.buf[r.pos:]
    tensors: dict[str, np.ndarray] = {}
    end = 0
    for name, dtype, dims, offset in entries:
        if name in tensors:
            raise CheckpointError(f"tensor {name!r} appears twice")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise TruncatedError(f"tensor {name!r} needs bytes {offset}..{offset + nbytes} "
                                 f"but the blob region holds {len(blob)}")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[name] = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
        end = max(end, offset + nbytes)
    if end != len(blob):
        raise CheckpointError(f"blob region holds {len(blob)} bytes but the index accounts for {end}")
    return header, tensors


def save_checkpoint(model, cfg, path) -> None:
    tensors = {name: t.data for name, t in model.named_tensors(frozen=True)}
    write_tensors(path, {"kind": "model", "config": cfg.to_dict()}, tensors)


def load_checkpoint(path):
    """Rebuild the model from the embedded config and fill in the stored tensors."""
    from .model import ConfigError, ModelConfig, build_model

    header, tensors = read_tensors(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"header does not hold a valid model config: {exc}") from exc
    model = build_model(cfg)
    expected = dict(model.named_tensors(frozen=True))
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ShapeMismatchError(f"tensor names differ from config: missing {missing[:5]}, extra {extra[:5]}")
    for name, t in expected.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise ShapeMismatchError(f"tensor {name!r} has shape {arr.shape}, config expects {t.shape}")
        if arr.dtype != t.dtype:
            raise ShapeMismatchError(f"tensor {name!r} has dtype {arr.dtype}, config expects {t.dtype}")
        t.data = arr
    return model, cfg
