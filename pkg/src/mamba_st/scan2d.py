"""Multi-direction scanning of a patch grid.

A grid of ``h x w`` tokens is stored raster-ordered (row by row). Each scan
direction is a permutation ``order`` with ``sequence[s] = grid[order[s]]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .ssm import SSMLayerParams, derive_params, selective_scan_fused
from .tensor import ShapeError, Tensor, take


class ScanDirection(Enum):
    ROW_FORWARD = "row-major-forward"
    ROW_BACKWARD = "row-major-backward"
    COL_FORWARD = "column-major-forward"
    COL_BACKWARD = "column-major-backward"

    def order(self, h: int, w: int) -> np.ndarray:
        raster = np.arange(h * w)
        if self is ScanDirection.ROW_FORWARD:
            return raster
        if self is ScanDirection.ROW_BACKWARD:
            return raster[::-1].copy()
        transposed = raster.reshape(h, w).T.reshape(-1)
        if self is ScanDirection.COL_FORWARD:
            return transposed
        return transposed[::-1].copy()

    def inverse(self, h: int, w: int) -> np.ndarray:
        return np.argsort(self.order(h, w))


ALL_DIRECTIONS = (
    ScanDirection.ROW_FORWARD,
    ScanDirection.ROW_BACKWARD,
    ScanDirection.COL_FORWARD,
    ScanDirection.COL_BACKWARD,
)


def directions_for(count: int) -> tuple[ScanDirection, ...]:
    if count not in (1, 2, 4):
        raise ValueError(f"scan direction count must be 1, 2 or 4, got {count}")
    return ALL_DIRECTIONS[:count]


@dataclass
class PatchSeq:
    tokens: Tensor              # [..., h*w, d], raster order
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if h < 1 or w < 1:
            raise ShapeError(f"grid extents must be positive, got {self.grid}")
        if self.tokens.ndim < 2 or self.tokens.shape[-2] != h * w:
            raise ShapeError(f"token count {self.tokens.shape[-2:-1]} does not match grid {self.grid}")

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def with_tokens(self, tokens: Tensor) -> "PatchSeq":
        return PatchSeq(tokens, self.grid)


def flatten_direction(seq: PatchSeq, direction: ScanDirection) -> Tensor:
    return take(seq.tokens, direction.order(*seq.grid), axis=-2)


def unflatten_direction(y: Tensor, direction: ScanDirection, grid: tuple[int, int]) -> PatchSeq:
    h, w = grid
    if y.ndim < 2 or y.shape[-2] != h * w:
        raise ShapeError(f"sequence length {y.shape[-2:-1]} does not match grid {grid}")
    return PatchSeq(take(y, direction.inverse(h, w), axis=-2), grid)


def scan_2d(
    params: Sequence[SSMLayerParams],
    driver: PatchSeq,
    scan_input: PatchSeq,
    content: PatchSeq | None = None,
    use_skip: bool = True,
    directions: Sequence[ScanDirection] | None = None,
) -> PatchSeq:
    """Scan every direction with its own parameters and sum the re-gridded outputs.

    B and delta derive from ``driver``, C from ``content`` (defaults to the
    driver) and the recurrence consumes ``scan_input``. Directions are summed
    in the order given.
    """
    directions = tuple(directions) if directions is not None else directions_for(len(params))
    if len(directions) != len(params):
        raise ValueError(f"{len(params)} parameter sets for {len(directions)} directions")
    grids = {driver.grid, scan_input.grid} | ({content.grid} if content is not None else set())
    if len(grids) != 1:
        raise ShapeError(f"operand grids differ: {sorted(grids)}")
    grid = driver.grid

    total: Tensor | None = None
    for direction, p in zip(directions, params):
        drv = flatten_direction(driver, direction)
        inp = drv if scan_input is driver else flatten_direction(scan_input, direction)
        cnt = None if content is None else flatten_direction(content, direction)
        sel = derive_params(drv, p, cnt)
        y = selective_scan_fused(sel.delta, p.A(), sel.B, sel.C, inp,
                                 D_skip=p.D_skip if use_skip else None)
        y = unflatten_direction(y, direction, grid).tokens
        total = y if total is None else total + y
    return PatchSeq(total, grid)
