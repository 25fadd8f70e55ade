"""FLOP and allocation instrumentation for kernel benchmarks.

Tensor ops report an analytic floating-point operation count to whichever
:class:`FlopCounter` is active. Peak memory is measured with ``tracemalloc``,
which numpy feeds with its data-buffer allocations, so only bytes allocated
inside the tracked region count (inputs built beforehand are excluded).
"""

from __future__ import annotations

import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

_active: list["FlopCounter"] = []


@dataclass
class FlopCounter:
    flops: int = 0


def add_flops(n: int) -> None:
    for counter in _active:
        counter.flops += int(n)


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _active.append(counter)
    try:
        yield counter
    finally:
        _active.remove(counter)


@dataclass
class AllocationStats:
    peak_bytes: int = 0


@contextmanager
def track_allocations() -> Iterator[AllocationStats]:
    """Record the peak of bytes allocated (and still live) inside the block."""
    stats = AllocationStats()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    try:
        yield stats
    finally:
        _, peak = tracemalloc.get_traced_memory()
        stats.peak_bytes = max(0, peak - base)
        if started:
            tracemalloc.stop()
