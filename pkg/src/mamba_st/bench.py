"""Sequence-length scaling sweep: selective scan vs. quadratic attention."""

from __future__ import annotations

import csv
import time
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

from .instrument import count_flops, track_allocations
from .ssm import DiscretizedPair, naive_attention, selective_scan_1d
from .tensor import Tensor, no_grad

CSV_HEADER = ("kernel", "L", "d", "N", "seconds", "flops", "peak_bytes")
KERNELS = ("scan", "attention")


@dataclass(frozen=True)
class BenchRecord:
    kernel: str
    L: int
    d: int
    N: int
    seconds: float
    flops: int
    peak_bytes: int

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.flops <= 0 or self.seconds <= 0:
            raise ValueError(f"{self.kernel} L={self.L}: flops and seconds must be positive")


def _scan_inputs(L: int, d: int, N: int, rng: np.random.Generator, dtype):
    delta = rng.uniform(0.001, 0.1, (L, d, 1))
    A = -np.arange(1, N + 1, dtype=np.float64)
    pair = DiscretizedPair(Tensor(np.exp(delta * A).astype(dtype)),
                           Tensor((delta * rng.normal(size=(L, 1, N))).astype(dtype)))
    C = Tensor(rng.normal(size=(L, N)).astype(dtype))
    u = Tensor(rng.normal(size=(L, d)).astype(dtype))
    return lambda: selective_scan_1d(pair, C, u)


def _attention_inputs(L: int, d: int, N: int, rng: np.random.Generator, dtype):
    Q, K, V = (Tensor(rng.normal(size=(L, d)).astype(dtype)) for _ in range(3))
    return lambda: naive_attention(Q, K, V)


def _make_runner(kernel: str, L: int, d: int, N: int, seed: int, dtype):
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    make = _scan_inputs if kernel == "scan" else _attention_inputs
    return make(L, d, N, np.random.default_rng(seed), dtype)


def _instrumented(run):
    # tracing slows allocation, so memory is measured in its own run
    with count_flops() as fc, track_allocations() as mem:
        out = run()
        del out
    return fc.flops, mem.peak_bytes


def measure(kernel: str, L: int, d: int = 64, N: int = 16, repeats: int = 5, seed: int = 0,
            dtype=np.float32) -> BenchRecord:
    """Median wall time over ``repeats`` runs, plus one instrumented run for FLOPs and memory."""
    return _sweep([(kernel, L)], d, N, repeats, seed, dtype)[0]


def _sweep(cases, d, N, repeats, seed, dtype) -> list[BenchRecord]:
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3 (got {repeats})")
    runners = [_make_runner(k, L, d, N, seed, dtype) for k, L in cases]
    times = [[] for _ in cases]
    with no_grad():
        for run in runners:
            run()   # warm-up
        # rounds visit every case in turn, so slow drift in machine load hits all lengths alike
        for _ in range(repeats):
            for run, ts in zip(runners, times):
                t0 = time.perf_counter()
                run()
                ts.append(time.perf_counter() - t0)
        counts = [_instrumented(run) for run in runners]
    return [BenchRecord(k, L, d, N, float(np.median(ts)), flops, peak)
            for (k, L), ts, (flops, peak) in zip(cases, times, counts)]


def bench_scaling(lengths: Sequence[int], d: int = 64, N: int = 16, repeats: int = 5, seed: int = 0,
                  kernels: Sequence[str] = KERNELS, dtype=np.float32) -> list[BenchRecord]:
    """Time every (kernel, L) case in interleaved rounds; one record per case."""
    lengths = list(lengths)
    if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError(f"lengths must be non-empty and strictly ascending, got {lengths}")
    return _sweep([(k, L) for k in kernels for L in lengths], d, N, repeats, seed, dtype)


def write_csv(records: Sequence[BenchRecord], path) -> None:
    assert tuple(f.name for f in fields(BenchRecord)) == CSV_HEADER
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(astuple(r))


def doubling_ratio(a: BenchRecord, b: BenchRecord, attr: str = "seconds") -> float:
    """Growth factor per doubling of L between two records of one kernel."""
    doublings = np.log2(b.L / a.L)
    return float((getattr(b, attr) / getattr(a, attr)) ** (1.0 / doublings))


def artfid_combine(fid: float, lpips: float) -> float:
    """Combined style-transfer score ``(1 + FID) * (1 + LPIPS)``."""
    if fid < 0 or lpips < 0 or not (np.isfinite(fid) and np.isfinite(lpips)):
        raise ValueError(f"FID and LPIPS must be finite and nonnegative (got {fid}, {lpips})")
    return (1.0 + fid) * (1.0 + lpips)
