"""Bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor

DEFAULT_LR = 5e-5


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[tuple[str, Tensor]] | dict[str, Tensor], state: AdamState) -> None:
    """Apply one Adam update in place to every named parameter.

    Every parameter must carry a populated ``grad``; a missing one raises
    before any parameter is touched.
    """
    named = list(params.items()) if isinstance(params, dict) else list(params)
    for name, p in named:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, p in named:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = p.data - update.astype(p.dtype, copy=False)
