"""Selective state-space kernel.

Per channel ``c`` and state index ``n`` the discretized recurrence is::

    h[k, c, n] = Abar[k, c, n] * h[k-1, c, n] + Bbar[k, c, n] * u[k, c]
    y[k, c]    = sum_n C[k, n] * h[k, c, n]  (+ D[c] * u[k, c])

with ``Abar = exp(delta * A)`` and ``Bbar = delta * B``. ``A = -exp(A_log)``
is diagonal per channel. All kernels accept optional leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import linear, softmax
from .tensor import Module, ShapeError, Tensor, _unbroadcast, _wrap, exp, matmul, softplus, swapaxes

DELTA_INIT = 0.01


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class SSMLayerParams(Module):
    """Projections producing B, C, delta from a driver sequence, plus A and D."""

    def __init__(self, d_inner: int, n_state: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_inner = d_inner
        self.n_state = n_state
        a_init = np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1))
        self.A_log = Tensor(np.log(a_init).astype(dtype), requires_grad=True)
        self.D_skip = Tensor(np.ones(d_inner, dtype=dtype), requires_grad=True)
        scale = 1.0 / np.sqrt(d_inner)
        self.W_B = Tensor(rng.normal(0.0, scale, (d_inner, n_state)).astype(dtype), requires_grad=True)
        self.W_C = Tensor(rng.normal(0.0, scale, (d_inner, n_state)).astype(dtype), requires_grad=True)
        self.W_delta = Tensor((0.1 * rng.normal(0.0, scale, (d_inner, d_inner))).astype(dtype),
                              requires_grad=True)
        self.b_delta = Tensor(np.full(d_inner, _inverse_softplus(DELTA_INIT), dtype=dtype),
                              requires_grad=True)

    def A(self) -> Tensor:
        return -exp(self.A_log)


@dataclass
class SelectiveParams:
    B: Tensor       # [..., L, N]
    C: Tensor       # [..., L, N]
    delta: Tensor   # [..., L, d_inner]


@dataclass
class DiscretizedPair:
    A_bar: Tensor   # [..., L, d_inner, N]
    B_bar: Tensor   # [..., L, d_inner, N]


def derive_params(driver: Tensor, params: SSMLayerParams, content: Tensor | None = None) -> SelectiveParams:
    """Input-dependent B, C and step size.

    B and delta always come from ``driver``. C comes from ``content`` when
    given (cross-stream mode), otherwise from ``driver``.
    """
    source_c = driver if content is None else content
    if source_c.shape != driver.shape:
        raise ShapeError(f"content {source_c.shape} and driver {driver.shape} differ")
    B = linear(driver, params.W_B)
    C = linear(source_c, params.W_C)
    delta = softplus(linear(driver, params.W_delta, params.b_delta))
    return SelectiveParams(B=B, C=C, delta=delta)


def discretize(delta: Tensor, A: Tensor, B: Tensor) -> DiscretizedPair:
    """Zero-order-hold step: ``Abar = exp(delta*A)``, simplified ``Bbar = delta*B``."""
    if np.any(delta.data <= 0):
        raise ValueError("discretize: step size delta must be strictly positive (softplus missing?)")
    if delta.shape[-1] != A.shape[0]:
        raise ShapeError(f"delta {delta.shape} does not match A {A.shape}")
    if B.shape[:-1] != delta.shape[:-1] or B.shape[-1] != A.shape[1]:
        raise ShapeError(f"B {B.shape} does not match delta {delta.shape} / A {A.shape}")
    d = delta.reshape(delta.shape + (1,))
    A_bar = exp(d * A)
    B_bar = d * B.reshape(B.shape[:-1] + (1, B.shape[-1]))
    return DiscretizedPair(A_bar=A_bar, B_bar=B_bar)


def selective_scan_1d(pair: DiscretizedPair, C: Tensor, u: Tensor, h0: Tensor | None = None,
                      D_skip: Tensor | None = None) -> Tensor:
    """Sequential scan over the length axis; cost is linear in L."""
    A_bar, B_bar = pair.A_bar, pair.B_bar
    u = _wrap(u)
    if A_bar.shape != B_bar.shape or A_bar.ndim < 3:
        raise ShapeError(f"A_bar {A_bar.shape} and B_bar {B_bar.shape} must match as [..., L, d, N]")
    lead, (L, d, N) = A_bar.shape[:-3], A_bar.shape[-3:]
    if u.shape != lead + (L, d):
        raise ShapeError(f"scan input {u.shape} does not match [..., L, d] = {lead + (L, d)}")
    if C.shape != lead + (L, N):
        raise ShapeError(f"C {C.shape} does not match [..., L, N] = {lead + (L, N)}")
    if D_skip is not None and D_skip.shape != (d,):
        raise ShapeError(f"D_skip {D_skip.shape} does not match width {d}")
    if h0 is not None and h0.shape[-2:] != (d, N):
        raise ShapeError(f"h0 {h0.shape} does not match state shape {(d, N)}")

    a, b, c, x = A_bar.data, B_bar.data, C.data, u.data
    dtype = np.result_type(a, b, c, x)
    bu = b * x[..., None]
    hs = np.empty(lead + (L, d, N), dtype=dtype)
    h = np.zeros(lead + (d, N), dtype=dtype) if h0 is None else np.broadcast_to(h0.data, lead + (d, N))
    for k in range(L):
        h = a[..., k, :, :] * h + bu[..., k, :, :]
        hs[..., k, :, :] = h
    y = np.einsum("...kdn,...kn->...kd", hs, c)
    flops = 5 * L * d * N * int(np.prod(lead, dtype=np.int64))
    if D_skip is not None:
        y = y + D_skip.data * x
        flops += 2 * L * d * int(np.prod(lead, dtype=np.int64))

    def backward(gy):
        gC = np.einsum("...kdn,...kd->...kn", hs, gy)
        gA = np.empty_like(hs)
        gBU = np.empty_like(hs)
        gh = np.zeros(lead + (d, N), dtype=gy.dtype)
        for k in range(L - 1, -1, -1):
            gh = gh + gy[..., k, :, None] * c[..., k, None, :]
            gBU[..., k, :, :] = gh
            if k > 0:
                gA[..., k, :, :] = gh * hs[..., k - 1, :, :]
            elif h0 is not None:
                gA[..., k, :, :] = gh * h0.data
            else:
                gA[..., k, :, :] = 0.0
            gh = gh * a[..., k, :, :]
        gB = gBU * x[..., None]
        gu = (gBU * b).sum(axis=-1)
        grads = [gA, gB, gC, None, None, None]
        if D_skip is not None:
            gu = gu + D_skip.data * gy
            grads[5] = (gy * x).reshape(-1, d).sum(axis=0)
        grads[3] = gu
        if h0 is not None:
            grads[4] = _unbroadcast(gh, h0.shape)
        return grads

    parents = [A_bar, B_bar, C, u, h0 if h0 is not None else Tensor(0.0),
               D_skip if D_skip is not None else Tensor(0.0)]
    return Tensor.from_op(y, parents, backward, flops=flops)


def selective_scan_fused(delta: Tensor, A: Tensor, B: Tensor, C: Tensor, u: Tensor,
                         D_skip: Tensor | None = None) -> Tensor:
    """Discretize and scan in one kernel; same result as ``discretize`` + ``selective_scan_1d``.

    Shapes: delta/u [..., L, d], A [d, N], B/C [..., L, N]. Avoids building
    graph nodes for the [..., L, d, N] intermediates.
    """
    u = _wrap(u)
    lead, (L, d) = delta.shape[:-2], delta.shape[-2:]
    N = A.shape[-1]
    if A.shape != (d, N):
        raise ShapeError(f"A {A.shape} does not match width {d}")
    for name, t, want in (("u", u, lead + (L, d)), ("B", B, lead + (L, N)), ("C", C, lead + (L, N))):
        if t.shape != want:
            raise ShapeError(f"{name} {t.shape} does not match {want}")
    if np.any(delta.data <= 0):
        raise ValueError("selective scan: step size delta must be strictly positive")
    dl, a, b, c, x = delta.data, A.data, B.data, C.data, u.data

    a_bar = dl[..., None] * a
    np.exp(a_bar, out=a_bar)
    du = dl * x
    hs = du[..., None] * b[..., None, :]
    for k in range(1, L):
        hs[..., k, :, :] += a_bar[..., k, :, :] * hs[..., k - 1, :, :]
    y = np.matmul(hs, c[..., None])[..., 0]
    count = int(np.prod(lead, dtype=np.int64))
    flops = 7 * L * d * N * count
    if D_skip is not None:
        y = y + D_skip.data * x
        flops += 2 * L * d * count

    def backward(gy):
        gC = np.matmul(gy[..., None, :], hs)[..., 0, :]
        G = gy[..., None] * c[..., None, :]
        for k in range(L - 2, -1, -1):
            G[..., k, :, :] += a_bar[..., k + 1, :, :] * G[..., k + 1, :, :]
        # dL/d(delta*A) at steps 1..L-1; step 0 sees a zero initial state
        T = G[..., 1:, :, :] * hs[..., :-1, :, :]
        T *= a_bar[..., 1:, :, :]
        g_delta = np.zeros_like(dl)
        g_delta[..., 1:, :] = (T * a).sum(axis=-1)
        gA = (T * dl[..., 1:, :, None]).reshape(-1, d, N).sum(axis=0)
        g_du = np.matmul(G, b[..., :, None])[..., 0]
        gB = np.matmul(du[..., None, :], G)[..., 0, :]
        g_delta += g_du * x
        gu = g_du * dl
        gD = None
        if D_skip is not None:
            gu = gu + D_skip.data * gy
            gD = (gy * x).reshape(-1, d).sum(axis=0)
        return g_delta, gA, gB, gC, gu, gD

    parents = (delta, A, B, C, u, D_skip if D_skip is not None else Tensor(0.0))
    return Tensor.from_op(y, parents, backward, flops=flops)


@dataclass
class OracleDecomposition:
    Q: np.ndarray   # [L, N]     content-side readout rows (C)
    K: np.ndarray   # [L, d, N]  delta_j * B_j
    H: np.ndarray   # [L, L, d, N] decay products, zero above the diagonal
    X: np.ndarray   # [L, d]     scan input


def attention_form_oracle(A: np.ndarray, delta, B, C, u) -> tuple[np.ndarray, OracleDecomposition]:
    """Closed-form O(L^2) evaluation of the scan without the D skip term.

    ``y[i] = sum_{j<=i} C[i] . (prod_{k=j+1..i} exp(delta[k] * A)) . delta[j] B[j] u[j]``,
    built term by term from explicit products; shares no code with the
    recurrence. Inputs are unbatched: delta [L, d], B/C [L, N], u [L, d],
    A [d, N] (already negative).
    """
    A = np.asarray(getattr(A, "data", A), dtype=np.float64)
    delta, B, C, u = (np.asarray(getattr(t, "data", t), dtype=np.float64) for t in (delta, B, C, u))
    L, d = delta.shape
    N = A.shape[1]
    decay = [np.exp(delta[k][:, None] * A) for k in range(L)]   # [d, N] each
    K = delta[:, :, None] * B[:, None, :]
    H = np.zeros((L, L, d, N))
    y = np.zeros((L, d))
    for i in range(L):
        for j in range(i + 1):
            prod = np.ones((d, N))
            for k in range(j + 1, i + 1):
                prod = prod * decay[k]
            H[i, j] = prod
            y[i] += (C[i][None, :] * prod * K[j]).sum(axis=-1) * u[j]
    return y, OracleDecomposition(Q=C.copy(), K=K, H=H, X=u.copy())


def naive_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` with the full L x L score matrix."""
    Q, K, V = _wrap(Q), _wrap(K), _wrap(V)
    if not (Q.shape[-1] == K.shape[-1] == V.shape[-1]) or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention operands disagree: Q {Q.shape}, K {K.shape}, V {V.shape}")
    scale = 1.0 / np.sqrt(Q.shape[-1])
    scores = matmul(Q, swapaxes(K, -1, -2)) * scale
    return matmul(softmax(scores, axis=-1), V)
