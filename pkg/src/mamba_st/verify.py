"""Property suites runnable from the command line.

Each property records how many random cases it ran, the worst observed
deviation and the tolerance it was held to.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .blocks import VSSMBlockParams, base_vssm, shuffle_style, st_vssm
from .checkpoint import (BadMagicError, CheckpointError, TruncatedError, UnsupportedVersionError,
                         load_checkpoint, save_checkpoint)
from .gradcheck import grad_check_fd
from .imageio import image_read, image_write
from .losses import (FeatureExtractor, IdentityExtractor, LossComponents, LossWeights, content_loss,
                     style_loss, total_loss)
from .model import ModelConfig, build_model
from .scan2d import ALL_DIRECTIONS, PatchSeq, ScanDirection, flatten_direction, scan_2d, unflatten_direction
from .ssm import (SSMLayerParams, attention_form_oracle, discretize, selective_scan_1d,
                  selective_scan_fused)
from .tensor import Tensor, no_grad

SUITES = ("oracle", "equivariance", "grads", "losses", "roundtrip")

# tiny configuration used for end-to-end gradient checks
TINY_CONFIG = ModelConfig(d_model=8, n_state=4, patch_size=8, encoder_layers=2, decoder_layers=2)
TINY_IMAGE = 16


@dataclass
class PropertyResult:
    suite: str
    name: str
    cases: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.suite}/{self.name}: {self.cases} cases, "
                f"worst {self.worst:.3e} (tol {self.tol:.0e})")


@dataclass
class VerifyReport:
    results: list[PropertyResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]


# -- random instances ----------------------------------------------------------

def random_scan_case(rng: np.random.Generator, max_L=8, max_N=4, max_d=4):
    L, N, d = (int(rng.integers(1, m + 1)) for m in (max_L, max_N, max_d))
    delta = np.log1p(np.exp(rng.normal(size=(L, d))))
    A = -np.exp(rng.normal(size=(d, N)))
    B, C = rng.normal(size=(L, N)), rng.normal(size=(L, N))
    u = rng.normal(size=(L, d))
    return delta, A, B, C, u


def scan_reference(delta, A, B, C, u) -> np.ndarray:
    pair = discretize(Tensor(delta), Tensor(A), Tensor(B))
    return selective_scan_1d(pair, Tensor(C), Tensor(u)).data


def rotated_params(params):
    """Swap forward/backward parameter sets to match a 180-degree rotated grid."""
    return [params[1], params[0], params[3], params[2]]


def rotate_tokens(tokens: np.ndarray) -> np.ndarray:
    return tokens[..., ::-1, :].copy()


# -- suites --------------------------------------------------------------------

def suite_oracle(seed: int, cases: int = 1000) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    worst_oracle = worst_fused = 0.0
    with no_grad():
        for _ in range(cases):
            delta, A, B, C, u = random_scan_case(rng)
            y = scan_reference(delta, A, B, C, u)
            y_oracle, _ = attention_form_oracle(A, delta, B, C, u)
            y_fused = selective_scan_fused(Tensor(delta), Tensor(A), Tensor(B), Tensor(C), Tensor(u)).data
            worst_oracle = max(worst_oracle, float(np.abs(y - y_oracle).max()))
            worst_fused = max(worst_fused, float(np.abs(y - y_fused).max()))
    return [PropertyResult("oracle", "scan-vs-attention-form", cases, worst_oracle, 1e-10),
            PropertyResult("oracle", "fused-vs-reference", cases, worst_fused, 1e-12)]


def _random_grid(rng, max_h=4, max_w=5):
    return int(rng.integers(1, max_h + 1)), int(rng.integers(1, max_w + 1))


def suite_equivariance(seed: int, cases: int = 100) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    out = []

    worst_rt = 0.0
    for _ in range(cases):
        h, w = _random_grid(rng)
        tokens = rng.normal(size=(h * w, 3))
        seq = PatchSeq(Tensor(tokens), (h, w))
        for direction in ALL_DIRECTIONS:
            back = unflatten_direction(flatten_direction(seq, direction), direction, (h, w))
            worst_rt = max(worst_rt, float(np.abs(back.tokens.data - tokens).max()))
    out.append(PropertyResult("equivariance", "direction-round-trip", cases, worst_rt, 0.0))

    worst_rot = 0.0
    with no_grad():
        for _ in range(cases):
            h, w = _random_grid(rng)
            d, N = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            params = [SSMLayerParams(d, N, rng) for _ in range(4)]
            for p in params:
                p.A_log.data = rng.normal(scale=0.5, size=p.A_log.shape)
                p.b_delta.data = rng.normal(size=p.b_delta.shape)
            x = rng.normal(size=(h * w, d))
            seq = PatchSeq(Tensor(x), (h, w))
            rot = PatchSeq(Tensor(rotate_tokens(x)), (h, w))
            y = scan_2d(params, seq, seq).tokens.data
            y_rot = scan_2d(rotated_params(params), rot, rot).tokens.data
            worst_rot = max(worst_rot, float(np.abs(rotate_tokens(y_rot) - y).max()))
    out.append(PropertyResult("equivariance", "rotation-180", cases, worst_rot, 1e-10))

    worst_dual = 0.0
    with no_grad():
        for _ in range(cases):
            h, w = _random_grid(rng)
            d_model = int(rng.integers(2, 7))
            block = VSSMBlockParams(d_model, int(rng.integers(1, 5)), 2, 4, rng)
            for p in block.ssm:
                p.D_skip.data = np.zeros_like(p.D_skip.data)
            x = PatchSeq(Tensor(rng.normal(size=(h * w, d_model))), (h, w))
            diff = st_vssm(x, x, block).tokens.data - base_vssm(x, block).tokens.data
            worst_dual = max(worst_dual, float(np.abs(diff).max()))
    out.append(PropertyResult("equivariance", "decoder-equals-encoder-on-self", cases, worst_dual, 1e-12))

    worst_multiset = worst_moments = 0.0
    for _ in range(cases):
        h, w = _random_grid(rng, 6, 6)
        tokens = rng.normal(size=(h * w, 4))
        shuffled, plan = shuffle_style(PatchSeq(Tensor(tokens), (h, w)), int(rng.integers(2**31)))
        s = shuffled.tokens.data
        worst_multiset = max(worst_multiset, float(np.abs(np.sort(s, axis=0) - np.sort(tokens, axis=0)).max()),
                             float(np.abs(s[plan.inverse()] - tokens).max()))
        worst_moments = max(worst_moments, float(np.abs(s.mean(0) - tokens.mean(0)).max()),
                            float(np.abs(s.std(0) - tokens.std(0)).max()))
    out.append(PropertyResult("equivariance", "shuffle-multiset", cases, worst_multiset, 0.0))
    out.append(PropertyResult("equivariance", "shuffle-moments", cases, worst_moments, 1e-12))
    return out


def tiny_total_loss(seed: int):
    """Closure evaluating total_loss of a tiny full model on one random pair, and its parameters."""
    from .train import compute_losses

    rng = np.random.default_rng(seed)
    model = build_model(TINY_CONFIG, seed)
    fx = FeatureExtractor.seeded(seed, channels=(4, 4, 4, 4))
    x_c = rng.uniform(0.2, 0.8, (1, 3, TINY_IMAGE, TINY_IMAGE))
    x_s = rng.uniform(0.2, 0.8, (1, 3, TINY_IMAGE, TINY_IMAGE))

    def f():
        return total_loss(compute_losses(model, x_c, x_s, fx, seed), LossWeights())

    return f, [p for _, p in model.named_parameters()]


def suite_grads(seed: int, coords_per_param: int = 3) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    worst_scan = 0.0
    n_scan = 20
    for _ in range(n_scan):
        delta, A, B, C, u = random_scan_case(rng)
        ts = [Tensor(v, requires_grad=True) for v in (delta, A, B, C, u)]
        D = Tensor(rng.normal(size=u.shape[1]), requires_grad=True)
        f_fused = lambda: (selective_scan_fused(*ts, D_skip=D) ** 2).sum()
        f_ref = lambda: (selective_scan_1d(discretize(ts[0], ts[1], ts[2]), ts[3], ts[4], D_skip=D) ** 2).sum()
        worst_scan = max(worst_scan, grad_check_fd(f_fused, ts + [D]), grad_check_fd(f_ref, ts + [D]))

    f, params = tiny_total_loss(seed)
    worst_model = grad_check_fd(f, params, max_coords=coords_per_param, seed=seed)
    n_model = sum(min(coords_per_param, p.size) for p in params)
    return [PropertyResult("grads", "scan-kernels", n_scan, worst_scan, 1e-6),
            PropertyResult("grads", "tiny-model-total-loss", n_model, worst_model, 1e-4)]


def suite_losses(seed: int, cases: int = 50) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    ident = IdentityExtractor()
    fx = FeatureExtractor.seeded(seed, channels=(4, 8, 8, 8))
    out = []
    with no_grad():
        hand = [
            abs(content_loss(np.full((3, 4, 4), 3.0), np.full((3, 4, 4), 1.0), ident).item() - 4.0),
            abs(style_loss(np.full((3, 4, 4), 1.0), np.full((3, 4, 4), 3.0), ident).item() - 4.0),
            abs(total_loss(LossComponents(*(Tensor(1.0) for _ in range(4))), LossWeights()).item() - 88.0),
        ]
        out.append(PropertyResult("losses", "hand-computed-values", len(hand), max(hand), 1e-12))

        worst_fixed = worst_sym = worst_perm = 0.0
        negative = 0
        for _ in range(cases):
            a, b = rng.uniform(size=(2, 3, 8, 8))
            worst_fixed = max(worst_fixed, content_loss(a, a, fx).item(), style_loss(b, b, fx).item())
            worst_sym = max(worst_sym, abs(content_loss(a, b, fx).item() - content_loss(b, a, fx).item()))
            perm = rng.permutation(64)
            b_perm = b.reshape(3, 64)[:, perm].reshape(3, 8, 8)
            worst_perm = max(worst_perm, abs(style_loss(a, b, ident).item() - style_loss(a, b_perm, ident).item()))
            negative += content_loss(a, b, fx).item() < 0 or style_loss(a, b, fx).item() < 0
    out.append(PropertyResult("losses", "zero-at-fixed-points", cases, worst_fixed, 0.0))
    out.append(PropertyResult("losses", "content-symmetry", cases, worst_sym, 1e-12))
    out.append(PropertyResult("losses", "style-permutation-invariance", cases, worst_perm, 1e-12))
    out.append(PropertyResult("losses", "nonnegative", cases, float(negative), 0.0))
    return out


def _expect(fn: Callable[[], object], exc: type) -> float:
    try:
        fn()
    except exc:
        return 0.0
    except CheckpointError:
        return 1.0
    return 1.0


def corrupt_checkpoints(path: Path) -> dict[str, bytes]:
    """Variants of a valid checkpoint with one structural defect each."""
    raw = path.read_bytes()
    return {
        "bad-magic": b"MBSX" + raw[4:],
        "bad-version": raw[:4] + (99).to_bytes(4, "little") + raw[8:],
        "truncated": raw[:-7],
    }


def suite_roundtrip(seed: int) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = ModelConfig(d_model=8, n_state=4, patch_size=4, encoder_layers=1, decoder_layers=1, seed=seed)
        model = build_model(cfg)
        for _, p in model.named_tensors(frozen=True):
            p.data = rng.normal(size=p.shape).astype(p.dtype)
        path = tmp / "model.ckpt"
        save_checkpoint(model, cfg, path)
        loaded, cfg2 = load_checkpoint(path)
        a = dict(model.named_tensors(frozen=True))
        b = dict(loaded.named_tensors(frozen=True))
        mismatched = sum(not np.array_equal(a[k].data, b[k].data) or a[k].dtype != b[k].dtype for k in a)
        mismatched += (set(a) != set(b)) + (cfg2 != cfg)
        out.append(PropertyResult("roundtrip", "checkpoint-bitwise", len(a), float(mismatched), 0.0))

        expected = {"bad-magic": BadMagicError, "bad-version": UnsupportedVersionError,
                    "truncated": TruncatedError}
        wrong = 0.0
        for name, data in corrupt_checkpoints(path).items():
            bad = tmp / f"{name}.ckpt"
            bad.write_bytes(data)
            wrong += _expect(lambda: load_checkpoint(bad), expected[name])
        out.append(PropertyResult("roundtrip", "checkpoint-distinct-errors", len(expected), wrong, 0.0))

        worst_img = 0.0
        for i in range(10):
            img = rng.uniform(size=(3, 5 + i, 7))
            image_write(img, tmp / "x.png")
            first = image_read(tmp / "x.png")
            image_write(first, tmp / "y.png")
            worst_img = max(worst_img, float(np.abs(first - img).max()) - 0.5 / 255,
                            float(np.abs(image_read(tmp / "y.png") - first).max()))
        out.append(PropertyResult("roundtrip", "image-quantization", 10, max(worst_img, 0.0), 1e-12))
    return out


SUITE_FUNCS = {
    "oracle": suite_oracle,
    "equivariance": suite_equivariance,
    "grads": suite_grads,
    "losses": suite_losses,
    "roundtrip": suite_roundtrip,
}


def verify(suite: str, seed: int = 0) -> VerifyReport:
    if suite != "all" and suite not in SUITE_FUNCS:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES + ('all',))}")
    names = SUITES if suite == "all" else (suite,)
    report = VerifyReport()
    for name in names:
        report.results.extend(SUITE_FUNCS[name](seed))
    return report
