"""Invariant suites runnable from the command line (``tlalign selftest``)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .align import align_batch, align_forward
from .diagnostics import ConvDescriptor, conv_presence, token_presence
from .mixing import cutmix, init_label_map, mixup
from .numerics import make_rng, softmax_rows
from .trainer import gradient_check
from .vit import ModelConfig, init_params, model_forward


def random_attention(rng, layers: int, heads: int, tokens: int, spread: float = 3.0):
    return [softmax_rows(rng.normal(0, spread, size=(heads, tokens, tokens))) for _ in range(layers)]


def random_label_map(rng, tokens: int, classes: int):
    y = rng.uniform(size=(tokens, classes))
    return y / y.sum(axis=1, keepdims=True)


def suite_row_stochastic(n: int = 1000, seed: int = 0):
    rng = make_rng(seed, 1)
    worst = 0.0
    for _ in range(n):
        tokens = int(rng.integers(2, 17)) + 1
        c, h, L = int(rng.integers(2, 11)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
        res = align_forward(random_label_map(rng, tokens, c), random_attention(rng, L, h, tokens))
        dev = max(float(np.abs(s.sum(axis=1) - 1).max()) for s in res.snapshots)
        worst = max(worst, dev / (L * 1e-6))
    return worst <= 1.0, f"max row-sum deviation {worst:.3g} x (L * 1e-6)"


def suite_identity_oracle(n: int = 100, seed: int = 0):
    rng = make_rng(seed, 2)
    cfg = ModelConfig(image_size=16, patch_size=4, depth=3, dim=8, heads=2, num_classes=10)
    for _ in range(n):
        x1, x2 = rng.uniform(size=(2, 16, 16, 1))
        a, b = (int(v) for v in rng.choice(10, size=2, replace=False))
        _, spec = cutmix(x1, x2, a, b, rng)
        eye = [np.broadcast_to(np.eye(cfg.num_tokens), (2, cfg.num_tokens, cfg.num_tokens))] * cfg.depth
        y = align_forward(init_label_map(spec, cfg), eye).y_align
        if not np.array_equal(y, spec.target(10)):
            return False, f"mismatch at lam={spec.lam}"
    return True, f"{n} mixes bit-exact"


def suite_mixup_fixed_point(n: int = 100, seed: int = 0):
    rng = make_rng(seed, 3)
    cfg = ModelConfig(image_size=8, patch_size=2, depth=4, dim=8, heads=2, num_classes=5)
    worst = 0.0
    for k in range(n):
        params = init_params(cfg, make_rng(seed, 30, k), np.float64)
        x1, x2 = rng.uniform(size=(2, 8, 8, 1))
        mixed, spec = mixup(x1, x2, 0, 3, rng)
        _, _, atrace = model_forward(mixed, params, keep_cache=False)
        y0 = init_label_map(spec, cfg)
        res = align_forward(y0, atrace.sample(0))
        worst = max(worst, max(float(np.abs(s - y0).max()) for s in res.snapshots))
    return worst <= 1e-6, f"max |Y^l - Y^0| = {worst:.3g}"


def composition_oracle(y0, layers):
    """Product of the per-layer effective matrices (mean attention + I) / 2."""
    t = y0.shape[0]
    m = np.eye(t)
    for heads in layers:
        m = ((np.mean(heads, axis=0) + np.eye(t)) / 2) @ m
    return m @ y0


def suite_composition(n: int = 200, seed: int = 0):
    rng = make_rng(seed, 4)
    worst = 0.0
    for _ in range(n):
        tokens = int(rng.integers(1, 9)) + 1
        c, h, L = int(rng.integers(2, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        y0, layers = random_label_map(rng, tokens, c), random_attention(rng, L, h, tokens)
        got = align_forward(y0, layers).snapshots[-1]
        worst = max(worst, float(np.abs(got - composition_oracle(y0, layers)).max()))
    return worst <= 1e-5, f"max deviation {worst:.3g}"


def suite_conv_presence(seed: int = 0):
    rng = make_rng(seed, 5)
    notes = []
    for m in (3, 5):
        for g in (6, 8):
            rep = conv_presence(ConvDescriptor(rng.uniform(0.1, 1.0, size=(m, m)), (g, g)))
            inner = float(np.abs(rep.presence[rep.interior] - 1).max())
            edge = float(rep.presence[~rep.interior].min())
            if inner > 1e-9 or edge >= 1:
                return False, f"kernel {m} grid {g}: interior dev {inner:.3g}, edge min {edge:.3g}"
            notes.append(f"{m}x{m}/{g}x{g}")
    spreads = [token_presence(softmax_rows(rng.normal(0, 2, size=(16, 16)))).spread for _ in range(100)]
    if min(spreads) <= 0:
        return False, "attention presence did not fluctuate"
    return True, f"{', '.join(notes)} ok; min attention spread {min(spreads):.3g}"


def suite_gradient(seed: int = 0):
    cfg = ModelConfig(image_size=4, patch_size=2, depth=2, dim=8, heads=2, num_classes=3)
    params = init_params(cfg, make_rng(seed, 6), np.float64)
    rng = make_rng(seed, 7)
    x1, x2 = rng.uniform(size=(2, 4, 4, 1))
    mixed, spec = cutmix(x1, x2, 0, 2, rng)
    rep = gradient_check(params, mixed, spec, num=60, seed=seed)
    ok = rep.passed and rep.recompute_shift > 0
    return ok, f"max rel error {rep.max_rel_error:.3g} over {rep.checked} params"


def suite_batch_alignment(seed: int = 0):
    rng = make_rng(seed, 8)
    b, t, c, h, L = 5, 10, 4, 3, 3
    y0 = np.stack([random_label_map(rng, t, c) for _ in range(b)])
    layers = [softmax_rows(rng.normal(0, 2, size=(b, h, t, t))) for _ in range(L)]
    batched = align_batch(y0, layers)
    single = np.stack([align_forward(y0[i], [a[i] for a in layers]).y_align for i in range(b)])
    dev = float(np.abs(batched - single).max())
    return dev <= 1e-12, f"batched vs per-sample deviation {dev:.3g}"


SUITES: dict[str, Callable] = {
    "row_stochastic": suite_row_stochastic,
    "identity_oracle": suite_identity_oracle,
    "mixup_fixed_point": suite_mixup_fixed_point,
    "composition_oracle": suite_composition,
    "conv_presence": suite_conv_presence,
    "gradient_check": suite_gradient,
    "batch_alignment": suite_batch_alignment,
}


def run_all(seed: int = 0, echo=print) -> bool:
    ok_all = True
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn(seed=seed)
        except Exception as e:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= ok
        echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    return ok_all
