"""Token-fluctuation diagnostics.

Presence of input tokens under a spatial mixing matrix, the convolution
baseline where interior presence is exactly one, RMSE between original and
aligned targets, and the similarity-based per-layer mixing ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import align_forward
from .mixing import MixSpec, init_label_map
from .vit import ForwardTrace, ModelParams, model_forward


@dataclass
class PresenceReport:
    presence: np.ndarray                   # (N,)
    grid: tuple[int, int] | None = None
    interior: np.ndarray | None = None     # bool (N,), True for non-edge tokens

    @property
    def spread(self) -> float:
        return float(self.presence.max() - self.presence.min())


def token_presence(w, grid=None, margin: int = 0, row_mass=None) -> PresenceReport:
    """Presence of each input token under ``z_hat_j = sum_k W[j, k] z_k``.

    The contribution of input i to output j is ``|W[j, i]|`` divided by the
    output's total absolute weight; presence sums contributions over all
    outputs. ``row_mass`` overrides that total (used for zero-padded
    convolutions, where padding slots absorb part of the kernel).
    """
    w = np.abs(np.asarray(w, dtype=np.float64))
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"mixing matrix must be square, got {w.shape}")
    mass = w.sum(axis=1) if row_mass is None else np.broadcast_to(
        np.asarray(row_mass, dtype=np.float64), (w.shape[0],))
    zero = np.flatnonzero(mass == 0)
    if zero.size:
        raise ValueError(f"mixing matrix row {int(zero[0])} has zero total weight")
    presence = (w / mass[:, None]).sum(axis=0)
    interior = None
    if grid is not None:
        rows, cols = grid
        if rows * cols != w.shape[0]:
            raise ValueError(f"grid {grid} does not hold {w.shape[0]} tokens")
        r, c = np.divmod(np.arange(rows * cols), cols)
        interior = (r >= margin) & (r < rows - margin) & (c >= margin) & (c < cols - margin)
    return PresenceReport(presence, tuple(grid) if grid is not None else None, interior)


@dataclass
class ConvDescriptor:
    kernel: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        m = self.kernel.shape[0]
        if self.kernel.ndim != 2 or self.kernel.shape[1] != m or m % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {self.kernel.shape}")
        if min(self.grid) < m:
            raise ValueError(f"grid {self.grid} smaller than kernel size {m}")

    @property
    def radius(self) -> int:
        return self.kernel.shape[0] // 2


def conv_mixing_matrix(desc: ConvDescriptor) -> np.ndarray:
    """Dense (N, N) matrix of a stride-1, zero-padded depthwise convolution."""
    rows, cols = desc.grid
    r = desc.radius
    t = np.zeros((rows * cols, rows * cols))
    for y in range(rows):
        for x in range(cols):
            j = y * cols + x
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < rows and 0 <= xx < cols:
                        t[j, yy * cols + xx] = desc.kernel[dy + r, dx + r]
    return t


def conv_presence(desc: ConvDescriptor) -> PresenceReport:
    """Presence under a zero-padded convolution.

    Every output spreads the full kernel mass over its window, padding
    included, so each token inside the margin keeps presence exactly one.
    """
    t = conv_mixing_matrix(desc)
    return token_presence(t, desc.grid, desc.radius, row_mass=np.abs(desc.kernel).sum())


def attention_presence(heads) -> PresenceReport:
    """Presence of every token under the head-averaged attention of one layer."""
    a = np.asarray(heads, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    return token_presence(a)


def target_rmse(original, aligned) -> float:
    """RMSE over all classes; batches of shape (B, C) are averaged per sample."""
    o = np.asarray(original, dtype=np.float64)
    a = np.asarray(aligned, dtype=np.float64)
    per = np.sqrt(((o - a) ** 2).mean(axis=-1))
    return float(np.mean(per))


def target_rmse_active(original, aligned) -> float:
    """RMSE restricted to classes carrying mass in either vector."""
    o = np.atleast_2d(np.asarray(original, dtype=np.float64))
    a = np.atleast_2d(np.asarray(aligned, dtype=np.float64))
    vals = []
    for oi, ai in zip(o, a):
        act = (oi > 0) | (ai > 0)
        vals.append(np.sqrt(((oi[act] - ai[act]) ** 2).mean()))
    return float(np.mean(vals))


def _layer_tokens(trace, layer: int) -> np.ndarray:
    z = trace.tokens[layer] if isinstance(trace, ForwardTrace) else trace[layer]
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        if z.shape[0] != 1:
            raise ValueError("expected a single-sample trace")
        z = z[0]
    return z


def _max_cosine(v: np.ndarray, z: np.ndarray) -> float:
    nv = np.linalg.norm(v)
    nz = np.linalg.norm(z, axis=1)
    if nv == 0 or np.any(nz == 0):
        raise ValueError("cosine similarity undefined for a zero-norm token")
    return float(np.max(z @ v / (nz * nv)))


def similarity_ratio(trace_mixed, trace_1, trace_2, layer: int, token: int = 0) -> float:
    """Share of x1 in a mixed token, from its best cosine match in each source.

    Traces are ForwardTraces of one sample or per-layer lists of (T, d)
    token matrices.
    """
    zm = _layer_tokens(trace_mixed, layer)
    if not 0 <= token < zm.shape[0]:
        raise IndexError(f"token {token} outside 0..{zm.shape[0] - 1}")
    s1 = _max_cosine(zm[token], _layer_tokens(trace_1, layer))
    s2 = _max_cosine(zm[token], _layer_tokens(trace_2, layer))
    m = max(s1, s2)
    e1, e2 = np.exp(s1 - m), np.exp(s2 - m)
    return float(e1 / (e1 + e2))


@dataclass
class RatioTrajectory:
    lam: float
    class_a: int
    class_b: int
    tl_align: list[float]
    similarity: list[float]
    cutmix: list[float]

    def records(self, sample: int) -> list[dict]:
        return [{"sample": sample, "layer": l, "lam": self.lam,
                 "class_a": self.class_a, "class_b": self.class_b,
                 "lam_tl_align": self.tl_align[l], "lam_similarity": self.similarity[l],
                 "lam_cutmix": self.cutmix[l]}
                for l in range(len(self.tl_align))]


def ratio_trajectory(params: ModelParams, mixed, x1, x2, spec: MixSpec, token: int = 0) -> RatioTrajectory:
    """Per-layer mixing ratio of one token from alignment, similarity and CutMix."""
    cfg = params.config
    batch = np.stack([np.asarray(v).reshape(cfg.image_size, cfg.image_size, cfg.channels)
                      for v in (mixed, x1, x2)])
    _, trace, atrace = model_forward(batch, params, keep_cache=False)
    aligned = align_forward(init_label_map(spec, cfg), atrace.sample(0), cfg.pooling)
    per_layer = [[z[i] for z in trace.tokens] for i in range(3)]
    sim = [similarity_ratio(per_layer[0], per_layer[1], per_layer[2], l, token)
           for l in range(cfg.depth + 1)]
    tl = aligned.class_mass(spec.class_a, token)
    return RatioTrajectory(spec.lam, spec.class_a, spec.class_b, tl, sim, [spec.lam] * (cfg.depth + 1))
