"""Token-label alignment.

Label maps Y are (T, C) row-stochastic float64 arrays, one row per token
(class token first). They are pushed through the network alongside the
tokens: attention mixes label rows with the head-averaged attention matrix,
residual branches are renormalized sums, channel-wise and point-wise
operations leave labels alone, and patch merging sums then renormalizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import row_normalize
from .vit import AttentionTrace

OP_KINDS = ("spatial_mixing", "channel_mixing", "pointwise", "residual", "spatial_aggregation")


def _heads_array(heads) -> np.ndarray:
    a = np.asarray(heads, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"attention heads must be (H, T, T), got {a.shape}")
    return a


def align_spatial(y, heads) -> np.ndarray:
    """Mix label rows with the mean attention matrix over heads."""
    y = np.asarray(y, dtype=np.float64)
    a = _heads_array(heads)
    if y.ndim != 2 or a.shape[1] != y.shape[0]:
        raise ValueError(f"label map {y.shape} does not match attention {a.shape}")
    return a.mean(axis=0) @ y


def align_block(y, heads, return_steps: bool = False):
    """Labels after one transformer block.

    The attention residual averages the mixed and incoming labels; the MLP
    half of the block is an explicit identity on labels. With
    ``return_steps`` the four intermediate maps (Y_hat, Y', Y_hat', Y_out)
    are returned as well.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = align_spatial(y, heads)
    y_mid = row_normalize(y_hat + y)
    y_mlp = y_mid                      # channel mixing leaves labels unchanged
    y_out = row_normalize(y_mlp + y_mid)
    if return_steps:
        return y_out, (y_hat, y_mid, y_mlp, y_out)
    return y_out


def _check_partition(groups, n: int):
    seen = sorted(i for g in groups for i in g)
    if seen != list(range(1, n + 1)):
        raise ValueError(f"aggregation groups must partition spatial rows 1..{n}")


def align_aggregate(y, groups, has_cls: bool = True) -> np.ndarray:
    """Merge spatial label rows group by group (sum, then renormalize).

    ``groups`` lists spatial row indices (1-based when a class-token row is
    present). The class-token row passes through unchanged.
    """
    y = np.asarray(y, dtype=np.float64)
    offset = 1 if has_cls else 0
    groups = [list(g) for g in groups]
    if has_cls:
        _check_partition(groups, y.shape[0] - 1)
    else:
        _check_partition([[i + 1 for i in g] for g in groups], y.shape[0])
    merged = row_normalize(np.stack([y[g].sum(axis=0) for g in groups]))
    if offset:
        return np.vstack([y[:1], merged])
    return merged


@dataclass
class OpDescriptor:
    kind: str
    matrix: np.ndarray | None = None             # spatial_mixing
    inner: list["OpDescriptor"] = field(default_factory=list)   # residual branch g
    groups: list[list[int]] | None = None        # spatial_aggregation
    has_cls: bool = True

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown operation kind {self.kind!r}")
        if self.kind == "spatial_mixing":
            if self.matrix is None or np.ndim(self.matrix) != 2 or \
                    np.shape(self.matrix)[0] != np.shape(self.matrix)[1]:
                raise ValueError("spatial_mixing needs a square mixing matrix")
        if self.kind == "spatial_aggregation" and not self.groups:
            raise ValueError("spatial_aggregation needs token groups")


def align_generic(y, op: OpDescriptor) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if op.kind == "spatial_mixing":
        w = np.asarray(op.matrix, dtype=np.float64)
        if w.shape[1] != y.shape[0]:
            raise ValueError(f"mixing matrix {w.shape} does not match label map {y.shape}")
        return row_normalize(w) @ y
    if op.kind in ("channel_mixing", "pointwise"):
        return y
    if op.kind == "residual":
        g = y
        for inner in op.inner:
            g = align_generic(g, inner)
        return row_normalize(y + g)
    return align_aggregate(y, op.groups, op.has_cls)


@dataclass
class AlignedTarget:
    y_align: np.ndarray
    snapshots: list[np.ndarray] | None = None      # Y^0 .. Y^L

    def class_mass(self, cls: int, row: int = 0) -> list[float]:
        """Per-layer mass of ``cls`` in one token row (class token by default)."""
        return [float(s[row, cls]) for s in self.snapshots]


def _layers_of(trace) -> list[np.ndarray]:
    if isinstance(trace, AttentionTrace):
        layers = []
        for a in trace.layers:
            if a.ndim == 4:
                if a.shape[0] != 1:
                    raise ValueError("batched trace: use align_batch or trace.sample(b)")
                a = a[0]
            layers.append(a)
        return layers
    return list(trace)


def pool_labels(y, pooling: str) -> np.ndarray:
    if pooling == "class_token":
        return y[..., 0, :]
    return y[..., 1:, :].mean(axis=-2)


def align_forward(y0, trace, pooling: str = "class_token", schedule=None,
                  num_layers: int | None = None, keep_snapshots: bool = True) -> AlignedTarget:
    """Propagate Y0 through every recorded layer and pool the final map.

    ``schedule`` optionally maps a 0-based layer index to aggregation
    groups applied after that layer.
    """
    layers = _layers_of(trace)
    if num_layers is not None and len(layers) != num_layers:
        raise ValueError(f"trace has {len(layers)} layers, model has {num_layers}")
    if not layers:
        raise ValueError("attention trace is empty")
    schedule = schedule or {}
    y = np.asarray(y0, dtype=np.float64)
    snaps = [y] if keep_snapshots else None
    for l, heads in enumerate(layers):
        y = align_block(y, heads)
        if l in schedule:
            y = align_aggregate(y, schedule[l])
        if keep_snapshots:
            snaps.append(y)
    return AlignedTarget(pool_labels(y, pooling), snaps)


def align_batch(y0: np.ndarray, layers, pooling: str = "class_token", cls_track: bool = False):
    """Vectorized alignment of a batch: Y0 (B, T, C), layers of (B, H, T, T).

    Returns y_align (B, C); with ``cls_track`` also the class-token row at
    every layer, shaped (B, L+1, C).
    """
    y = np.asarray(y0, dtype=np.float64)
    track = [y[:, 0]] if cls_track else None
    for a in layers:
        m = np.asarray(a, dtype=np.float64).mean(axis=1)
        y_mid = row_normalize(m @ y + y)
        y = row_normalize(y_mid + y_mid)
        if cls_track:
            track.append(y[:, 0])
    out = pool_labels(y, pooling)
    if cls_track:
        return out, np.stack(track, axis=1)
    return out


def final_target(target: AlignedTarget) -> np.ndarray:
    """The loss target as a read-only constant (no gradient ever flows into it)."""
    y = np.array(target.y_align, dtype=np.float64, copy=True)
    y.flags.writeable = False
    return y
