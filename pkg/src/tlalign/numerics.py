"""Dense linear-algebra and RNG kernels shared by the rest of the package.

Matrices are plain 2-D numpy arrays. Training runs in float32; every oracle
and gradient check runs in float64.
"""

from __future__ import annotations

import numpy as np

TRAIN_DTYPE = np.float32
ORACLE_DTYPE = np.float64


def _as_matrix(m, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    """Dense product ``a @ b`` with an explicit shape check."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _check_finite(a @ b, "matmul")


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction. Works on any array along its last axis."""
    m = np.asarray(m)
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(ORACLE_DTYPE)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def row_normalize(m) -> np.ndarray:
    """Scale each row so its entries sum to 1.

    Negative entries are replaced by their absolute values first, so the
    result is always nonnegative and row-stochastic. Arrays with more than
    two axes are treated as stacks of matrices. Rows that already sum to
    one within rounding (row length x machine epsilon) are returned
    unchanged, which makes the operation exactly idempotent.
    """
    m = np.asarray(m)
    if m.ndim < 2:
        raise ValueError(f"row_normalize needs a matrix, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(ORACLE_DTYPE)
    if np.any(m < 0):
        m = np.abs(m)
    sums = m.sum(axis=-1, keepdims=True)
    zero = np.flatnonzero(sums[..., 0].reshape(-1) == 0)
    if zero.size:
        idx = np.unravel_index(int(zero[0]), sums.shape[:-1])
        row = int(idx[-1]) if m.ndim == 2 else tuple(int(i) for i in idx)
        raise ValueError(f"row_normalize: row {row} sums to zero")
    tol = m.shape[-1] * np.finfo(m.dtype).eps
    return np.where(np.abs(sums - 1) <= tol, m, m / sums)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for ``seed`` and an optional stream path of nonnegative ints.

    Distinct stream paths give statistically independent generators; the
    same (seed, stream) always reproduces the same draws.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))
