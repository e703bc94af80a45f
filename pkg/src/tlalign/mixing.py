"""Sample mixing strategies and per-token label map initialization.

Every strategy returns the mixed image together with a :class:`MixSpec`
whose mask records, per pixel, the fraction taken from the first image.
Mixing ratios are recomputed from the final mask so they are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vit import ModelConfig

STRATEGIES = ("cutmix", "mixup", "random_patch", "block_wise", "none")


@dataclass
class MixSpec:
    strategy: str
    mask: np.ndarray           # (H, W) float64, 1 = pixel from x1
    lam: float                 # fraction of x1 content in the mixed image
    class_a: int
    class_b: int
    box: tuple[int, int, int, int] | None = None   # r_x, r_y, r_w, r_h (cutmix only)

    def target(self, num_classes: int) -> np.ndarray:
        """The conventional mixed label lam * e_a + (1 - lam) * e_b."""
        y = np.zeros(num_classes)
        y[self.class_a] += self.lam
        y[self.class_b] += 1.0 - self.lam
        return y

    def log_record(self) -> dict:
        return {"strategy": self.strategy, "lam": self.lam, "a": self.class_a,
                "b": self.class_b, "box": list(self.box) if self.box else None}


def _compose(x1, x2, mask):
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ValueError(f"images differ in shape: {x1.shape} vs {x2.shape}")
    m = mask.reshape(mask.shape + (1,) * (x1.ndim - 2)).astype(x1.dtype)
    return m * x1 + (1 - m) * x2


def _binary_lambda(mask) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def cutmix_box(x1, x2, y_a: int, y_b: int, box):
    """Paste the ``box = (r_x, r_y, r_w, r_h)`` region of x2 into x1."""
    h, w = np.shape(x1)[:2]
    rx, ry, rw, rh = (int(v) for v in box)
    x_lo, x_hi = min(max(rx, 0), w), min(max(rx + rw, 0), w)
    y_lo, y_hi = min(max(ry, 0), h), min(max(ry + rh, 0), h)
    mask = np.ones((h, w))
    mask[y_lo:y_hi, x_lo:x_hi] = 0.0
    spec = MixSpec("cutmix", mask, _binary_lambda(mask), int(y_a), int(y_b),
                   (x_lo, y_lo, x_hi - x_lo, y_hi - y_lo))
    return _compose(x1, x2, mask), spec


def cutmix(x1, x2, y_a: int, y_b: int, rng: np.random.Generator):
    """CutMix with the original box sampler: area 1 - lam', uniform centre, clipped."""
    h, w = np.shape(x1)[:2]
    cut = math.sqrt(1.0 - rng.uniform())
    rw = int(math.floor(w * cut + 0.5))
    rh = int(math.floor(h * cut + 0.5))
    cx = int(rng.integers(w))
    cy = int(rng.integers(h))
    return cutmix_box(x1, x2, y_a, y_b, (cx - rw // 2, cy - rh // 2, rw, rh))


def mixup(x1, x2, y_a: int, y_b: int, rng: np.random.Generator | None = None,
          alpha: float = 1.0, lam: float | None = None):
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    h, w = np.shape(x1)[:2]
    mask = np.full((h, w), float(lam))
    return _compose(x1, x2, mask), MixSpec("mixup", mask, float(lam), int(y_a), int(y_b))


def no_mix(x1, y_a: int):
    h, w = np.shape(x1)[:2]
    mask = np.ones((h, w))
    return np.array(x1, copy=True), MixSpec("none", mask, 1.0, int(y_a), int(y_a))


def _grid_shape(x1, grid_unit: int):
    h, w = np.shape(x1)[:2]
    if grid_unit <= 0 or h % grid_unit or w % grid_unit:
        raise ValueError(f"image {h}x{w} is not divisible into {grid_unit}-pixel cells")
    return h // grid_unit, w // grid_unit


def grid_mix(x1, x2, y_a: int, y_b: int, cells, grid_unit: int, strategy: str = "random_patch"):
    """Swap the grid cells flagged True in ``cells`` from x2 into x1."""
    gh, gw = _grid_shape(x1, grid_unit)
    cells = np.asarray(cells, dtype=bool)
    if cells.shape != (gh, gw):
        raise ValueError(f"cell mask shape {cells.shape} != grid {(gh, gw)}")
    mask = np.kron((~cells).astype(np.float64), np.ones((grid_unit, grid_unit)))
    return _compose(x1, x2, mask), MixSpec(strategy, mask, _binary_lambda(mask), int(y_a), int(y_b))


def random_patch_mix(x1, x2, y_a: int, y_b: int, rng: np.random.Generator,
                     grid_unit: int, mix_prob: float = 0.5):
    """Each grid cell independently comes from x2 with probability ``mix_prob``."""
    gh, gw = _grid_shape(x1, grid_unit)
    cells = rng.uniform(size=(gh, gw)) < mix_prob
    return grid_mix(x1, x2, y_a, y_b, cells, grid_unit, "random_patch")


def sample_block_cells(gh: int, gw: int, budget: float, rng: np.random.Generator,
                       attempts: int = 10) -> np.ndarray:
    """Block sampler in the style of BEiT masking.

    Blocks with log-uniform aspect ratio in [0.3, 1/0.3] and an area of
    16-25% of the remaining cell budget are placed until the budget is
    used. A block may not add more new cells than remain; the loop stops
    when ``attempts`` consecutive placements fail.
    """
    cells = np.zeros((gh, gw), dtype=bool)
    remaining = int(round(budget * gh * gw))
    log_ar = (math.log(0.3), math.log(1 / 0.3))
    while remaining > 0:
        placed = False
        for _ in range(attempts):
            area = max(1.0, rng.uniform(0.16, 0.25) * remaining)
            ar = math.exp(rng.uniform(*log_ar))
            bh = max(1, int(round(math.sqrt(area * ar))))
            bw = max(1, int(round(math.sqrt(area / ar))))
            if bh > gh or bw > gw:
                continue
            top = int(rng.integers(gh - bh + 1))
            left = int(rng.integers(gw - bw + 1))
            new = bh * bw - int(cells[top:top + bh, left:left + bw].sum())
            if 0 < new <= remaining:
                cells[top:top + bh, left:left + bw] = True
                remaining -= new
                placed = True
                break
        if not placed:
            break
    return cells


def block_wise_mix(x1, x2, y_a: int, y_b: int, rng: np.random.Generator,
                   grid_unit: int, budget: float = 0.4):
    gh, gw = _grid_shape(x1, grid_unit)
    cells = sample_block_cells(gh, gw, budget, rng)
    return grid_mix(x1, x2, y_a, y_b, cells, grid_unit, "block_wise")


def init_label_map(spec: MixSpec, config: ModelConfig) -> np.ndarray:
    """Initial (N+1, C) label map: class-token row first, then one row per patch.

    Patch rows hold the fraction of the patch's pixels taken from x1.
    """
    c = config.num_classes
    if not (0 <= spec.class_a < c and 0 <= spec.class_b < c):
        raise ValueError(f"class indices ({spec.class_a}, {spec.class_b}) out of range for C={c}")
    s, p = config.image_size, config.patch_size
    if spec.mask.shape != (s, s):
        raise ValueError(f"mask shape {spec.mask.shape} does not match image size {s}")
    if spec.strategy == "mixup":
        frac = np.full(config.num_patches, spec.lam)
    else:
        g = s // p
        frac = spec.mask.reshape(g, p, g, p).sum(axis=(1, 3)).reshape(-1) / (p * p)
    y = np.zeros((config.num_tokens, c))
    y[0, spec.class_a] += spec.lam
    y[0, spec.class_b] += 1.0 - spec.lam
    y[1:, spec.class_a] += frac
    y[1:, spec.class_b] += 1.0 - frac
    return y


def write_pgm(path, image):
    """Binary PGM (P5) of a [0, 1] grayscale image."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img.mean(axis=2)
    data = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def dump_mixed_sample(prefix, image, spec: MixSpec):
    """Write ``<prefix>.pgm`` and a ``<prefix>.txt`` sidecar describing the mix."""
    prefix = Path(prefix)
    write_pgm(prefix.with_suffix(".pgm"), image)
    box = " ".join(str(v) for v in spec.box) if spec.box else "none"
    prefix.with_suffix(".txt").write_text(
        f"strategy = {spec.strategy}\nlambda = {spec.lam!r}\n"
        f"class_a = {spec.class_a}\nclass_b = {spec.class_b}\nbox = {box}\n")
