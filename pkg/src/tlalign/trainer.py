"""Training loop with mixed samples and aligned soft targets."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .align import align_batch
from .diagnostics import target_rmse
from .mixing import (STRATEGIES, MixSpec, block_wise_mix, cutmix, init_label_map, mixup, no_mix,
                     random_patch_mix)
from .numerics import make_rng, softmax_rows
from .vit import ModelConfig, ModelParams, init_params, model_backward, model_forward

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adamw_lite")

# rng stream ids; every random decision draws from its own stream so that
# changing one part of the pipeline never shifts the others.
STREAM_INIT, STREAM_SHUFFLE, STREAM_PAIR, STREAM_MIX, STREAM_EVAL = range(5)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    optimizer: str = "adamw_lite"
    momentum: float = 0.9
    mix: str = "cutmix"
    mixup_alpha: float = 1.0
    mix_prob: float = 0.5          # random_patch: chance a cell comes from x2
    mix_budget: float = 0.4        # block_wise: target fraction of cells from x2
    tl_align: bool = True
    seed: int = 0
    label_smoothing: float = 0.0
    precision: str = "f32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimizer hyperparameters")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mix not in STRATEGIES:
            raise ValueError(f"mix must be one of {STRATEGIES}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    target_rmse: float
    seconds: float = 0.0

    def record(self) -> dict:
        """Deterministic fields only; wall-clock time is reported separately."""
        return {"epoch": self.epoch, "train_loss": self.train_loss, "train_acc": self.train_acc,
                "test_acc": self.test_acc, "target_rmse": self.target_rmse}


def soft_cross_entropy(logits, target):
    """Mean soft-label cross entropy and its gradient w.r.t. the logits.

    ``target`` is treated as a constant. Works on a single (C,) row or a
    (B, C) batch; the batch loss is the mean over samples.
    """
    logits = np.asarray(logits)
    target = np.asarray(target, dtype=logits.dtype)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    t = np.atleast_2d(target)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    losses = -(t * log_probs).sum(axis=1)
    grad = (np.exp(log_probs) - t) / z.shape[0]
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad


def per_sample_losses(logits, target) -> np.ndarray:
    z = np.atleast_2d(logits)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -(np.atleast_2d(target) * log_probs).sum(axis=1)


def _decayed(name: str) -> bool:
    return name == "patch_proj" or name == "head.w" or name.endswith(
        ("w_q", "w_k", "w_v", "w_o", "mlp.w1", "mlp.w2"))


class SGDMomentum:
    def __init__(self, params: ModelParams, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads, lr: float):
        for name, p in params.tensors.items():
            g = grads[name]
            if self.weight_decay and _decayed(name):
                g = g + self.weight_decay * p
            b = self.buf[name]
            b *= self.momentum
            b += g
            p -= (lr * b).astype(p.dtype)
        params.bump()


class AdamWLite:
    """Adam moments with decoupled weight decay."""

    def __init__(self, params: ModelParams, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: ModelParams, grads, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in params.tensors.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and _decayed(name):
                p *= p.dtype.type(1 - lr * self.weight_decay)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        params.bump()


def make_optimizer(params: ModelParams, cfg: TrainConfig):
    if cfg.optimizer == "sgd_momentum":
        return SGDMomentum(params, cfg.momentum, cfg.weight_decay)
    return AdamWLite(params, cfg.weight_decay)


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def mix_pair(x1, x2, y_a: int, y_b: int, rng: np.random.Generator,
             model_cfg: ModelConfig, cfg: TrainConfig):
    """Apply the configured strategy to one image pair."""
    if cfg.mix == "cutmix":
        return cutmix(x1, x2, y_a, y_b, rng)
    if cfg.mix == "mixup":
        return mixup(x1, x2, y_a, y_b, rng, cfg.mixup_alpha)
    if cfg.mix == "random_patch":
        return random_patch_mix(x1, x2, y_a, y_b, rng, model_cfg.patch_size, cfg.mix_prob)
    if cfg.mix == "block_wise":
        return block_wise_mix(x1, x2, y_a, y_b, rng, model_cfg.patch_size, cfg.mix_budget)
    return no_mix(x1, y_a)


@dataclass
class StepMetrics:
    loss: float
    correct: int
    rmse_sum: float
    count: int
    specs: list[MixSpec] = field(default_factory=list)


def batch_targets(specs, atrace, model_cfg: ModelConfig, use_tl_align: bool):
    """(training targets, conventional mixed targets, aligned targets) for a batch."""
    original = np.stack([s.target(model_cfg.num_classes) for s in specs])
    y0 = np.stack([init_label_map(s, model_cfg) for s in specs])
    aligned = align_batch(y0, atrace.layers, model_cfg.pooling)
    return (aligned if use_tl_align else original), original, aligned


def train_step(params: ModelParams, optimizer, mixed: np.ndarray, specs: list[MixSpec],
               cfg: TrainConfig, lr: float, index_offset: int = 0) -> StepMetrics:
    """One optimizer update on an already mixed batch."""
    model_cfg = params.config
    logits, trace, atrace = model_forward(mixed, params)
    targets, original, aligned = batch_targets(specs, atrace, model_cfg, cfg.tl_align)
    if cfg.label_smoothing:
        targets = (1 - cfg.label_smoothing) * targets + cfg.label_smoothing / model_cfg.num_classes
    targets = targets.astype(params.dtype)
    losses = per_sample_losses(logits, targets)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise FloatingPointError(f"non-finite loss at sample index {index_offset + int(bad[0])}")
    _, grad = soft_cross_entropy(logits, targets)
    grads = model_backward(trace, grad)
    optimizer.step(params, grads, lr)
    dominant = np.where([s.lam >= 0.5 for s in specs], [s.class_a for s in specs],
                        [s.class_b for s in specs])
    correct = int((np.argmax(logits, axis=1) == dominant).sum())
    rmse_sum = target_rmse(original, aligned) * len(specs)
    return StepMetrics(float(losses.sum()), correct, rmse_sum, len(specs), specs)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(images), batch_size):
        logits, _, _ = model_forward(images[i:i + batch_size], params, keep_cache=False)
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds)


def evaluate(params: ModelParams, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    preds = predict(params, images, batch_size)
    return float(np.mean(preds == np.asarray(labels)))


class Trainer:
    """Epoch driver. Mixing decisions depend only on (seed, epoch, position),
    never on model state, so runs that differ only in ``tl_align`` see the
    exact same mixed samples."""

    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, params: ModelParams | None = None):
        self.model_cfg = model_cfg
        self.cfg = cfg
        if params is None:
            params = init_params(model_cfg, make_rng(cfg.seed, STREAM_INIT), cfg.dtype)
        self.params = params
        self.optimizer = make_optimizer(params, cfg)
        self.step_count = 0
        self.mix_log: list[list[dict]] = []

    def epoch_batches(self, n: int, epoch: int):
        order = make_rng(self.cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
        for b, start in enumerate(range(0, n, self.cfg.batch_size)):
            yield b, start, order[start:start + self.cfg.batch_size]

    def mix_batch(self, images, labels, idx, epoch: int, batch: int, start: int):
        # random cyclic pairing: every sample gets a partner other than itself
        order = make_rng(self.cfg.seed, STREAM_PAIR, epoch, batch).permutation(len(idx))
        partner = np.empty_like(order)
        partner[order] = np.roll(order, -1)
        mixed = np.empty((len(idx),) + images.shape[1:], dtype=self.cfg.dtype)
        specs = []
        for i, (s, t) in enumerate(zip(idx, idx[partner])):
            rng = make_rng(self.cfg.seed, STREAM_MIX, epoch, start + i)
            img, spec = mix_pair(images[s], images[t], int(labels[s]), int(labels[t]),
                                 rng, self.model_cfg, self.cfg)
            mixed[i] = img
            specs.append(spec)
        return mixed, specs

    def train_epoch(self, images, labels, epoch: int, steps_per_epoch: int) -> tuple[float, float, float, list[dict]]:
        total = self.cfg.epochs * steps_per_epoch
        loss = correct = rmse = 0.0
        count = 0
        mixes = []
        for b, start, idx in self.epoch_batches(len(images), epoch):
            mixed, specs = self.mix_batch(images, labels, idx, epoch, b, start)
            lr = cosine_lr(self.cfg.lr, self.step_count, total)
            m = train_step(self.params, self.optimizer, mixed, specs, self.cfg, lr, start)
            self.step_count += 1
            loss += m.loss
            correct += m.correct
            rmse += m.rmse_sum
            count += m.count
            mixes.extend(s.log_record() for s in specs)
        return loss / count, correct / count, rmse / count, mixes

    def fit(self, train_x, train_y, test_x, test_y, on_epoch=None) -> list[EpochMetrics]:
        steps = math.ceil(len(train_x) / self.cfg.batch_size)
        history = []
        for epoch in range(self.cfg.epochs):
            t0 = time.perf_counter()
            loss, acc, rmse, mixes = self.train_epoch(train_x, train_y, epoch, steps)
            test_acc = evaluate(self.params, test_x, test_y)
            m = EpochMetrics(epoch + 1, loss, acc, test_acc, rmse, time.perf_counter() - t0)
            log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f rmse %.5f (%.1fs)",
                     m.epoch, loss, acc, test_acc, rmse, m.seconds)
            history.append(m)
            if on_epoch is not None:
                on_epoch(m, mixes)
        return history


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    per_tensor: dict[str, float]
    # largest |J(theta +- eps)| shift caused by recomputing the aligned target
    # instead of freezing it; nonzero means the target depends on theta.
    recompute_shift: float
    recompute_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def _sample_coords(params: ModelParams, n: int, rng, names=None):
    names = list(names or params.tensors)
    coords = [(name, int(rng.integers(params[name].size))) for name in names]
    while len(coords) < n:
        name = names[int(rng.integers(len(names)))]
        coords.append((name, int(rng.integers(params[name].size))))
    return coords


def gradient_check(params: ModelParams, mixed, spec: MixSpec, tl_align: bool = True,
                   num: int = 50, eps: float = 1e-5, seed: int = 0, names=None,
                   floor: float = 1e-8, fd_dtype=np.longdouble) -> GradCheckReport:
    """Central finite differences against the analytic gradient (float64).

    The loss uses the aligned target computed once at the unperturbed
    parameters and then frozen, which is exactly the quantity the analytic
    gradient differentiates. Finite-difference losses are evaluated in
    ``fd_dtype`` (extended precision where the platform has it) so that
    rounding in J does not swamp small gradient entries.
    """
    params = params.astype(np.float64)
    cfg = params.config
    image = np.asarray(mixed, dtype=np.float64)
    probe = params.astype(fd_dtype)
    probe_image = image.astype(fd_dtype)

    def target_for(atrace):
        return batch_targets([spec], atrace, cfg, tl_align)[0][0]

    def loss(target):
        logits, _, atrace = model_forward(probe_image, probe, keep_cache=False)
        t = target if target is not None else target_for(atrace)
        return per_sample_losses(logits, np.asarray(t, dtype=fd_dtype))[0]

    logits, trace, atrace = model_forward(image, params)
    frozen = target_for(atrace)
    frozen.flags.writeable = False
    _, g = soft_cross_entropy(logits[0], frozen)
    grads = model_backward(trace, g[None])

    rng = make_rng(seed, STREAM_EVAL)
    per_tensor: dict[str, float] = {}
    worst = shift = worst_recomputed = 0.0
    coords = _sample_coords(params, num, rng, names)
    for name, flat in coords:
        t = probe[name].reshape(-1)
        orig = t[flat]
        t[flat] = orig + fd_dtype(eps)
        jp, jp_re = loss(frozen), loss(None)
        t[flat] = orig - fd_dtype(eps)
        jm, jm_re = loss(frozen), loss(None)
        t[flat] = orig
        fd = float((jp - jm) / (2 * fd_dtype(eps)))
        fd_re = float((jp_re - jm_re) / (2 * fd_dtype(eps)))
        a = float(grads[name].reshape(-1)[flat])
        err = abs(a - fd) / max(abs(a), abs(fd), floor)
        per_tensor[name] = max(per_tensor.get(name, 0.0), err)
        worst = max(worst, err)
        shift = max(shift, float(abs(jp_re - jp)), float(abs(jm_re - jm)))
        worst_recomputed = max(worst_recomputed, abs(a - fd_re) / max(abs(a), abs(fd_re), floor))
    return GradCheckReport(worst, len(coords), per_tensor, shift, worst_recomputed)
