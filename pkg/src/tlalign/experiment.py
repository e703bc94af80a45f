"""End-to-end orchestration: data, training, reports and figures."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .align import align_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, serialize_config
from .data import Dataset, load_mnist, synth_dataset
from .diagnostics import RatioTrajectory, attention_presence, ratio_trajectory, target_rmse_active
from .mixing import cutmix, init_label_map
from .numerics import make_rng
from .trainer import STREAM_EVAL, EpochMetrics, Trainer
from .vit import ModelParams, model_forward

log = logging.getLogger(__name__)


class JsonLines:
    """Append-only JSON-lines file whose first line names the config hash."""

    def __init__(self, path, kind: str, cfg_hash: str):
        self.path = Path(path)
        self.fh = self.path.open("w", encoding="utf-8")
        self.write({"config_hash": cfg_hash, "kind": kind, "format": 1})

    def write(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    return json.loads(lines[0]), [json.loads(line) for line in lines[1:]]


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    m, d = cfg.model, cfg.data
    if d.source == "mnist":
        if m.channels != 1 or m.num_classes != 10:
            raise ValueError("MNIST runs need channels = 1 and num_classes = 10")
        train = load_mnist(d.mnist_dir, "train", m.image_size, d.train_size)
        test = load_mnist(d.mnist_dir, "test", m.image_size, d.test_size)
    else:
        if m.channels != 1:
            raise ValueError("synthetic data is single-channel")
        train = synth_dataset(m.num_classes, d.synth_per_class, cfg.train.seed, m.image_size,
                              d.synth_noise, "train")
        test = synth_dataset(m.num_classes, max(1, d.synth_per_class // 4), cfg.train.seed,
                             m.image_size, d.synth_noise, "test")
    return train, test


def held_out_mixes(test: Dataset, n: int, seed: int):
    """``n`` CutMix pairs of test images from different classes, fixed by seed."""
    rng = make_rng(seed, STREAM_EVAL, 1)
    out = []
    while len(out) < n:
        i, j = (int(v) for v in rng.choice(len(test), size=2, replace=False))
        a, b = int(test.labels[i]), int(test.labels[j])
        if a == b:
            continue
        mixed, spec = cutmix(test.images[i], test.images[j], a, b, rng)
        if not 0.0 < spec.lam < 1.0:
            continue
        out.append((mixed, test.images[i], test.images[j], spec))
    return out


def _digest(records: list[dict]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r, sort_keys=True).encode())
    return h.hexdigest()


@dataclass
class RunResult:
    history: list[EpochMetrics]
    params: ModelParams
    out_dir: Path
    trajectories: list[RatioTrajectory]
    config_hash: str


def write_diagnostics(params: ModelParams, test: Dataset, cfg: RunConfig, out: Path,
                      cfg_hash: str, extra_records=()) -> list[RatioTrajectory]:
    """Ratio trajectories, alignment dumps and attention presence for held-out mixes."""
    mc = params.config
    samples = held_out_mixes(test, cfg.diag_samples, cfg.train.seed)
    trajectories = []
    presence_layers = [np.zeros(mc.num_tokens) for _ in range(mc.depth)]
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    with JsonLines(out / "diagnostics.jsonl", "diagnostics", cfg_hash) as fh:
        for r in extra_records:
            fh.write(r)
        for k, (mixed, x1, x2, spec) in enumerate(samples):
            tr = ratio_trajectory(params, mixed, x1, x2, spec)
            trajectories.append(tr)
            for rec in tr.records(k):
                fh.write({"kind": "trajectory", **rec})
            _, _, atrace = model_forward(mixed, params, keep_cache=False)
            y0 = init_label_map(spec, mc)
            aligned = align_forward(y0, atrace.sample(0), mc.pooling)
            original = spec.target(mc.num_classes)
            fh.write({"kind": "alignment", "sample": k, "lam": spec.lam,
                      "class_a": spec.class_a, "class_b": spec.class_b,
                      "cls_class_a_mass": aligned.class_mass(spec.class_a),
                      "y_align": aligned.y_align.tolist(),
                      "rmse": float(np.sqrt(np.mean((original - aligned.y_align) ** 2))),
                      "rmse_active": target_rmse_active(original, aligned.y_align)})
            for l, heads in enumerate(atrace.sample(0)):
                presence_layers[l] += attention_presence(heads).presence / len(samples)
            if k == 0:
                plotting.plot_label_maps(y0, aligned.snapshots[-1], spec.class_a, mc.grid,
                                         fig_dir / "label_maps.png")
        for l, p in enumerate(presence_layers):
            fh.write({"kind": "presence", "layer": l + 1, "cls_presence": float(p[0]),
                      "spatial_min": float(p[1:].min()), "spatial_max": float(p[1:].max()),
                      "spatial_std": float(p[1:].std())})
    plotting.plot_ratio_trajectories(trajectories, fig_dir / "trajectories.png")
    plotting.plot_presence([p[1:] for p in presence_layers], mc.grid, fig_dir / "presence.png")
    return trajectories


def run_experiment(cfg: RunConfig) -> RunResult:
    """Train, then write metrics, mixing log, checkpoint, diagnostics and figures."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    (out / "config.txt").write_text(f"# config_hash = {h}\n" + serialize_config(cfg))
    train, test = load_datasets(cfg)
    log.info("config %s: %d train / %d test samples", h, len(train), len(test))
    trainer = Trainer(cfg.model, cfg.train)
    metrics = JsonLines(out / "metrics.jsonl", "metrics", h)
    timing = JsonLines(out / "timing.jsonl", "timing", h)
    mixing = JsonLines(out / "mixing.jsonl", "mixing", h)

    def on_epoch(m: EpochMetrics, mixes):
        metrics.write(m.record())
        timing.write({"epoch": m.epoch, "seconds": round(m.seconds, 3)})
        mixing.write({"epoch": m.epoch, "count": len(mixes), "digest": _digest(mixes),
                      "mean_lam": float(np.mean([r["lam"] for r in mixes]))})

    try:
        history = trainer.fit(train.images, train.labels, test.images, test.labels, on_epoch)
    finally:
        for f in (metrics, timing, mixing):
            f.close()
    save_checkpoint(out / "checkpoint.tla", trainer.params)
    records = [r.record() for r in history]
    (out / "figures").mkdir(exist_ok=True)
    plotting.plot_training_curves(records, out / "figures" / "training.png")
    model_record = {"kind": "model", "mean_rmse_final_epoch": history[-1].target_rmse,
                    "test_acc": history[-1].test_acc, "tl_align": cfg.train.tl_align}
    trajectories = write_diagnostics(trainer.params, test, cfg, out, h, [model_record])
    return RunResult(history, trainer.params, out, trajectories, h)


def diagnose(cfg: RunConfig, checkpoint, out_dir=None) -> list[RatioTrajectory]:
    """Diagnostics for an existing checkpoint."""
    params = load_checkpoint(checkpoint, cfg.train.dtype)
    if params.config != cfg.model:
        log.warning("checkpoint model config differs from run config; using the checkpoint's")
        cfg = dataclasses.replace(cfg, model=params.config)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, test = load_datasets(cfg)
    return write_diagnostics(params, test, cfg, out, config_hash(cfg))
