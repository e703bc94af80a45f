import math

import numpy as np
import pytest

import tlalign.trainer as trainer_mod
from tlalign.mixing import cutmix, cutmix_box, no_mix
from tlalign.numerics import make_rng
from tlalign.trainer import (AdamWLite, SGDMomentum, TrainConfig, Trainer, batch_targets, cosine_lr, evaluate,
                             gradient_check, soft_cross_entropy, train_step)
from tlalign.data import synth_dataset
from tlalign.vit import AttentionTrace, ModelConfig, init_params, model_forward


def test_soft_ce_examples():
    loss, grad = soft_cross_entropy(np.zeros(4), np.full(4, 0.25))
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    loss, grad = soft_cross_entropy(np.zeros(2), np.array([1.0, 0.0]))
    np.testing.assert_allclose(grad, [-0.5, 0.5])
    loss, _ = soft_cross_entropy(np.array([200.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    assert 0 <= loss < 1e-80


def test_soft_ce_batch_gradient_is_averaged():
    logits = np.zeros((2, 2))
    _, grad = soft_cross_entropy(logits, np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(grad, [[-0.25, 0.25], [0.25, -0.25]])


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


CFG = ModelConfig(image_size=8, patch_size=2, depth=2, dim=16, heads=2, num_classes=4)


def _batch(n=6, seed=0, lam_box=(0, 0, 3, 5)):
    rng = make_rng(seed, 40)
    x = rng.uniform(size=(2 * n, 8, 8, 1))
    mixed, specs = [], []
    for i in range(n):
        img, spec = cutmix_box(x[i], x[n + i], i % 4, (i + 1) % 4, lam_box)
        mixed.append(img)
        specs.append(spec)
    return np.stack(mixed), specs


def test_targets_off_equal_mixed_labels():
    params = init_params(CFG, make_rng(0, 0), np.float64)
    mixed, specs = _batch()
    _, _, atrace = model_forward(mixed, params, keep_cache=False)
    targets, original, aligned = batch_targets(specs, atrace, CFG, use_tl_align=False)
    np.testing.assert_array_equal(targets, np.stack([s.target(4) for s in specs]))
    assert not np.array_equal(aligned, original)


def test_identity_attention_on_off_bit_identical(monkeypatch):
    real = trainer_mod.model_forward

    def identity_attention(images, p, keep_cache=True):
        logits, trace, atrace = real(images, p, keep_cache)
        eye = np.broadcast_to(np.eye(CFG.num_tokens), atrace.layers[0].shape)
        return logits, trace, AttentionTrace([eye] * len(atrace))

    monkeypatch.setattr(trainer_mod, "model_forward", identity_attention)
    mixed, specs = _batch()
    losses = []
    for flag in (True, False):
        params = init_params(CFG, make_rng(0, 0))
        cfg = TrainConfig(tl_align=flag)
        opt = AdamWLite(params, cfg.weight_decay)
        losses.append([train_step(params, opt, mixed, specs, cfg, 1e-3).loss for _ in range(3)])
    assert losses[0] == losses[1]


def test_no_mix_targets_are_one_hot():
    params = init_params(CFG, make_rng(0, 0))
    rng = make_rng(0, 41)
    specs = [no_mix(rng.uniform(size=(8, 8, 1)), k)[1] for k in range(4)]
    _, _, atrace = model_forward(rng.uniform(size=(4, 8, 8, 1)), params, keep_cache=False)
    targets, _, _ = batch_targets(specs, atrace, CFG, use_tl_align=True)
    np.testing.assert_array_equal(targets, np.eye(4))


def test_no_mix_training_targets_one_hot_every_step(monkeypatch):
    seen = []
    real = trainer_mod.batch_targets

    def spy(specs, atrace, model_cfg, use):
        out = real(specs, atrace, model_cfg, use)
        seen.append((out[0], np.stack([np.eye(model_cfg.num_classes)[s.class_a] for s in specs])))
        return out

    monkeypatch.setattr(trainer_mod, "batch_targets", spy)
    data = synth_dataset(4, 6, 0, image_size=8)
    Trainer(CFG, TrainConfig(epochs=2, batch_size=8, mix="none")).fit(
        data.images, data.labels, data.images, data.labels)
    assert len(seen) == 6
    for targets, onehot in seen:
        np.testing.assert_array_equal(targets, onehot)


def test_nan_loss_names_sample_index():
    params = init_params(CFG, make_rng(0, 0))
    mixed, specs = _batch()
    mixed[3, 0, 0, 0] = np.nan
    opt = AdamWLite(params)
    with pytest.raises(FloatingPointError, match="sample index 13"):
        train_step(params, opt, mixed.astype(np.float32), specs, TrainConfig(), 1e-3, index_offset=10)


def _fit(tl_align, seed=3, epochs=2):
    data = synth_dataset(4, 12, seed, image_size=8)
    t = Trainer(CFG, TrainConfig(epochs=epochs, batch_size=16, seed=seed, tl_align=tl_align))
    mixes = []
    hist = t.fit(data.images, data.labels, data.images, data.labels, lambda m, mx: mixes.append(mx))
    return [h.record() for h in hist], mixes


def test_training_deterministic():
    a, _ = _fit(True)
    b, _ = _fit(True)
    assert a == b


def test_paired_runs_share_mixing_decisions():
    on, mix_on = _fit(True)
    off, mix_off = _fit(False)
    assert mix_on == mix_off
    assert on != off


def test_gradient_check_head_only():
    cfg = ModelConfig(image_size=4, patch_size=2, depth=2, dim=8, heads=2, num_classes=3)
    params = init_params(cfg, make_rng(0, 0), np.float64)
    rng = make_rng(0, 42)
    mixed, spec = cutmix(*rng.uniform(size=(2, 4, 4, 1)), 0, 2, rng)
    rep = gradient_check(params, mixed, spec, num=50, names=["head.w", "head.b"])
    assert rep.max_rel_error < 1e-9, rep.per_tensor


def test_gradient_check_full_tiny_model_and_stop_gradient():
    cfg = ModelConfig(image_size=4, patch_size=2, depth=2, dim=8, heads=2, num_classes=3)
    params = init_params(cfg, make_rng(1, 0), np.float64)
    rng = make_rng(1, 42)
    mixed, spec = cutmix_box(*rng.uniform(size=(2, 4, 4, 1)), 0, 2, (1, 1, 2, 3))
    rep = gradient_check(params, mixed, spec, num=60)
    assert rep.checked >= 50
    assert len(rep.per_tensor) == len(params.tensors)     # every tensor kind sampled
    assert rep.max_rel_error < 1e-4
    assert rep.recompute_shift > 0                        # the target does depend on theta


def test_random_init_accuracy_near_chance():
    # balanced labels independent of the pixels: accuracy is Binomial(1000, 0.1) / 1000
    images = make_rng(0, 44).uniform(size=(1000, 8, 8, 1)).astype(np.float32)
    labels = np.arange(1000) % 10
    cfg = ModelConfig(image_size=8, patch_size=2, depth=2, dim=16, heads=2, num_classes=10)
    accs = [evaluate(init_params(cfg, make_rng(s, 0)), images, labels) for s in range(3)]
    for acc in accs:
        assert abs(acc - 0.1) <= 0.03, accs


def test_evaluate_empty_set():
    with pytest.raises(ValueError, match="empty"):
        evaluate(init_params(CFG, make_rng(0, 0)), np.zeros((0, 8, 8, 1)), np.zeros(0))


def test_overfit_eight_samples():
    cfg = ModelConfig(image_size=8, patch_size=2, depth=2, dim=32, heads=2, num_classes=8)
    rng = make_rng(0, 43)
    x = rng.uniform(size=(8, 8, 8, 1)).astype(np.float32)
    y = np.arange(8)
    t = Trainer(cfg, TrainConfig(epochs=500, batch_size=8, lr=3e-3, weight_decay=0.0, mix="none"))
    losses = []
    for epoch in range(500):
        loss, *_ = t.train_epoch(x, y, epoch, 1)
        losses.append(loss)
        if loss < 0.01:
            break
    assert min(losses) < 0.05
    assert losses[-1] < 0.01
    assert evaluate(t.params, x, y) == 1.0


def test_adamw_decay_is_decoupled():
    params = init_params(CFG, make_rng(0, 0), np.float64)
    before = params.copy()
    opt = AdamWLite(params, weight_decay=0.1)
    opt.step(params, {k: np.zeros_like(v) for k, v in params.tensors.items()}, lr=0.5)
    np.testing.assert_allclose(params["head.w"], before["head.w"] * (1 - 0.05))
    np.testing.assert_array_equal(params["blocks.0.ln1.gain"], before["blocks.0.ln1.gain"])
    assert params.version == before.version + 1


def test_sgd_momentum_descends_quadratic():
    params = init_params(CFG, make_rng(0, 0), np.float64)
    opt = SGDMomentum(params, momentum=0.9)
    start = float((params["head.w"] ** 2).sum())
    for _ in range(100):
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["head.w"] = 2 * params["head.w"]
        opt.step(params, grads, lr=0.05)
    assert float((params["head.w"] ** 2).sum()) < 0.1 * start


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")


def test_batch_pairing_never_self():
    t = Trainer(CFG, TrainConfig(batch_size=7))
    images = np.arange(7 * 64, dtype=np.float32).reshape(7, 8, 8, 1)
    for batch in range(50):
        mixed, specs = t.mix_batch(images, np.zeros(7, dtype=int), np.arange(7), 0, batch, 0)
        for i, spec in enumerate(specs):
            if spec.lam < 1:
                cut = spec.mask == 0
                assert not np.array_equal(mixed[i][cut], images[i][cut])
