import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate2d

import tlalign.diagnostics as diag
from tlalign.diagnostics import (ConvDescriptor, attention_presence, conv_mixing_matrix, conv_presence,
                                 ratio_trajectory, similarity_ratio, target_rmse, target_rmse_active,
                                 token_presence)
from tlalign.mixing import cutmix_box
from tlalign.numerics import make_rng, softmax_rows
from tlalign.vit import AttentionTrace, ModelConfig, init_params


def test_presence_examples():
    np.testing.assert_array_equal(token_presence(np.eye(4)).presence, np.ones(4))
    np.testing.assert_allclose(token_presence([[0.9, 0.1], [0.9, 0.1]]).presence, [1.8, 0.2])
    perm = np.eye(5)[[3, 0, 4, 1, 2]]
    np.testing.assert_array_equal(token_presence(perm).presence, np.ones(5))


def test_presence_zero_row():
    with pytest.raises(ValueError, match="row 0"):
        token_presence([[0.0, 0.0], [1.0, 0.0]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12)).map(lambda t: (t[0], t[0])),
              elements=st.floats(-10, 10)).filter(lambda w: np.all(np.abs(w).sum(axis=1) > 1e-3)))
def test_presence_sums_to_token_count(w):
    rep = token_presence(w)
    assert np.all(rep.presence >= 0)
    assert abs(rep.presence.sum() - w.shape[0]) <= 1e-9


def test_conv_one_by_one_kernel():
    t = conv_mixing_matrix(ConvDescriptor([[2.5]], (3, 3)))
    np.testing.assert_array_equal(t, 2.5 * np.eye(9))


def test_conv_matrix_matches_direct_correlation():
    rng = make_rng(0, 10)
    for m, g in ((3, 5), (5, 6), (3, 8)):
        k = rng.normal(size=(m, m))
        field = rng.normal(size=(g, g))
        t = conv_mixing_matrix(ConvDescriptor(k, (g, g)))
        direct = correlate2d(field, k, mode="same", boundary="fill", fillvalue=0)
        np.testing.assert_allclose(t @ field.reshape(-1), direct.reshape(-1), atol=1e-12)


def test_conv_uniform_interior_and_edges():
    rep = conv_presence(ConvDescriptor(np.ones((3, 3)), (5, 5)))
    assert rep.interior.sum() == 9
    np.testing.assert_allclose(rep.presence[rep.interior], 1.0, atol=1e-12)
    # brute force: a uniform kernel hands each in-grid neighbour 1/9 of every output
    for idx in np.flatnonzero(~rep.interior):
        r, c = divmod(int(idx), 5)
        inside = sum(1 for dr in (-1, 0, 1) for dc in (-1, 0, 1) if 0 <= r + dr < 5 and 0 <= c + dc < 5)
        assert rep.presence[idx] == pytest.approx(inside / 9, abs=1e-12)
        assert rep.presence[idx] < 1
    assert rep.presence[0] == pytest.approx(4 / 9)


@pytest.mark.parametrize("m", [3, 5])
@pytest.mark.parametrize("g", [6, 8])
def test_conv_interior_presence_any_nonnegative_kernel(m, g):
    rng = make_rng(m * 10 + g, 0)
    for _ in range(10):
        rep = conv_presence(ConvDescriptor(rng.uniform(0, 1, size=(m, m)), (g, g)))
        assert np.abs(rep.presence[rep.interior] - 1).max() <= 1e-9
        assert rep.presence[~rep.interior].min() < 1


def test_conv_descriptor_validation():
    with pytest.raises(ValueError, match="odd"):
        ConvDescriptor(np.ones((2, 2)), (4, 4))
    with pytest.raises(ValueError, match="smaller"):
        ConvDescriptor(np.ones((5, 5)), (4, 4))


def test_attention_presence_fluctuates():
    rng = make_rng(0, 11)
    for _ in range(100):
        rep = attention_presence(softmax_rows(rng.normal(0, 1, size=(2, 16, 16))))
        assert rep.spread > 0
        assert rep.presence.sum() == pytest.approx(16)


def test_rmse_examples():
    assert target_rmse([0.3, 0.7], [0.3, 0.7]) == 0
    assert target_rmse([1, 0], [0.5, 0.5]) == 0.5
    assert target_rmse([[1, 0], [0, 1]], [[0.5, 0.5], [0, 1]]) == 0.25
    # active-class variant differs by sqrt(C/2) when only two classes carry mass
    o, a = np.eye(10)[2] * 0.6 + np.eye(10)[7] * 0.4, np.eye(10)[2] * 0.5 + np.eye(10)[7] * 0.5
    assert target_rmse_active(o, a) == pytest.approx(target_rmse(o, a) * math.sqrt(5))


def test_rmse_metric_properties():
    rng = make_rng(0, 12)
    for _ in range(500):
        x, y, z = rng.dirichlet(np.ones(5), size=3)
        assert target_rmse(x, y) == target_rmse(y, x)
        assert target_rmse(x, y) > 0
        assert target_rmse(x, z) <= target_rmse(x, y) + target_rmse(y, z) + 1e-15


def test_similarity_examples():
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    mixed = [np.array([e1])]
    src1 = [np.array([e1, e1 + e2])]
    src2 = [np.array([e2, np.eye(3)[2]])]
    assert similarity_ratio(mixed, src1, src2, 0) == pytest.approx(math.e / (math.e + 1))
    assert similarity_ratio(mixed, src1, src1, 0) == 0.5


def test_similarity_zero_norm():
    with pytest.raises(ValueError, match="zero-norm"):
        similarity_ratio([np.zeros((1, 3))], [np.ones((1, 3))], [np.ones((1, 3))], 0)


def test_similarity_in_open_unit_interval():
    rng = make_rng(0, 13)
    for _ in range(200):
        z = rng.normal(size=(3, 5, 4))
        r = similarity_ratio([z[0]], [z[1]], [z[2]], 0, token=int(rng.integers(5)))
        assert 0 < r < 1


def _trajectory_inputs(cfg):
    rng = make_rng(0, 14)
    x1, x2 = rng.uniform(size=(2, cfg.image_size, cfg.image_size, 1))
    return cutmix_box(x1, x2, 1, 3, (0, 0, 5, 3)), x1, x2


def test_trajectory_structure():
    cfg = ModelConfig(image_size=8, patch_size=2, depth=3, dim=8, heads=2, num_classes=4)
    params = init_params(cfg, make_rng(0, 0), np.float64)
    (mixed, spec), x1, x2 = _trajectory_inputs(cfg)
    tr = ratio_trajectory(params, mixed, x1, x2, spec)
    assert len(tr.tl_align) == len(tr.similarity) == len(tr.cutmix) == cfg.depth + 1
    assert len(set(tr.cutmix)) == 1 and tr.cutmix[0] == spec.lam
    assert tr.tl_align[0] == pytest.approx(spec.lam, abs=1e-12)
    assert tr.similarity[0] == 0.5          # shared class token at layer 0
    assert all(0 <= v <= 1 for v in tr.tl_align + tr.similarity)


def test_trajectory_identity_attention_is_constant(monkeypatch):
    cfg = ModelConfig(image_size=8, patch_size=2, depth=3, dim=8, heads=2, num_classes=4)
    params = init_params(cfg, make_rng(0, 0), np.float64)
    real = diag.model_forward

    def identity_attention(images, p, keep_cache=True):
        logits, trace, atrace = real(images, p, keep_cache)
        eye = np.broadcast_to(np.eye(cfg.num_tokens), atrace.layers[0].shape)
        return logits, trace, AttentionTrace([eye] * len(atrace))

    monkeypatch.setattr(diag, "model_forward", identity_attention)
    (mixed, spec), x1, x2 = _trajectory_inputs(cfg)
    tr = ratio_trajectory(params, mixed, x1, x2, spec)
    assert tr.tl_align == [spec.lam] * (cfg.depth + 1)
