import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest

from tlalign.data import load_idx, load_mnist, read_idx_labels, synth_dataset

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist"
needs_mnist = pytest.mark.skipif(not (MNIST_DIR / "train-images-idx3-ubyte").exists(),
                                 reason="MNIST IDX files not present under data/mnist")


def _write_idx(tmp_path, images, labels, img_magic=0x803, lab_magic=0x801):
    n, h, w = images.shape
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">4I", img_magic, n, h, w) + images.astype(np.uint8).tobytes())
    lp.write_bytes(struct.pack(">2I", lab_magic, len(labels)) + np.asarray(labels, np.uint8).tobytes())
    return ip, lp


def test_idx_round_trip(tmp_path):
    imgs = np.arange(3 * 4 * 5).reshape(3, 4, 5) % 256
    ip, lp = _write_idx(tmp_path, imgs, [7, 0, 3])
    ds = load_idx(ip, lp)
    assert ds.images.shape == (3, 4, 5, 1) and ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.labels, [7, 0, 3])
    np.testing.assert_allclose(ds.images[..., 0] * 255, imgs, atol=1e-4)


def test_idx_padding_centres_image(tmp_path):
    ip, lp = _write_idx(tmp_path, np.full((1, 28, 28), 255), [1])
    ds = load_idx(ip, lp, image_size=32)
    img = ds.images[0, ..., 0]
    assert img.shape == (32, 32)
    assert img[2:30, 2:30].min() == 1.0 and img.sum() == 28 * 28


def test_idx_truncated_reports_offset(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((2, 4, 4)), [0, 1])
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(ValueError, match=r"img\.idx.*byte offset 45"):
        load_idx(ip, lp)


def test_idx_label_file_with_image_magic(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((2, 4, 4)), [0, 1], lab_magic=0x803)
    with pytest.raises(ValueError, match="wrong magic"):
        read_idx_labels(lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((2, 4, 4)), [0, 1, 2])
    with pytest.raises(ValueError, match="2 images"):
        load_idx(ip, lp)


@needs_mnist
def test_mnist_train_header_fields():
    ds = load_mnist(MNIST_DIR, "train", image_size=28)
    assert ds.images.shape == (60000, 28, 28, 1)
    assert set(np.unique(ds.labels)) == set(range(10))


@needs_mnist
def test_mnist_first_images_match_byte_decode():
    raw = (MNIST_DIR / "train-images-idx3-ubyte").read_bytes()
    magic, n, rows, cols = (int.from_bytes(raw[i:i + 4], "big") for i in range(0, 16, 4))
    assert (magic, rows, cols) == (0x803, 28, 28)
    ref = bytes(raw[16 + k] for k in range(10 * rows * cols))
    ds = load_mnist(MNIST_DIR, "train", image_size=28, limit=10)
    decoded = np.round(ds.images[..., 0] * 255).astype(np.uint8).tobytes()
    assert hashlib.sha256(decoded).hexdigest() == hashlib.sha256(ref).hexdigest()


def test_synth_deterministic():
    a = synth_dataset(5, 10, 7)
    b = synth_dataset(5, 10, 7)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_dataset(5, 10, 8).images)


def test_synth_labels_and_range():
    ds = synth_dataset(3, 4, 0)
    assert set(ds.labels.tolist()) == {0, 1, 2}
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synth_class_limit():
    with pytest.raises(ValueError, match="2..16"):
        synth_dataset(17, 1, 0)


def test_synth_two_classes_linearly_separable():
    ds = synth_dataset(2, 50, 0, noise=0.0)
    x = np.c_[ds.images.reshape(len(ds), -1), np.ones(len(ds))]
    y = np.where(ds.labels == 1, 1.0, -1.0)
    w = np.zeros(x.shape[1])
    for _ in range(200000):                     # perceptron converges iff separable
        wrong = np.flatnonzero(np.sign(x @ w) != y)
        if wrong.size == 0:
            break
        w += y[wrong[0]] * x[wrong[0]]
    assert np.all(np.sign(x @ w) == y)
