import struct

import numpy as np
import pytest

from tlalign.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from tlalign.numerics import make_rng
from tlalign.vit import ModelConfig, init_params


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_bit_exact(tmp_path, dtype):
    cfg = ModelConfig(image_size=8, patch_size=4, depth=2, dim=8, heads=2, num_classes=5,
                      pooling="global_pool")
    params = init_params(cfg, make_rng(4, 0), dtype)
    save_checkpoint(tmp_path / "m.tla", params)
    back = load_checkpoint(tmp_path / "m.tla", dtype)
    assert back.config == cfg
    for name, t in params.tensors.items():
        assert back[name].dtype == dtype
        np.testing.assert_array_equal(back[name], t)


def test_header_layout():
    cfg = ModelConfig(image_size=8, patch_size=4, depth=2, dim=8, heads=2, num_classes=5)
    data = encode_checkpoint(init_params(cfg, make_rng(0, 0)))
    assert data[:4] == MAGIC
    assert struct.unpack_from("<9I", data, 4) == (8, 4, 1, 2, 8, 2, 2, 5, 0)
    (n,) = struct.unpack_from("<I", data, 40)
    assert data[44:44 + n] == b"patch_proj"


def test_bad_magic():
    with pytest.raises(ValueError, match="bad magic"):
        decode_checkpoint(b"NOPE" + bytes(64))


def test_truncated_names_offset():
    cfg = ModelConfig(image_size=4, patch_size=2, depth=1, dim=4, heads=1)
    data = encode_checkpoint(init_params(cfg, make_rng(0, 0)))
    with pytest.raises(ValueError, match="offset"):
        decode_checkpoint(data[:-5])
