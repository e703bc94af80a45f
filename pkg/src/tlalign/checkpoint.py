"""Binary checkpoint container.

Layout (all little-endian)::

    b"TLA1"
    9 x uint32   image_size patch_size channels depth dim heads mlp_ratio num_classes pooling
    repeated until EOF:
        uint32 name_len, name (utf-8), uint32 rows, uint32 cols, rows*cols float64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .vit import POOLING_MODES, ModelConfig, ModelParams, param_shapes

MAGIC = b"TLA1"
_HEADER = struct.Struct("<9I")
_U32 = struct.Struct("<I")
_FIELDS = ("image_size", "patch_size", "channels", "depth", "dim", "heads", "mlp_ratio", "num_classes")


def encode_checkpoint(params: ModelParams) -> bytes:
    cfg = params.config
    parts = [MAGIC, _HEADER.pack(*(getattr(cfg, f) for f in _FIELDS), POOLING_MODES.index(cfg.pooling))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        rows, cols = t.shape
        parts += [_U32.pack(len(raw)), raw, _U32.pack(rows), _U32.pack(cols),
                  np.ascontiguousarray(t, dtype="<f8").tobytes()]
    return b"".join(parts)


def decode_checkpoint(data: bytes, dtype=np.float32, source: str = "<bytes>") -> ModelParams:
    if data[:4] != MAGIC:
        raise ValueError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    off = 4
    if len(data) < off + _HEADER.size:
        raise ValueError(f"{source}: truncated header at offset {off}")
    vals = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    if vals[8] >= len(POOLING_MODES):
        raise ValueError(f"{source}: unknown pooling code {vals[8]}")
    cfg = ModelConfig(**dict(zip(_FIELDS, vals[:8])), pooling=POOLING_MODES[vals[8]])
    tensors = {}
    while off < len(data):
        if len(data) < off + 4:
            raise ValueError(f"{source}: truncated tensor record at offset {off}")
        (n,) = _U32.unpack_from(data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        if len(data) < off + 8:
            raise ValueError(f"{source}: truncated shape of {name!r} at offset {off}")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        size = rows * cols * 8
        if len(data) < off + size:
            raise ValueError(f"{source}: truncated values of {name!r} at offset {off}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(dtype)
        off += size
    missing = set(param_shapes(cfg)) - set(tensors)
    if missing:
        raise ValueError(f"{source}: missing tensors {sorted(missing)}")
    return ModelParams(cfg, tensors)


def save_checkpoint(path, params: ModelParams):
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes(), dtype, str(path))
