"""Toy vision transformer with manual backprop.

Everything is batched over a leading sample axis: images are (B, H, W, C),
token matrices (B, T, d) with T = N + 1 and the class token at row 0.
Attention matrices are captured during the forward pass so the label
alignment can reuse them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import TRAIN_DTYPE, softmax_rows

LN_EPS = 1e-6
POOLING_MODES = ("class_token", "global_pool")
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    num_classes: int = 10
    pooling: str = "class_token"

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.channels < 1 or self.mlp_ratio < 1:
            raise ValueError("channels and mlp_ratio must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Ordered name -> (rows, cols) map of every learnable tensor."""
    d, h = config.dim, config.hidden
    shapes = {
        "patch_proj": (config.patch_dim, d),
        "pos_embed": (config.num_tokens, d),
        "cls_token": (1, d),
    }
    for l in range(config.depth):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.gain": (1, d), p + "ln1.bias": (1, d),
            p + "attn.w_q": (d, d), p + "attn.w_k": (d, d),
            p + "attn.w_v": (d, d), p + "attn.w_o": (d, d),
            p + "ln2.gain": (1, d), p + "ln2.bias": (1, d),
            p + "mlp.w1": (d, h), p + "mlp.b1": (1, h),
            p + "mlp.w2": (h, d), p + "mlp.b2": (1, d),
        })
    shapes["head.w"] = (d, config.num_classes)
    shapes["head.b"] = (1, config.num_classes)
    return shapes


@dataclass
class ModelParams:
    """Named parameter tensors plus a version counter.

    The counter is bumped on every in-place update; a forward trace taken
    before the bump can no longer be back-propagated.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: int = 0

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            missing = set(expected) ^ set(self.tensors)
            if missing:
                raise ValueError(f"parameter set mismatch: {sorted(missing)}")
            self.tensors = {k: self.tensors[k] for k in expected}
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(
                    f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["patch_proj"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def bump(self):
        self.version += 1

    def num_scalars(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=TRAIN_DTYPE) -> ModelParams:
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name in ("pos_embed", "cls_token"):
            t = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".gain"):
            t = np.ones(shape)
        elif name.endswith(("bias", ".b1", ".b2")) or name == "head.b":
            t = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            t = rng.uniform(-bound, bound, size=shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# sub-operations
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, N, p*p*C): row-major patches, row-major pixels, channel fastest."""
    s, p, c = config.image_size, config.patch_size, config.channels
    if images.ndim != 4 or images.shape[1:] != (s, s, c):
        raise ValueError(f"expected images of shape (B, {s}, {s}, {c}), got {images.shape}")
    g = s // p
    x = images.reshape(images.shape[0], g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(images.shape[0], g * g, p * p * c)


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[:, :, None]
    if images.ndim == 3:
        images = images[None]
    return images


def patch_embed(images: np.ndarray, params: ModelParams):
    """Tokenize images into Z0 of shape (B, N+1, d). Returns (Z0, patches)."""
    cfg = params.config
    images = _as_batch(images).astype(params.dtype, copy=False)
    patches = patchify(images, cfg)
    b = patches.shape[0]
    z = np.empty((b, cfg.num_tokens, cfg.dim), dtype=params.dtype)
    z[:, 0] = params["cls_token"][0]
    z[:, 1:] = (patches.reshape(-1, cfg.patch_dim) @ params["patch_proj"]).reshape(b, cfg.num_patches, cfg.dim)
    z += params["pos_embed"]
    return z, patches


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain[0] + bias[0], (xhat, rstd)


def layer_norm_backward(dy, cache, gain):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)[None]
    dbias = dy.sum(axis=axes)[None]
    dxhat = dy * gain[0]
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_backward(dg, u, t):
    du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dg * du


def _linear(x, w):
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[1])


def _linear_backward(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return (dy2 @ w.T).reshape(x.shape), x2.T @ dy2


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def mhsa_forward(z: np.ndarray, layer: int, params: ModelParams, _cache: dict | None = None):
    """Multi-head self-attention on (B, T, d) or (T, d) tokens.

    Each head uses scale 1/sqrt(d/H). Returns (output, attention) where
    attention has shape (B, H, T, T), or (H, T, T) for unbatched input.
    """
    single = z.ndim == 2
    if single:
        z = z[None]
    cfg = params.config
    p = f"blocks.{layer}.attn."
    q = _split_heads(_linear(z, params[p + "w_q"]), cfg.heads)
    k = _split_heads(_linear(z, params[p + "w_k"]), cfg.heads)
    v = _split_heads(_linear(z, params[p + "w_v"]), cfg.heads)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    logits = (q @ k.transpose(0, 1, 3, 2)) * np.asarray(scale, dtype=z.dtype)
    attn = softmax_rows(logits)
    o = _merge_heads(attn @ v)
    out = _linear(o, params[p + "w_o"])
    if _cache is not None:
        _cache.update(attn_in=z, q=q, k=k, v=v, attn=attn, o=o)
    if single:
        return out[0], attn[0]
    return out, attn


def _mhsa_backward(dout, layer, params, c, grads):
    cfg = params.config
    p = f"blocks.{layer}.attn."
    do, grads[p + "w_o"] = _linear_backward(dout, c["o"], params[p + "w_o"])
    do = _split_heads(do, cfg.heads)
    attn, q, k, v = c["attn"], c["q"], c["k"], c["v"]
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    dlogits = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dlogits *= np.asarray(1.0 / math.sqrt(cfg.head_dim), dtype=dlogits.dtype)
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q
    z = c["attn_in"]
    dz = np.zeros_like(z)
    for name, dh in (("w_q", dq), ("w_k", dk), ("w_v", dv)):
        dzi, grads[p + name] = _linear_backward(_merge_heads(dh), z, params[p + name])
        dz += dzi
    return dz


def block_forward(z: np.ndarray, layer: int, params: ModelParams, keep_cache: bool = True):
    """One pre-norm transformer block.

    Returns (Z_out, attention, cache). The cache holds every intermediate
    needed by the backward pass (None when keep_cache is False).
    """
    single = z.ndim == 2
    if single:
        z = z[None]
    if not 0 <= layer < params.config.depth:
        raise IndexError(f"layer {layer} outside 0..{params.config.depth - 1}")
    p = f"blocks.{layer}."
    c: dict = {}
    h1, c["ln1"] = layer_norm(z, params[p + "ln1.gain"], params[p + "ln1.bias"])
    msa, attn = mhsa_forward(h1, layer, params, c)
    z_mid = z + msa
    h2, c["ln2"] = layer_norm(z_mid, params[p + "ln2.gain"], params[p + "ln2.bias"])
    u = _linear(h2, params[p + "mlp.w1"]) + params[p + "mlp.b1"][0]
    g, t = gelu(u)
    mlp = _linear(g, params[p + "mlp.w2"]) + params[p + "mlp.b2"][0]
    z_out = z_mid + mlp
    if keep_cache:
        c.update(h2=h2, u=u, t=t, g=g)
    else:
        c = None
    if single:
        return z_out[0], attn[0], c
    return z_out, attn, c


def _block_backward(dz_out, layer, params, c, grads):
    p = f"blocks.{layer}."
    dg, grads[p + "mlp.w2"] = _linear_backward(dz_out, c["g"], params[p + "mlp.w2"])
    grads[p + "mlp.b2"] = dz_out.reshape(-1, dz_out.shape[-1]).sum(axis=0)[None]
    du = gelu_backward(dg, c["u"], c["t"])
    dh2, grads[p + "mlp.w1"] = _linear_backward(du, c["h2"], params[p + "mlp.w1"])
    grads[p + "mlp.b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)[None]
    dz_mid, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = layer_norm_backward(
        dh2, c["ln2"], params[p + "ln2.gain"])
    dz_mid = dz_mid + dz_out
    dh1 = _mhsa_backward(dz_mid, layer, params, c, grads)
    dz, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = layer_norm_backward(
        dh1, c["ln1"], params[p + "ln1.gain"])
    return dz + dz_mid


@dataclass
class AttentionTrace:
    """Per-layer attention, each array shaped (B, H, T, T)."""

    layers: list[np.ndarray]

    def __len__(self):
        return len(self.layers)

    def sample(self, b: int) -> list[np.ndarray]:
        """Per-layer (H, T, T) matrices of one sample."""
        return [a[b] for a in self.layers]


@dataclass
class ForwardTrace:
    params: ModelParams
    params_version: int
    tokens: list[np.ndarray]          # Z^0 .. Z^L, each (B, T, d)
    logits: np.ndarray                # (B, C)
    patches: np.ndarray | None = None
    caches: list[dict] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.caches is not None and all(c is not None for c in self.caches)


def pool(z: np.ndarray, pooling: str) -> np.ndarray:
    if pooling == "class_token":
        return z[:, 0]
    return z[:, 1:].mean(axis=1)


def model_forward(images: np.ndarray, params: ModelParams, keep_cache: bool = True):
    """Full forward pass.

    ``images`` is (B, H, W, C); a single (H, W, C) or (H, W) image is
    promoted to a batch of one. Returns (logits, ForwardTrace, AttentionTrace).
    """
    cfg = params.config
    z, patches = patch_embed(images, params)
    tokens = [z]
    attns, caches = [], []
    for l in range(cfg.depth):
        z, a, c = block_forward(z, l, params, keep_cache)
        tokens.append(z)
        attns.append(a)
        caches.append(c)
    feat = pool(z, cfg.pooling)
    logits = feat @ params["head.w"] + params["head.b"][0]
    trace = ForwardTrace(params, params.version, tokens, logits,
                         patches if keep_cache else None,
                         caches if keep_cache else None)
    return logits, trace, AttentionTrace(attns)


def model_backward(trace: ForwardTrace, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter given dJ/dlogits of shape (B, C)."""
    if not trace.complete or trace.patches is None:
        raise RuntimeError("forward trace was recorded without caches; cannot backprop")
    params = trace.params
    if trace.params_version != params.version:
        raise RuntimeError(
            f"stale forward trace: recorded at params version {trace.params_version}, "
            f"params are now at version {params.version}")
    cfg = params.config
    loss_grad = np.asarray(loss_grad, dtype=params.dtype)
    if loss_grad.ndim == 1:
        loss_grad = loss_grad[None]
    z_final = trace.tokens[-1]
    if loss_grad.shape != (z_final.shape[0], cfg.num_classes):
        raise ValueError(f"loss_grad shape {loss_grad.shape} does not match logits "
                         f"{(z_final.shape[0], cfg.num_classes)}")
    grads: dict[str, np.ndarray] = {}
    feat = pool(z_final, cfg.pooling)
    grads["head.w"] = feat.T @ loss_grad
    grads["head.b"] = loss_grad.sum(axis=0)[None]
    dfeat = loss_grad @ params["head.w"].T
    dz = np.zeros_like(z_final)
    if cfg.pooling == "class_token":
        dz[:, 0] = dfeat
    else:
        dz[:, 1:] = (dfeat / cfg.num_patches)[:, None, :]
    for l in reversed(range(cfg.depth)):
        dz = _block_backward(dz, l, params, trace.caches[l], grads)
    grads["pos_embed"] = dz.sum(axis=0)
    grads["cls_token"] = dz[:, 0].sum(axis=0)[None]
    dpatch = dz[:, 1:].reshape(-1, cfg.dim)
    grads["patch_proj"] = trace.patches.reshape(-1, cfg.patch_dim).T @ dpatch
    return {name: grads[name] for name in param_shapes(cfg)}
