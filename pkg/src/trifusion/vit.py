"""Transformer feature branch: patchify, embed, attend, read out.

The image is cut into non-overlapping PxP patches scanned row-major; each
patch is flattened channel-major then row-major and projected to the embed
width. A learned class token is prepended and a learned positional table is
added. Encoder layers are pre-norm residual: x + MHSA(LN(x)), then
x + MLP(LN(x)). Readout is the class token by default, or the mean over
patch tokens (class token excluded) when ``pool`` is "mean_tokens".

``use_local_mlp`` threads a 3x3 depthwise convolution over the patch grid
through the first MLP layer (the class token bypasses it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Dense, DepthwiseConv2d, LayerNorm, Module, gelu
from .tensor import (Parameter, Tensor, add, expand_batch, matmul, narrow,
                     reshape, scale, softmax, transpose)
from .layers import concat


@dataclass
class VitConfig:
    input_size: int
    patch_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    mlp_hidden_dim: int
    use_local_mlp: bool = False
    qkv_bias: bool = True
    pool: str = "class_token"  # or "mean_tokens"

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def feature_dim(self) -> int:
        return self.embed_dim

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "mlp_hidden_dim": self.mlp_hidden_dim,
            "use_local_mlp": self.use_local_mlp,
            "qkv_bias": self.qkv_bias,
            "pool": self.pool,
        }


def vit_tiny() -> VitConfig:
    return VitConfig(input_size=32, patch_size=8, embed_dim=32, num_layers=2,
                     num_heads=2, mlp_hidden_dim=64)


def vit_paper() -> VitConfig:
    """224-input base-scale preset: 16px patches, 768 wide, 12x12."""
    return VitConfig(input_size=224, patch_size=16, embed_dim=768,
                     num_layers=12, num_heads=12, mlp_hidden_dim=3072)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """[b,3,s,s] -> [b, n, 3*P*P] with n = (s/P)^2 patches in row-major order."""
    if image.ndim != 4:
        raise ShapeError(f"patchify expects [b,c,s,s], got {image.shape}")
    b, c, h, w = image.shape
    if h != w or h % patch_size != 0:
        raise ShapeError(
            f"patchify: spatial size {h}x{w} not divisible by {patch_size}")
    g = h // patch_size
    x = reshape(image, (b, c, g, patch_size, g, patch_size))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, g * g, c * patch_size * patch_size))


def unpatchify(patches: Tensor, patch_size: int, channels: int = 3) -> Tensor:
    """Inverse of :func:`patchify` for square patch grids."""
    b, n, q = patches.shape
    g = int(round(np.sqrt(n)))
    if g * g != n or q != channels * patch_size * patch_size:
        raise ShapeError(f"unpatchify: bad patch tensor {patches.shape}")
    x = reshape(patches, (b, g, g, channels, patch_size, patch_size))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    return reshape(x, (b, channels, g * patch_size, g * patch_size))


class PatchEmbedding(Module):
    """Linear patch projection plus class token and positional table."""

    def __init__(self, config: VitConfig, rng: np.random.Generator):
        q = 3 * config.patch_size * config.patch_size
        d = config.embed_dim
        self.projection = Parameter(rng.normal(0.0, 0.02, size=(q, d)))
        self.class_token = Parameter(rng.normal(0.0, 0.02, size=(1, d)))
        self.positional = Parameter(
            rng.normal(0.0, 0.02, size=(config.num_tokens, d)))

    def forward(self, patches: Tensor) -> Tensor:
        if patches.shape[-1] != self.projection.shape[0]:
            raise ShapeError(
                f"embed: patch width {patches.shape[-1]} != projection rows "
                f"{self.projection.shape[0]}")
        b = patches.shape[0]
        projected = matmul(patches, self.projection)
        cls = expand_batch(self.class_token, b)
        tokens = concat([cls, projected], axis=1)
        return add(tokens, self.positional)


class Attention(Module):
    """Multi-head self-attention with per-head scaled dot products.

    When ``keep_attention`` is set, the row-stochastic attention weights of
    the latest forward are kept on ``last_attention`` ([b,h,t,t]).
    """

    def __init__(self, config: VitConfig, rng: np.random.Generator):
        d = config.embed_dim
        self.qkv = Dense(d, 3 * d, rng, bias=config.qkv_bias, w_std=0.02)
        self.out = Dense(d, d, rng, w_std=0.02)
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.keep_attention = False
        self.last_attention = None

    def forward(self, tokens: Tensor) -> Tensor:
        b, t, d = tokens.shape
        h, hd = self.num_heads, self.head_dim
        qkv = self.qkv(tokens)                          # [b,t,3d]
        qkv = reshape(qkv, (b, t, 3, h, hd))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))           # [3,b,h,t,hd]
        q = reshape(narrow(qkv, 0, 0, 1), (b, h, t, hd))
        k = reshape(narrow(qkv, 0, 1, 1), (b, h, t, hd))
        v = reshape(narrow(qkv, 0, 2, 1), (b, h, t, hd))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))),
                       1.0 / np.sqrt(hd))
        attn = softmax(scores, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        ctx = matmul(attn, v)                           # [b,h,t,hd]
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(ctx)


class EncoderLayer(Module):
    """Pre-norm residual transformer layer, shape-preserving."""

    def __init__(self, config: VitConfig, rng: np.random.Generator):
        d = config.embed_dim
        self.ln1 = LayerNorm(d)
        self.attn = Attention(config, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Dense(d, config.mlp_hidden_dim, rng, w_std=0.02)
        self.fc2 = Dense(config.mlp_hidden_dim, d, rng, w_std=0.02)
        self.local = (DepthwiseConv2d(config.mlp_hidden_dim, 3, rng, pad=1)
                      if config.use_local_mlp else None)
        self.grid = config.grid

    def _mlp(self, x: Tensor) -> Tensor:
        y = gelu(self.fc1(x))
        if self.local is not None:
            b, t, hid = y.shape
            g = self.grid
            cls = narrow(y, 1, 0, 1)
            rest = narrow(y, 1, 1, t - 1)
            grid = transpose(reshape(rest, (b, g, g, hid)), (0, 3, 1, 2))
            grid = self.local(grid)
            rest = reshape(transpose(grid, (0, 2, 3, 1)), (b, t - 1, hid))
            y = concat([cls, rest], axis=1)
        return self.fc2(y)

    def forward(self, tokens: Tensor) -> Tensor:
        x = add(tokens, self.attn(self.ln1(tokens)))
        return add(x, self._mlp(self.ln2(x)))


class VitBranch(Module):
    def __init__(self, config: VitConfig, rng: np.random.Generator):
        self.config = config
        self.embed = PatchEmbedding(config, rng)
        self.encoder = [EncoderLayer(config, rng)
                        for _ in range(config.num_layers)]
        self.final_ln = LayerNorm(config.embed_dim)

    @property
    def feature_dim(self) -> int:
        return self.config.embed_dim

    def record_attention(self, on: bool = True) -> None:
        for layer in self.encoder:
            layer.attn.keep_attention = on

    def attention_maps(self) -> list[np.ndarray]:
        return [layer.attn.last_attention for layer in self.encoder]

    def forward(self, image: Tensor) -> Tensor:
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != 3 or \
                image.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"vit branch expects [b,3,{cfg.input_size},"
                             f"{cfg.input_size}], got {image.shape}")
        tokens = self.embed(patchify(image, cfg.patch_size))
        for layer in self.encoder:
            tokens = layer(tokens)
        tokens = self.final_ln(tokens)
        b, t, d = tokens.shape
        if cfg.pool == "class_token":
            return reshape(narrow(tokens, 1, 0, 1), (b, d))
        if cfg.pool == "mean_tokens":
            from .layers import global_average_pool
            return global_average_pool(narrow(tokens, 1, 1, t - 1))
        raise ConfigError(f"unknown vit pool mode '{cfg.pool}'")


def build_vit(config: VitConfig, rng: np.random.Generator) -> VitBranch:
    if config.input_size % config.patch_size != 0:
        raise ConfigError(f"input size {config.input_size} not divisible by "
                          f"patch size {config.patch_size}")
    if config.embed_dim % config.num_heads != 0:
        raise ConfigError(f"embed dim {config.embed_dim} not divisible by "
                          f"{config.num_heads} heads")
    if config.pool not in ("class_token", "mean_tokens"):
        raise ConfigError(f"unknown vit pool mode '{config.pool}'")
    return VitBranch(config, rng)
