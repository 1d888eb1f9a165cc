"""Patch-based pre-norm transformer whose output tokens are object proposals.

There is no pooling and no decoder: token ``i`` of the final layer is the
proposal for patch ``(i // grid, i % grid)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .numerics import LayerNorm, Linear, Module, Tensor, gelu, parameter, softmax, trunc_normal


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2


@dataclass
class TokenGrid:
    tokens: Tensor          # (B, N, d)
    grid: int

    def patch_of(self, i: int) -> tuple[int, int]:
        return divmod(i, self.grid)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., S, S, 3) images -> (..., N, 3 P^2) row-major patches, channel-last inside a patch."""
    images = np.asarray(images)
    *lead, s, s2, c = images.shape
    if s != s2 or c != 3 or s % patch_size:
        raise ContractError(f"image shape {images.shape} incompatible with patch size {patch_size}")
    g = s // patch_size
    x = images.reshape(*lead, g, patch_size, g, patch_size, 3)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)          # (..., g, g, P, P, 3)
    return x.reshape(*lead, g * g, 3 * patch_size * patch_size)


def unpatchify(patches: np.ndarray, patch_size: int) -> np.ndarray:
    *lead, n, _ = patches.shape
    g = int(round(math.sqrt(n)))
    nl = len(lead)
    x = patches.reshape(*lead, g, g, patch_size, patch_size, 3)
    x = np.moveaxis(x, nl + 1, nl + 2)
    return x.reshape(*lead, g * patch_size, g * patch_size, 3)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.heads = heads

    def __call__(self, x: Tensor, return_weights: bool = False):
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)   # (3, B, H, N, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // h)))
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        out = self.proj(out)
        return (out, weights) if return_weights else out


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x: Tensor, return_weights: bool = False):
        a = self.attn(self.norm1(x), return_weights=return_weights)
        if return_weights:
            a, w = a
        x = x + a
        x = x + self.fc2(gelu(self.fc1(self.norm2(x))))
        return (x, w) if return_weights else x


def sincos_2d(grid: int, dim: int, scale: float = 0.1) -> np.ndarray:
    """Fixed 2-D sine/cosine table used to initialise the learned positional embeddings.

    Half the channels encode the column, half the row. Returned as (grid*grid, dim).
    """
    if dim % 4:
        raise ContractError(f"dim {dim} must be divisible by 4 for a 2-D sincos table")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    pos = np.arange(grid, dtype=np.float64)
    ang = pos[:, None] * freqs[None] * np.pi / 2
    emb_1d = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)        # (grid, dim/2)
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return scale * np.concatenate([emb_1d[cols], emb_1d[rows]], axis=1)


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.dim, rng)
        pos = sincos_2d(cfg.grid, cfg.dim) if cfg.dim % 4 == 0 else 0.0
        self.pos_embed = parameter(pos + trunc_normal(rng, (cfg.num_tokens, cfg.dim)))
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(cfg.dim)

    def encode_image(self, images: np.ndarray, use_pos: bool = True,
                     return_attention: bool = False):
        """Encode a (B, S, S, 3) batch (or a single S x S x 3 image) to (B, N, d) tokens."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        s = self.cfg.image_size
        if images.shape[1:] != (s, s, 3):
            raise ContractError(f"expected images of shape (*, {s}, {s}, 3), got {images.shape}")
        x = self.patch_embed(Tensor(patchify(images, self.cfg.patch_size), name="patches"))
        if use_pos:
            x = x + self.pos_embed
        attn = []
        for i, block in enumerate(self.blocks):
            if return_attention:
                x, w = block(x, return_weights=True)
                attn.append(w.data)
            else:
                x = block(x)
            if not np.all(np.isfinite(x.data)):
                raise NumericError(f"non-finite activations after encoder layer {i}")
        x = self.final_norm(x)
        grid = TokenGrid(x, self.cfg.grid)
        return (grid, attn) if return_attention else grid
