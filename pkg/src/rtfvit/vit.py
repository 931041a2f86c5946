"""Patch embedding, pre-norm transformer blocks and the local/global split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, StateError
from .tensor import Tensor


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    dim: int = 32
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 2.0
    local_fraction: float = 0.75
    shared_local: bool = True
    ln_eps: float = 1e-5

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return max(1, round_half_up(self.mlp_ratio * self.dim))

    @property
    def local_blocks(self) -> int:
        return round_half_up(self.local_fraction * self.depth)

    @property
    def global_blocks(self) -> int:
        return self.depth - self.local_blocks

    def validate(self) -> "ModelConfig":
        if min(self.image_size, self.patch_size, self.channels, self.dim, self.depth, self.heads) < 1:
            raise ConfigError(f"all extents must be positive: {self}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0.0 < self.local_fraction < 1.0:
            raise ConfigError(f"local_fraction must lie in (0, 1), got {self.local_fraction}")
        if not 1 <= self.local_blocks <= self.depth - 1:
            raise ConfigError(
                f"local_fraction {self.local_fraction} of depth {self.depth} gives "
                f"{self.local_blocks} local blocks; need between 1 and {self.depth - 1}"
            )
        return self


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form count of every learned scalar in a two-view model."""
    d, n, m = cfg.dim, cfg.num_patches, cfg.mlp_hidden
    patch_in = cfg.patch_size ** 2 * cfg.channels
    embed = patch_in * d + d + d + (n + 1) * d
    block = 4 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d)
    local_copies = 1 if cfg.shared_local else 2
    blocks = local_copies * cfg.local_blocks * block + cfg.global_blocks * block
    head = 2 * d + d + 1
    return embed + blocks + head


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(values, name: str) -> Tensor:
    return Tensor(values, tracked=True, name=name)


@dataclass
class TokenSet:
    """Token matrix ``[..., T, D]`` plus the row indices that hold CLS tokens."""

    tokens: Tensor
    cls_rows: tuple = (0,)

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def batched(self) -> bool:
        return self.tokens.ndim == 3

    def cls(self) -> Tensor:
        return T.slice_tokens(self.tokens, 0, 1)

    def spatial(self) -> Tensor:
        return T.slice_tokens(self.tokens, 1, self.count)


class PatchEmbedding:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.dim
        patch_in = cfg.patch_size ** 2 * cfg.channels
        self.cfg = cfg
        self.proj_w = _param(trunc_normal(rng, (patch_in, d), dtype=dtype), "embed.proj_w")
        self.proj_b = _param(np.zeros(d, dtype), "embed.proj_b")
        self.cls = _param(trunc_normal(rng, (1, d), dtype=dtype), "embed.cls")
        self.pos = _param(trunc_normal(rng, (cfg.num_patches + 1, d), dtype=dtype), "embed.pos")

    def parameters(self) -> dict:
        return {p.name: p for p in (self.proj_w, self.proj_b, self.cls, self.pos)}


def patchify(images: Tensor, patch: int) -> Tensor:
    """``[B, H, W, C]`` to ``[B, N, patch*patch*C]`` with patches in row-major order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = T.reshape(images, (b, gh, patch, gw, patch, c))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, gh * gw, patch * patch * c))


def patch_embed(image, cfg: ModelConfig, params: PatchEmbedding) -> TokenSet:
    """Embed one image ``[H, W, C]`` or a batch ``[B, H, W, C]`` into tokens."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=params.proj_w.dtype))
    single = img.ndim == 3
    if single:
        img = T.reshape(img, (1,) + img.shape)
    if img.ndim != 4 or img.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DimensionError(
            f"expected images of shape [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], got {image.shape}"
        )
    b = img.shape[0]
    x = T.linear(patchify(img, cfg.patch_size), params.proj_w, params.proj_b)
    cls = T.expand_leading(params.cls, b)
    x = T.concat_along([cls, x], axis=1)
    x = T.add(x, T.expand_leading(params.pos, b))
    if single:
        x = T.reshape(x, x.shape[1:])
    return TokenSet(x, (0,))


class Block:
    """Pre-norm transformer block: LN, MHSA, residual, LN, GELU MLP, residual."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, prefix: str, dtype=np.float32):
        d, m = cfg.dim, cfg.mlp_hidden
        self.dim, self.heads, self.eps = d, cfg.heads, cfg.ln_eps
        ones, zeros = (lambda n: np.ones(n, dtype)), (lambda n: np.zeros(n, dtype))
        tn = lambda shape: trunc_normal(rng, shape, dtype=dtype)  # noqa: E731
        self.ln1_g, self.ln1_b = _param(ones(d), f"{prefix}.ln1_g"), _param(zeros(d), f"{prefix}.ln1_b")
        self.wq, self.bq = _param(tn((d, d)), f"{prefix}.wq"), _param(zeros(d), f"{prefix}.bq")
        self.wk, self.bk = _param(tn((d, d)), f"{prefix}.wk"), _param(zeros(d), f"{prefix}.bk")
        self.wv, self.bv = _param(tn((d, d)), f"{prefix}.wv"), _param(zeros(d), f"{prefix}.bv")
        self.wo, self.bo = _param(tn((d, d)), f"{prefix}.wo"), _param(zeros(d), f"{prefix}.bo")
        self.ln2_g, self.ln2_b = _param(ones(d), f"{prefix}.ln2_g"), _param(zeros(d), f"{prefix}.ln2_b")
        self.w1, self.b1 = _param(tn((d, m)), f"{prefix}.w1"), _param(zeros(m), f"{prefix}.b1")
        self.w2, self.b2 = _param(tn((m, d)), f"{prefix}.w2"), _param(zeros(d), f"{prefix}.b2")
        self.last_attention: Optional[np.ndarray] = None

    def parameters(self) -> dict:
        return {p.name: p for p in vars(self).values() if isinstance(p, Tensor)}

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        x = T.reshape(x, (b, t, self.heads, self.dim // self.heads))
        return T.permute(x, (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = T.layer_norm(x, self.ln1_g, self.ln1_b, self.eps)
        q = self._split_heads(T.linear(h, self.wq, self.bq))
        k = self._split_heads(T.linear(h, self.wk, self.bk))
        v = self._split_heads(T.linear(h, self.wv, self.bv))
        scores = T.mul_scalar(T.matmul(q, T.transpose_last2(k)), 1.0 / math.sqrt(d // self.heads))
        attn = T.softmax_rows(scores)
        self.last_attention = attn.values
        o = T.permute(T.matmul(attn, v), (0, 2, 1, 3))
        o = T.linear(T.reshape(o, (b, t, d)), self.wo, self.bo)
        x = T.add(x, o)
        h = T.layer_norm(x, self.ln2_g, self.ln2_b, self.eps)
        h = T.linear(T.gelu(T.linear(h, self.w1, self.b1)), self.w2, self.b2)
        return T.add(x, h)


@dataclass
class EncoderStage:
    blocks: list
    dim: int
    calls: int = field(default=0, compare=False)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def parameters(self) -> dict:
        out = {}
        for blk in self.blocks:
            out.update(blk.parameters())
        return out


def stage_forward(z: TokenSet, stage: EncoderStage) -> TokenSet:
    """Run every block of ``stage``; token count and width are preserved."""
    if z.dim != stage.dim:
        raise DimensionError(f"token width {z.dim} does not match stage width {stage.dim}")
    stage.calls += 1
    x = z.tokens
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    for blk in stage.blocks:
        x = blk.forward(x)
    if single:
        x = T.reshape(x, x.shape[1:])
    return TokenSet(x, z.cls_rows)


def build_blocks(cfg: ModelConfig, rng: np.random.Generator, prefix: str = "block", dtype=np.float32) -> list:
    return [Block(cfg, rng, f"{prefix}{i}", dtype) for i in range(cfg.depth)]


def split_encoder(cfg: ModelConfig, blocks: list) -> tuple:
    """First ``round(local_fraction * depth)`` blocks form the local stage, the rest the global one."""
    cfg.validate()
    if len(blocks) != cfg.depth:
        raise ConfigError(f"expected {cfg.depth} blocks, got {len(blocks)}")
    k = cfg.local_blocks
    return EncoderStage(list(blocks[:k]), cfg.dim), EncoderStage(list(blocks[k:]), cfg.dim)


def attention_weights(stage: EncoderStage, block_index: int, sample: Optional[int] = 0) -> np.ndarray:
    """Post-softmax attention ``[heads, T, T]`` of one block for the last forward input.

    ``sample=None`` returns the whole batch ``[B, heads, T, T]``.
    """
    if not 0 <= block_index < stage.depth:
        raise DimensionError(f"block_index {block_index} out of range for depth {stage.depth}")
    att = stage.blocks[block_index].last_attention
    if att is None:
        raise StateError("no cached attention; run a forward pass first")
    return att if sample is None else att[sample]
