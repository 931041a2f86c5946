"""Two-view ViT: shared local encoder, fusion, global encoder and a logit head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .fusion import FusionStrategy, fuse, rtf_fuse, sample_rtf_masks
from .tensor import Tensor
from .vit import (
    Block,
    EncoderStage,
    ModelConfig,
    PatchEmbedding,
    TokenSet,
    build_blocks,
    patch_embed,
    split_encoder,
    stage_forward,
    trunc_normal,
)

INPUT_VIEWS = ("both", "view1", "view2")


@dataclass
class BranchOutputs:
    y_hat: Tensor
    y_hat_rtf: Optional[Tensor] = None
    attention: Optional[EncoderStage] = None


class MultiViewModel:
    """Local encoder applied per view, fusion, global encoder, shared linear head.

    ``input_view`` other than ``"both"`` turns the model into a single-view
    ViT of the same capacity that ignores the other image.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        strategy="concat",
        rtf_enabled: bool = True,
        seed: int = 0,
        dtype=np.float32,
        input_view: str = "both",
    ):
        cfg.validate()
        if input_view not in INPUT_VIEWS:
            raise ConfigError(f"input_view must be one of {INPUT_VIEWS}, got {input_view!r}")
        self.cfg = cfg
        self.strategy = FusionStrategy.parse(strategy)
        self.rtf_enabled = bool(rtf_enabled)
        self.input_view = input_view
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.embed = PatchEmbedding(cfg, rng, dtype)
        self.local, self.global_ = split_encoder(cfg, build_blocks(cfg, rng, "block", dtype))
        self.local2: Optional[EncoderStage] = None
        if not cfg.shared_local:
            twins = [Block(cfg, rng, f"twin{i}", dtype) for i in range(cfg.local_blocks)]
            self.local2 = EncoderStage(twins, cfg.dim)
        d = cfg.dim
        self.norm_g = Tensor(np.ones(d, dtype), tracked=True, name="head.norm_g")
        self.norm_b = Tensor(np.zeros(d, dtype), tracked=True, name="head.norm_b")
        self.head_w = Tensor(trunc_normal(rng, (d, 1), dtype=dtype), tracked=True, name="head.w")
        self.head_b = Tensor(np.zeros(1, dtype), tracked=True, name="head.b")

    def parameters(self) -> dict:
        params = dict(self.embed.parameters())
        params.update(self.local.parameters())
        if self.local2 is not None:
            params.update(self.local2.parameters())
        params.update(self.global_.parameters())
        for p in (self.norm_g, self.norm_b, self.head_w, self.head_b):
            params[p.name] = p
        return params

    def state_dict(self) -> dict:
        return {k: p.values.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) ^ set(state))
            raise ConfigError(f"state does not match model parameters: {missing[:5]}")
        for k, p in params.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {v.shape} vs model {p.shape}")
            p.values = v.astype(p.dtype, copy=True)
            p.grad = None

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters().values())


def _as_images(x, model: MultiViewModel) -> Tensor:
    arr = x.values if isinstance(x, Tensor) else np.asarray(x)
    cfg = model.cfg
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DimensionError(
            f"images must be [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], got {np.shape(x)}"
        )
    return Tensor(arr.astype(model.dtype, copy=False))


def encode_views(model: MultiViewModel, x1, x2) -> tuple:
    """Local representations of both views, each computed exactly once."""
    a, b = _as_images(x1, model), _as_images(x2, model)
    if a.shape != b.shape:
        raise DimensionError(f"view shapes differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if model.local2 is None:
        both = patch_embed(T.concat_along([a, b], axis=0), model.cfg, model.embed)
        z = stage_forward(both, model.local).tokens
        return TokenSet(T.slice_along(z, 0, 0, n)), TokenSet(T.slice_along(z, 0, n, 2 * n))
    z1 = stage_forward(patch_embed(a, model.cfg, model.embed), model.local)
    z2 = stage_forward(patch_embed(b, model.cfg, model.embed), model.local2)
    return z1, z2


def head_forward(z: TokenSet, model: MultiViewModel) -> Tensor:
    """Logits ``[B, 1]`` from the mean of the CLS rows of the global encoder output."""
    rows = [T.slice_tokens(z.tokens, r, r + 1) for r in z.cls_rows]
    h = rows[0]
    if len(rows) > 1:
        for r in rows[1:]:
            h = T.add(h, r)
        h = T.mul_scalar(h, 1.0 / len(rows))
    b = z.tokens.shape[0]
    h = T.reshape(h, (b, z.dim))
    h = T.layer_norm(h, model.norm_g, model.norm_b, model.cfg.ln_eps)
    return T.linear(h, model.head_w, model.head_b)


def _single_view(model: MultiViewModel, x1, x2) -> Tensor:
    x = x1 if model.input_view == "view1" else x2
    z = patch_embed(_as_images(x, model), model.cfg, model.embed)
    z = stage_forward(stage_forward(z, model.local), model.global_)
    return head_forward(z, model)


def _global_branch(model: MultiViewModel, z1: TokenSet, z2: TokenSet) -> Tensor:
    return head_forward(stage_forward(fuse(model.strategy, z1, z2), model.global_), model)


def forward_train(model: MultiViewModel, x1, x2, rng) -> BranchOutputs:
    """Both branches from one local pass; the RTF branch only when enabled."""
    if model.input_view != "both":
        return BranchOutputs(_single_view(model, x1, x2), None, model.global_)
    z1, z2 = encode_views(model, x1, x2)
    y_rtf = None
    if model.rtf_enabled:
        b, n = z1.tokens.shape[0], z1.count - 1
        mask = sample_rtf_masks(b, n, rng)
        y_rtf = head_forward(stage_forward(rtf_fuse(z1, z2, mask), model.global_), model)
    # global branch last so the attention cache reflects it
    y_hat = _global_branch(model, z1, z2)
    return BranchOutputs(y_hat, y_rtf, model.global_)


def forward_infer(model: MultiViewModel, x1, x2) -> Tensor:
    if model.input_view != "both":
        return _single_view(model, x1, x2)
    z1, z2 = encode_views(model, x1, x2)
    return _global_branch(model, z1, z2)


def combined_loss(out: BranchOutputs, y) -> Tensor:
    """Unweighted sum of the global-branch and RTF-branch cross-entropies."""
    target = y if isinstance(y, Tensor) else Tensor(
        np.asarray(y, dtype=out.y_hat.dtype).reshape(out.y_hat.shape)
    )
    loss = T.bce_with_logits(out.y_hat, target)
    if out.y_hat_rtf is not None:
        loss = T.add(loss, T.bce_with_logits(out.y_hat_rtf, target))
    return loss
