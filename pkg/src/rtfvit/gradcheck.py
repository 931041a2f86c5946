"""Central finite-difference verification of tape gradients.

The numeric side only ever calls forward computations, so it stays
independent of every backward rule it is checking.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    checked: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, scaled by the larger gradient."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    step: float = STEP,
) -> tuple:
    """Compare tape gradients of ``loss_fn()`` w.r.t. ``leaves`` with central differences.

    ``loss_fn`` must rebuild the scalar loss from the current leaf values on
    every call. With ``max_coords`` set, each leaf is probed at that many
    random coordinates instead of all of them. Returns ``(max_rel_error, n)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for leaf in leaves:
        leaf.values = np.ascontiguousarray(leaf.values)
        leaf.tracked = True
        leaf.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic, numeric = [], []
    for leaf in leaves:
        grad = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        flat = leaf.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * step))
            analytic.append(grad.reshape(-1)[i])
    return relative_error(np.array(analytic), np.array(numeric)), len(numeric)


def _projected(op: Callable, shapes: Sequence[tuple], seed: int, low=-2.0, high=2.0):
    """Scalar loss ``sum(op(*inputs) * R)`` over random 64-bit inputs."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(rng.uniform(low, high, s).astype(np.float64)) for s in shapes]
    out_shape = op(*leaves).shape
    proj = Tensor(rng.uniform(-1.0, 1.0, out_shape).astype(np.float64))
    return (lambda: T.sum_all(T.mul(op(*leaves), proj))), leaves


def _op_cases():
    mask = np.array([[True, False, False, True], [False, True, True, False], [True, True, False, False]])
    ln_op = lambda x, g, b: T.layer_norm(x, g, b, 1e-5)  # noqa: E731
    return {
        "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
        "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
        "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
        "mul_scalar": (lambda a: T.mul_scalar(a, -1.7), [(3, 4)]),
        "gelu": (T.gelu, [(3, 5)]),
        "sum_all": (lambda a: T.mul_scalar(T.sum_all(a), 1.0), [(2, 3, 4)]),
        "mean_over": (lambda a: T.mean_over(a, 1), [(2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 6)), [(2, 3, 4)]),
        "permute": (lambda a: T.permute(a, (2, 0, 1)), [(2, 3, 4)]),
        "transpose_last2": (T.transpose_last2, [(2, 3, 4)]),
        "concat_along": (lambda a, b: T.concat_along([a, b], axis=-2), [(2, 3, 4), (2, 4, 4)]),
        "slice_along": (lambda a: T.slice_along(a, 0, 1, 3), [(4, 3)]),
        "slice_tokens": (lambda a: T.slice_tokens(a, 1, 3), [(2, 5, 3)]),
        "expand_leading": (lambda a: T.expand_leading(a, 3), [(2, 4)]),
        "select_rows": (lambda a, b: T.select_rows(mask, a, b), [(3, 4, 2), (3, 4, 2)]),
        "matmul": (T.matmul, [(3, 4), (4, 2)]),
        "matmul_batched": (T.matmul, [(2, 3, 3, 4), (2, 3, 4, 2)]),
        "linear": (T.linear, [(2, 3, 4), (4, 5), (5,)]),
        "softmax_rows": (T.softmax_rows, [(3, 6)]),
        "layer_norm": (ln_op, [(4, 6), (6,), (6,)]),
    }


def _bce_case(seed: int):
    rng = np.random.default_rng(seed)
    logit = Tensor(rng.uniform(-2.0, 2.0, (6, 1)))
    target = Tensor((rng.random((6, 1)) < 0.5).astype(np.float64))
    return (lambda: T.bce_with_logits(logit, target)), [logit]


OP_NAMES = tuple(_op_cases()) + ("bce_with_logits",)


def check_op(name: str, seeds: Sequence[int] = range(10)) -> GradResult:
    start = time.perf_counter()
    worst, count = 0.0, 0
    cases = _op_cases()
    for seed in seeds:
        if name == "bce_with_logits":
            fn, leaves = _bce_case(seed)
        else:
            op, shapes = cases[name]
            fn, leaves = _projected(op, shapes, seed)
        err, n = check_gradients(fn, leaves)
        worst, count = max(worst, err), count + n
    return GradResult(name, worst, count, time.perf_counter() - start)


# model-level checks ---------------------------------------------------------------


def tiny_config():
    from .vit import ModelConfig

    return ModelConfig(image_size=16, patch_size=8, channels=1, dim=16, depth=2, heads=2,
                       mlp_ratio=2.0, local_fraction=0.5)


def _tiny_inputs(seed: int, batch: int = 2):
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    shape = (batch, cfg.image_size, cfg.image_size, cfg.channels)
    x1, x2 = rng.random(shape), rng.random(shape)
    y = np.array([[1.0], [0.0]] * (batch // 2) + [[1.0]] * (batch % 2))
    return cfg, x1, x2, y


def check_model(strategy: str, rtf: bool, seed: int = 0, max_coords: int = 6) -> GradResult:
    """Full two-branch loss of a tiny model against finite differences on sampled coordinates."""
    from .model import MultiViewModel, combined_loss, forward_train

    start = time.perf_counter()
    cfg, x1, x2, y = _tiny_inputs(seed)
    model = MultiViewModel(cfg, strategy, rtf, seed=seed, dtype=np.float64)
    # perturb LN gains/biases and zero-initialised biases so every rule sees generic values
    prng = np.random.default_rng(seed + 1)
    for p in model.parameters().values():
        p.values = p.values + prng.normal(0.0, 0.1, p.shape)
    target = Tensor(y)

    def loss():
        return combined_loss(forward_train(model, x1, x2, np.random.default_rng(seed)), target)

    err, n = check_gradients(loss, list(model.parameters().values()), max_coords=max_coords,
                             rng=np.random.default_rng(seed))
    name = f"model[{strategy}{'+rtf' if rtf else ''}]"
    return GradResult(name, err, n, time.perf_counter() - start)


def check_fusion_head(strategy: str, seed: int = 0) -> GradResult:
    """Fuse two random token sets, apply a CLS-mean head, compare gradients w.r.t. both sets."""
    from .fusion import fuse, rtf_fuse, sample_rtf_masks
    from .vit import TokenSet

    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    z1 = Tensor(rng.uniform(-2, 2, (2, 5, 3)))
    z2 = Tensor(rng.uniform(-2, 2, (2, 5, 3)))
    w = Tensor(rng.uniform(-1, 1, (3, 1)))
    mask = sample_rtf_masks(2, 4, np.random.default_rng(seed))

    def loss():
        a, b = TokenSet(z1), TokenSet(z2)
        z = rtf_fuse(a, b, mask) if strategy == "rtf" else fuse(strategy, a, b)
        rows = [T.slice_tokens(z.tokens, r, r + 1) for r in z.cls_rows]
        h = rows[0] if len(rows) == 1 else T.mul_scalar(T.add(rows[0], rows[1]), 0.5)
        # also route spatial rows into the loss so their gradients are exercised
        s = T.mean_over(T.mean_over(z.tokens, 1), 1)
        logit = T.add(T.linear(T.reshape(h, (2, 3)), w), T.reshape(s, (2, 1)))
        return T.sum_all(T.mul(logit, logit))

    err, n = check_gradients(loss, [z1, z2, w])
    return GradResult(f"fusion[{strategy}]", err, n, time.perf_counter() - start)


def check_block(seed: int = 0) -> GradResult:
    from .vit import EncoderStage, TokenSet, stage_forward

    start = time.perf_counter()
    cfg = tiny_config()
    model_rng = np.random.default_rng(seed)
    from .vit import Block

    blk = Block(cfg, model_rng, "b", np.float64)
    for p in blk.parameters().values():
        p.values = p.values + model_rng.normal(0.0, 0.3, p.shape)
    stage = EncoderStage([blk], cfg.dim)
    x = Tensor(model_rng.uniform(-2, 2, (2, 5, cfg.dim)))
    proj = Tensor(model_rng.uniform(-1, 1, (2, 5, cfg.dim)))

    def loss():
        return T.sum_all(T.mul(stage_forward(TokenSet(x), stage).tokens, proj))

    err, n = check_gradients(loss, [x] + list(blk.parameters().values()), max_coords=8,
                             rng=np.random.default_rng(seed))
    return GradResult("block", err, n, time.perf_counter() - start)


def check_patch_embed(seed: int = 0) -> GradResult:
    from .vit import PatchEmbedding, patch_embed

    start = time.perf_counter()
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    emb = PatchEmbedding(cfg, rng, np.float64)
    img = rng.random((2, cfg.image_size, cfg.image_size, cfg.channels))
    proj = Tensor(rng.uniform(-1, 1, (2, cfg.num_patches + 1, cfg.dim)))

    def loss():
        return T.sum_all(T.mul(patch_embed(img, cfg, emb).tokens, proj))

    err, n = check_gradients(loss, list(emb.parameters().values()), max_coords=12,
                             rng=np.random.default_rng(seed))
    return GradResult("patch_embed", err, n, time.perf_counter() - start)


def run_suite(seeds: Sequence[int] = range(10)) -> list:
    """Every tensor op over ``seeds`` plus block, embedding, fusion and full-model checks."""
    results = [check_op(name, seeds) for name in OP_NAMES]
    results.append(check_patch_embed())
    results.append(check_block())
    for strategy in ("average", "clscat", "concat", "rtf"):
        results.append(check_fusion_head(strategy))
    for strategy in ("average", "clscat", "concat"):
        results.append(check_model(strategy, rtf=True))
    results.append(check_model("concat", rtf=False))
    return results
