"""AdamW, AUC, the training loop, ablation grids and attention-balance analysis."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.stats import rankdata

from . import tensor as T
from .data import Dataset, augment
from .errors import ConfigError, ContractError, DivergenceError, MetricError, NumericalError
from .fusion import FusionStrategy
from .model import MultiViewModel, combined_loss, forward_infer, forward_train
from .vit import ModelConfig, attention_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    augment: bool = False

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not all(0.0 < b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be a pair in (0, 1), got {self.betas}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"bad epochs/batch_size: {self.epochs}, {self.batch_size}")
        return self


# optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One AdamW update in place; weight decay acts on the weights, not the gradients."""
    if cfg.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {cfg.lr}")
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        w = p.values
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new = w - cfg.lr * cfg.weight_decay * w - cfg.lr * update
        p.values = new.astype(w.dtype, copy=False)


# metric -------------------------------------------------------------------------


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank sum; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores vs {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise MetricError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# training -------------------------------------------------------------------------


@dataclass
class RunRecord:
    train_loss: list
    val_auc: list
    test_auc: float
    best_epoch: int
    seed: int
    config_hash: str = ""


def config_hash(*parts) -> str:
    text = repr([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts])
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def predict(model: MultiViewModel, x1, x2, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x1), batch_size):
        out.append(forward_infer(model, x1[i:i + batch_size], x2[i:i + batch_size]).values[:, 0])
    return np.concatenate(out).astype(np.float64)


def _rngs(seed: int) -> tuple:
    shuffle, aug, rtf = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(s) for s in (shuffle, aug, rtf))


def train(model: MultiViewModel, dataset: Dataset, cfg: TrainConfig, progress=None) -> RunRecord:
    """Train with the combined loss; report test AUC of the best-validation epoch.

    Validation AUC is computed once per epoch with inference-only forwards.
    The parameters of the epoch with the highest validation AUC (earliest on
    ties) are restored before the test split is scored. With ``epochs=0`` the
    untrained model is scored.
    """
    cfg.validate()
    shuffle_rng, aug_rng, rtf_rng = _rngs(cfg.seed)
    x1, x2, y = dataset.arrays("train")
    vx1, vx2, vy = dataset.arrays("val")
    params = model.parameters()
    state = AdamState()
    losses, val_aucs = [], []
    best_auc, best_epoch, best_state = -math.inf, -1, None
    n = len(y)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b1, b2 = x1[idx], x2[idx]
            if cfg.augment:
                flipped = [augment(s, aug_rng) for s in (dataset.train[i] for i in idx)]
                b1 = np.stack([s.view1 for s in flipped])
                b2 = np.stack([s.view2 for s in flipped])
            model.zero_grad()
            try:
                with T.Tape() as tape:
                    out = forward_train(model, b1, b2, rtf_rng)
                    loss = combined_loss(out, y[idx])
                tape.backward(loss)
            except NumericalError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}")
            adamw_step(params, {k: p.grad for k, p in params.items()}, state, cfg)
            total += value * len(idx)
            seen += len(idx)
        losses.append(total / seen)
        score = auc(predict(model, vx1, vx2), vy)
        val_aucs.append(score)
        if score > best_auc:
            best_auc, best_epoch, best_state = score, epoch, model.state_dict()
        if progress is not None:
            progress(epoch, losses[-1], score)
    if best_state is not None:
        model.load_state_dict(best_state)
    tx1, tx2, ty = dataset.arrays("test")
    test_auc = auc(predict(model, tx1, tx2), ty)
    return RunRecord(losses, val_aucs, test_auc, best_epoch, cfg.seed)


# ablation grid ----------------------------------------------------------------------


# desk-scale stand-ins for the Tiny/Small/Base ViT family
SCALES = {
    "custom": {},
    "tiny": dict(dim=16, depth=4, heads=2),
    "small": dict(dim=32, depth=4, heads=4),
    "base": dict(dim=48, depth=8, heads=4),
}

RESULT_COLUMNS = ("strategy", "rtf", "split_fraction", "scale", "seed", "val_auc", "test_auc")
SUMMARY_COLUMNS = ("strategy", "rtf", "split_fraction", "scale", "runs", "mean_test_auc",
                   "std_test_auc", "mean_val_auc", "status")


@dataclass(frozen=True)
class Cell:
    strategy: str
    rtf: bool
    split_fraction: float
    scale: str

    @property
    def key(self) -> str:
        return f"{self.strategy}|{'rtf' if self.rtf else 'base'}|{self.split_fraction:g}|{self.scale}"


@dataclass
class Grid:
    strategies: Sequence[str] = ("average", "clscat", "concat")
    rtf: Sequence[bool] = (False, True)
    split_fractions: Sequence[float] = (0.25, 0.5, 0.75)
    scales: Sequence[str] = ("small",)

    def cells(self) -> list:
        out = []
        for scale, frac, strategy, rtf in product(self.scales, self.split_fractions,
                                                  self.strategies, self.rtf):
            out.append(Cell(FusionStrategy.parse(strategy).value, bool(rtf), float(frac), scale))
        if not out:
            raise ConfigError("ablation grid is empty")
        return out


def scaled_config(base: ModelConfig, scale: Optional[str], split_fraction: float) -> ModelConfig:
    extra = {}
    if scale is not None:
        if scale not in SCALES:
            raise ConfigError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
        extra = SCALES[scale]
    return replace(base, local_fraction=split_fraction, **extra).validate()


def run_one(cell: Cell, seed: int, base_model: ModelConfig, train_cfg: TrainConfig,
            dataset: Dataset) -> RunRecord:
    """One training run; the model initialisation and every random stream derive from ``seed``."""
    mcfg = scaled_config(base_model, cell.scale, cell.split_fraction)
    tcfg = replace(train_cfg, seed=seed)
    model = MultiViewModel(mcfg, cell.strategy, cell.rtf, seed=seed)
    record = train(model, dataset, tcfg)
    record.config_hash = config_hash(mcfg, tcfg, cell.key)
    return record


def _run_cell(args) -> tuple:
    cell, seeds, base_model, train_cfg, dataset = args
    records, error = [], None
    try:
        for seed in seeds:
            records.append(run_one(cell, seed, base_model, train_cfg, dataset))
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the matrix
        error = f"{type(exc).__name__}: {exc}"
        log.warning("cell %s failed: %s", cell.key, error)
    return cell, records, error


@dataclass
class MatrixResult:
    rows: list
    summary: list
    failed: list


def run_matrix(grid: Grid, seeds: Sequence[int], base_model: ModelConfig, train_cfg: TrainConfig,
               dataset: Dataset, workers: int = 1) -> MatrixResult:
    """Train every cell of ``grid`` for every seed and summarise test AUC per cell."""
    cells = grid.cells()
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(cell, seeds, base_model, train_cfg, dataset) for cell in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    rows, summary, failed = [], [], []
    for cell, records, error in results:
        for rec in records:
            rows.append(result_row(cell, rec))
        if error is not None:
            failed.append((cell.key, error))
        tests = np.array([r.test_auc for r in records]) if records and error is None else None
        vals = np.array([max(r.val_auc) if r.val_auc else float("nan") for r in records])
        summary.append({
            "strategy": cell.strategy,
            "rtf": "yes" if cell.rtf else "no",
            "split_fraction": f"{cell.split_fraction:g}",
            "scale": cell.scale,
            "runs": len(records),
            "mean_test_auc": _fmt(tests.mean()) if tests is not None else "",
            "std_test_auc": _fmt(tests.std(ddof=1) if len(tests) > 1 else 0.0) if tests is not None else "",
            "mean_val_auc": _fmt(vals.mean()) if tests is not None else "",
            "status": "ok" if error is None else "failed",
        })
    return MatrixResult(rows, summary, failed)


def _fmt(x: float) -> str:
    return f"{float(x):.6f}"


def result_row(cell: Cell, rec: RunRecord) -> dict:
    best_val = rec.val_auc[rec.best_epoch] if rec.best_epoch >= 0 else float("nan")
    return {
        "strategy": cell.strategy,
        "rtf": "yes" if cell.rtf else "no",
        "split_fraction": f"{cell.split_fraction:g}",
        "scale": cell.scale,
        "seed": rec.seed,
        "val_auc": _fmt(best_val),
        "test_auc": _fmt(rec.test_auc),
    }


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in columns})


def write_history(path, rec: RunRecord) -> None:
    rows = [{"epoch": i, "train_loss": _fmt(l), "val_auc": _fmt(a)}
            for i, (l, a) in enumerate(zip(rec.train_loss, rec.val_auc))]
    write_csv(path, rows, ("epoch", "train_loss", "val_auc"))


def format_table(summary: Sequence[dict]) -> str:
    """Rows per (strategy, RTF), columns per split fraction, cells as mean ± std."""
    fracs = sorted({r["split_fraction"] for r in summary}, key=float)
    scales = sorted({r["scale"] for r in summary})
    lines = []
    for scale in scales:
        header = ["Fusion", "RTF"] + [f"{float(f) * 100:g}% local" for f in fracs]
        lines.append(f"[{scale}]")
        lines.append(" | ".join(header))
        keys = []
        for r in summary:
            k = (r["strategy"], r["rtf"])
            if r["scale"] == scale and k not in keys:
                keys.append(k)
        for strategy, rtf in keys:
            cells = []
            for f in fracs:
                match = [r for r in summary if r["scale"] == scale and r["strategy"] == strategy
                         and r["rtf"] == rtf and r["split_fraction"] == f]
                r = match[0] if match else None
                if r is None or r["status"] != "ok":
                    cells.append("failed" if r else "-")
                else:
                    cells.append(f"{float(r['mean_test_auc']):.3f} ± {float(r['std_test_auc']):.3f}")
            lines.append(" | ".join([strategy, rtf] + cells))
    return "\n".join(lines)


# attention -------------------------------------------------------------------------


@dataclass
class AttentionBalance:
    mass1: float
    mass2: float


def cls_attention(model: MultiViewModel, x1, x2) -> np.ndarray:
    """Head-averaged CLS-row attention ``[B, T]`` of the last global block (Concat only)."""
    if model.strategy is not FusionStrategy.CONCAT or model.input_view != "both":
        raise ContractError("attention balance needs a two-view Concat model")
    forward_infer(model, x1, x2)
    att = attention_weights(model.global_, model.global_.depth - 1, sample=None)
    n1 = model.cfg.num_patches + 1
    rows = att[:, :, [0, n1], :].mean(axis=(1, 2))
    return rows.astype(np.float64)


def _masses(rows: np.ndarray, n: int) -> np.ndarray:
    m1 = rows[:, 1:n + 1].sum(axis=1)
    m2 = rows[:, n + 2:2 * n + 2].sum(axis=1)
    total = m1 + m2
    return np.stack([m1 / total, m2 / total], axis=1)


def attention_balance(model: MultiViewModel, sample) -> AttentionBalance:
    """Share of CLS attention on view-1 versus view-2 spatial tokens, renormalised."""
    rows = cls_attention(model, sample.view1[None], sample.view2[None])
    m = _masses(rows, model.cfg.num_patches)[0]
    return AttentionBalance(float(m[0]), float(m[1]))


def balance_gap(model: MultiViewModel, dataset: Dataset, split: str = "test") -> float:
    """Mean ``|mass1 - 0.5|`` over a split."""
    x1, x2, _ = dataset.arrays(split)
    gaps = []
    for i in range(0, len(x1), 128):
        rows = cls_attention(model, x1[i:i + 128], x2[i:i + 128])
        gaps.append(np.abs(_masses(rows, model.cfg.num_patches)[:, 0] - 0.5))
    return float(np.concatenate(gaps).mean())


def view_maps(model: MultiViewModel, sample) -> tuple:
    """CLS attention over each view's patch grid, ``[grid, grid]`` per view."""
    rows = cls_attention(model, sample.view1[None], sample.view2[None])[0]
    n, g = model.cfg.num_patches, model.cfg.grid
    return rows[1:n + 1].reshape(g, g), rows[n + 2:2 * n + 2].reshape(g, g)


def export_attention(model: MultiViewModel, samples: Sequence, out_dir) -> list:
    """Write per-sample text maps and 8-bit PNG heatmaps; return balance rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    rows = []
    for s in samples:
        m1, m2 = view_maps(model, s)
        peak = max(m1.max(), m2.max(), 1e-12)
        for tag, grid in (("view1", m1), ("view2", m2)):
            np.savetxt(out_dir / f"{s.id}_{tag}.txt", grid, fmt="%.8f")
            img = np.rint(255.0 * grid / peak).astype(np.uint8)
            img = np.kron(img, np.ones((cfg.patch_size, cfg.patch_size), dtype=np.uint8))
            Image.fromarray(img, mode="L").save(out_dir / f"{s.id}_{tag}.png")
        bal = attention_balance(model, s)
        rows.append({"id": s.id, "mass1": _fmt(bal.mass1), "mass2": _fmt(bal.mass2)})
    write_csv(out_dir / "balance.csv", rows, ("id", "mass1", "mass2"))
    return rows
