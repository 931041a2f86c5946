"""Trend experiments on the synthetic tasks.

Each protocol trains a handful of small models and returns per-seed numbers.
Thresholds are applied by the caller (tests or scripts), not here.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, TaskSpec, generate
from .model import MultiViewModel
from .train import TrainConfig, balance_gap, train
from .vit import ModelConfig

# D=32, L=4, 4 heads, 75% local
TREND_MODEL = ModelConfig(dim=32, depth=4, heads=4, local_fraction=0.75)
SEEDS = (0, 1, 2, 3)


@dataclass
class TrendResult:
    name: str
    rows: list = field(default_factory=list)  # one dict per trained model
    seconds: float = 0.0

    def values(self, key: str, **match) -> np.ndarray:
        picked = [r[key] for r in self.rows if all(r[k] == v for k, v in match.items())]
        return np.array(picked, dtype=float)

    def to_csv(self, path) -> None:
        cols = list(self.rows[0])
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _fit(dataset: Dataset, mcfg: ModelConfig, strategy: str, rtf: bool, seed: int,
         tcfg: TrainConfig, input_view: str = "both"):
    model = MultiViewModel(mcfg, strategy, rtf, seed=seed, input_view=input_view)
    rec = train(model, dataset, replace(tcfg, seed=seed))
    return model, rec


def multiview_benefit(seeds=SEEDS, epochs: int = 60, mcfg: ModelConfig = TREND_MODEL,
                      data_seed: int = 0) -> TrendResult:
    """Xor task: single-view models against the two-view Concat+RTF model."""
    start = time.perf_counter()
    ds = generate(TaskSpec(kind="xor", noise=0.15, n_train=512, n_val=128, n_test=256, seed=data_seed))
    out = TrendResult("multiview_benefit")
    tcfg = TrainConfig(epochs=epochs)
    for seed in seeds:
        for view in ("view1", "view2", "both"):
            _, rec = _fit(ds, mcfg, "concat", True, seed, tcfg, input_view=view)
            out.rows.append({"seed": seed, "input_view": view, "test_auc": rec.test_auc,
                             "best_val_auc": max(rec.val_auc) if rec.val_auc else float("nan")})
    out.seconds = time.perf_counter() - start
    return out


def rtf_trend(seeds=SEEDS, epochs: int = 60, mcfg: ModelConfig = TREND_MODEL,
              strategies=("average", "clscat", "concat"), data_seed: int = 0) -> TrendResult:
    """Dominant task: every strategy with and without the RTF branch."""
    start = time.perf_counter()
    ds = generate(TaskSpec(kind="dominant", alpha=0.95, noise=0.2, seed=data_seed))
    out = TrendResult("rtf_trend")
    tcfg = TrainConfig(epochs=epochs)
    for strategy in strategies:
        for rtf in (False, True):
            for seed in seeds:
                _, rec = _fit(ds, mcfg, strategy, rtf, seed, tcfg)
                out.rows.append({"strategy": strategy, "rtf": rtf, "seed": seed,
                                 "test_auc": rec.test_auc})
    out.seconds = time.perf_counter() - start
    return out


def balance_trend(seeds=SEEDS, epochs: int = 60, mcfg: ModelConfig = TREND_MODEL,
                  data_seed: int = 0) -> TrendResult:
    """Dominant task with both views fully predictive: Concat attention balance with and without RTF."""
    start = time.perf_counter()
    ds = generate(TaskSpec(kind="dominant", alpha=1.0, seed=data_seed))
    out = TrendResult("balance_trend")
    tcfg = TrainConfig(epochs=epochs)
    for seed in seeds:
        for rtf in (False, True):
            model, rec = _fit(ds, mcfg, "concat", rtf, seed, tcfg)
            out.rows.append({"seed": seed, "rtf": rtf, "gap": balance_gap(model, ds),
                             "test_auc": rec.test_auc})
    out.seconds = time.perf_counter() - start
    return out
