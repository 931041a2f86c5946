"""Coarse learning-rate grid on the Xor Concat baseline (RTF off).

    python3 scripts/lr_sweep.py --epochs 60 --out runs/lr_sweep.csv
"""

import argparse
from dataclasses import replace

from rtfvit.data import TaskSpec, generate
from rtfvit.experiments import TREND_MODEL
from rtfvit.model import MultiViewModel
from rtfvit.train import TrainConfig, train

GRID = (1e-4, 3e-4, 1e-3)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--out", default="runs/lr_sweep.csv")
    args = ap.parse_args()
    ds = generate(TaskSpec(kind="xor", noise=0.15, seed=0))
    rows = ["lr,seed,best_val_auc,test_auc"]
    for lr in GRID:
        for seed in (int(s) for s in args.seeds.split(",")):
            model = MultiViewModel(TREND_MODEL, "concat", False, seed=seed)
            rec = train(model, ds, replace(TrainConfig(epochs=args.epochs, lr=lr), seed=seed))
            rows.append(f"{lr:g},{seed},{max(rec.val_auc):.6f},{rec.test_auc:.6f}")
            print(rows[-1], flush=True)
    with open(args.out, "w") as fh:
        fh.write("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
