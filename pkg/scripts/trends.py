"""Run the trend experiments and write one CSV per protocol.

    python3 scripts/trends.py --out runs/trends --epochs 60 benefit rtf balance
"""

import argparse
import json
from pathlib import Path

from rtfvit import experiments as E

PROTOCOLS = {"benefit": E.multiview_benefit, "rtf": E.rtf_trend, "balance": E.balance_trend}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("protocols", nargs="+", choices=sorted(PROTOCOLS))
    ap.add_argument("--out", default="runs/trends")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seeds", default="0,1,2,3")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    for name in args.protocols:
        res = PROTOCOLS[name](seeds=seeds, epochs=args.epochs)
        res.to_csv(out / f"{name}.csv")
        print(json.dumps({"protocol": name, "seconds": round(res.seconds, 1)}), flush=True)
        for row in res.rows:
            print("  ", row, flush=True)


if __name__ == "__main__":
    main()
