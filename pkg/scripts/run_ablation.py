"""Compare the beta variants on a scene, step by step, from a shared start.

    python scripts/run_ablation.py scenes/drop.yaml --steps 50
"""
import argparse
from pathlib import Path

import numpy as np

from pncg_ipc.cli import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("scene", type=Path)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--variants", nargs="+", default=["dk", "fr", "prp"])
    ap.add_argument("--out", type=Path, default=Path("out/ablation"))
    args = ap.parse_args()

    res = run_ablation(args.scene, args.variants, args.steps, out=args.out)
    iters = np.array([res[v]["iterations"] for v in args.variants])
    print(f"{'variant':8s} {'mean':>7s} {'median':>7s} {'max':>5s} {'best on':>8s}")
    best = iters.min(axis=0)
    for v, row in zip(args.variants, iters):
        wins = int(np.sum(row == best))
        print(f"{v:8s} {row.mean():7.2f} {np.median(row):7.1f} {row.max():5d} {wins:5d}/{args.steps}")
    print(f"traces in {args.out / 'ablation_traces.csv'}")


if __name__ == "__main__":
    main()
