"""Per-frame convergence summary of a finished run directory.

    python scripts/convergence_summary.py out/drop
"""
import argparse
import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np


def load_rows(path):
    frames = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            frames[int(row["frame"])].append(row)
    return frames


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--every", type=int, default=10, help="print one frame in this many")
    args = ap.parse_args()

    report = json.loads((args.run_dir / "report.json").read_text())
    eps = report["solver"]["epsilon"]
    frames = load_rows(args.run_dir / "convergence.csv")
    print(f"{'frame':>5s} {'iters':>5s} {'dE ratio':>10s} {'capped':>6s} {'contacts':>8s} {'min dist':>10s}")
    ratios = []
    for meta in report["frames"]:
        rows = frames[meta["frame"]]
        dE = np.array([float(r["dE"]) for r in rows])
        ratio = dE[-1] / dE[0] if dE[0] > 0 else 0.0
        ratios.append(ratio)
        if meta["frame"] % args.every == 0:
            capped = sum(r["capped"] == "1" for r in rows)
            print(f"{meta['frame']:5d} {meta['iterations']:5d} {ratio:10.2e} {capped:6d} "
                  f"{meta['max_constraints']:8d} {meta['min_distance']:10.3e}")
    ratios = np.array(ratios)
    s = report["summary"]
    print(f"{s['frames']} frames, avg iters {s['avg_iters']:.2f}, "
          f"{np.sum(ratios < eps)} below epsilon {eps:g}, reasons {s['reasons']}")


if __name__ == "__main__":
    main()
