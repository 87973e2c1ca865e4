#!/usr/bin/env python3
"""Train all four solvers on the desk preset and print the accuracy table.

Each algorithm writes metrics.csv/timing.csv plus a best-validation
checkpoint under <out>/<algorithm>/.  Exits nonzero if any run fails.
"""

import argparse
import csv
import sys
from pathlib import Path

from mlcsc.cli import main

ALGORITHMS = ("lta", "lbp", "mlista", "wsebp")


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args(argv)

    worst = 0
    for algorithm in ALGORITHMS:
        cmd = ["train", "--preset", "desk", "--algorithm", algorithm,
               "--out", f"{args.out}/{algorithm}"]
        if args.seed is not None:
            cmd += ["--seed", str(args.seed)]
        worst = max(worst, main(cmd))

    print(f"\n{'algorithm':10s} {'test_acc':>8s}")
    for algorithm in ALGORITHMS:
        path = Path(args.out) / algorithm / "metrics.csv"
        if not path.is_file():
            continue
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["metric"] == "test_acc":
                    print(f"{algorithm:10s} {float(row['value']):8.4f}")
    return worst


if __name__ == "__main__":
    sys.exit(run())
