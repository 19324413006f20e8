#!/usr/bin/env python3
"""Coupled-run stability study: divergence vs per-client sample count.

Drives the stability command, then reports the fitted log-log slope per
masking probability (the theory predicts roughly -1/2) and the masked vs
full divergence comparison.
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

from maskfed.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "stability_scaling.yaml"


def run(out_dir: str = "out/stability_scaling", workers: str = "1") -> int:
    code = main(["stability", "--config", str(CONFIG), "--out", out_dir, "--workers", workers])
    if code != 0:
        return code
    with open(Path(out_dir) / "stability_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    by_p = defaultdict(list)
    for row in rows:
        by_p[row["p"]].append(row)
    print(f"\n{'p':>6} {'n':>6} {'mean divergence':>16} {'mean gap':>12} {'slope':>8}")
    for p, cells in by_p.items():
        for row in cells:
            print(
                f"{float(p):>6.2f} {row['n']:>6} {float(row['mean_divergence']):>16.4e} "
                f"{float(row['mean_gap']):>12.4e} {float(row['slope']):>8.3f}"
            )
    return 0


if __name__ == "__main__":
    sys.exit(run(*sys.argv[1:]))
