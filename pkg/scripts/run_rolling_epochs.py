#!/usr/bin/env python3
"""Epoch scaling of rolling masked training.

Trains the rolling config at several epoch budgets and reports the
epoch-averaged squared gradient norm of the rolling surrogate objective,
which should shrink roughly like 1/sqrt(T).
"""

import sys

import numpy as np

from maskfed.config import ExperimentConfig
from maskfed.trainer import run

CONFIG_DOC = {
    "objective": {"kind": "logistic", "ridge": 0.1},
    "data": {"clients": 4, "samples": 50, "dim": 8, "heterogeneity": 0.5, "seed": 7},
    "plan": {"mode": "rolling", "s": 4},
    "trainer": {
        "local_steps": 4, "rounds": 8, "epochs": 16, "eta": "thm4",
        "radius": 10.0, "seed": 11, "record_every": 8, "constants_trials": 64,
    },
}


def epoch_metric(T: int, seeds: int = 5) -> float:
    cfg = ExperimentConfig.from_dict(CONFIG_DOC).with_override("trainer.epochs", T)
    R = cfg.raw["trainer"]["rounds"]
    vals = []
    for si in range(seeds):
        result = run(cfg.train_config(seed=cfg.raw["trainer"]["seed"] + si))
        by_round = {m.round: m for m in result.metrics}
        vals.append(np.mean([by_round[e * R].grad_norm_sq_Fmask for e in range(1, T + 1)]))
    return float(np.mean(vals))


def main() -> int:
    print(f"{'T':>6} {'avg ||grad F_m||^2':>20}")
    prev = None
    for T in (8, 16, 32, 64):
        m = epoch_metric(T)
        note = f"  (x{prev / m:.2f} better)" if prev else ""
        print(f"{T:>6} {m:>20.5e}{note}")
        prev = m
    return 0


if __name__ == "__main__":
    sys.exit(main())
