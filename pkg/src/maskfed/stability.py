"""On-average stability via seed-coupled runs on neighboring datasets.

A neighbor pair differs in exactly one sample of one client, the replacement
drawn fresh from that client's own generator.  Running the same TrainConfig
on both datasets with the same master seed reuses identical masks,
permutations, and sample-index sequences, so the output divergence isolates
the effect of the single replaced point.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .core import ConfigError
from .data import ClientDataset, point_loss
from .masking import substream
from .trainer import TrainConfig, TrainResult, resolve_constants, run

_EVAL_DRAWS = 256
_EVAL_NS = 7


@dataclass
class NeighborPair:
    base: list[ClientDataset]
    perturbed: list[ClientDataset]
    perturbed_client: int
    perturbed_index: int
    replacement: tuple[np.ndarray, float]


@dataclass
class StabilityResult:
    param_divergence: float
    loss_divergence: float
    lipschitz_surrogate: float
    base: TrainResult
    perturbed: TrainResult


def _copy_dataset(ds: ClientDataset) -> ClientDataset:
    return ClientDataset(ds.client_id, ds.features.copy(), ds.targets.copy(), ds.generator)


def make_neighbor(
    datasets: list[ClientDataset],
    i: int,
    j: int,
    rng: np.random.Generator,
    identity: bool = False,
) -> NeighborPair:
    """Deep copy of `datasets` with sample (i, j) replaced by a fresh draw.

    `identity` keeps the original sample (the perturbed set is then bitwise
    equal to the base), which exercises the zero-divergence contract.
    """
    if not 0 <= i < len(datasets):
        raise ConfigError(f"client index {i} out of range")
    if not 0 <= j < datasets[i].n:
        raise ConfigError(f"sample index {j} out of range for client {i}")
    base = [_copy_dataset(ds) for ds in datasets]
    perturbed = [_copy_dataset(ds) for ds in datasets]
    if identity:
        x_new = base[i].features[j].copy()
        y_new = float(base[i].targets[j])
    else:
        x, y = datasets[i].generator.draw(rng, 1)
        x_new, y_new = x[0], float(y[0])
    perturbed[i].features[j] = x_new
    perturbed[i].targets[j] = y_new
    return NeighborPair(base, perturbed, i, j, (x_new, y_new))


def coupled_run(cfg: TrainConfig, pair: NeighborPair) -> StabilityResult:
    """Train on both halves of a neighbor pair under identical randomness.

    The constants report (and hence the resolved step size and output-step L)
    is computed once on the base datasets and shared, so the two runs differ
    only through the replaced sample's contents.  The consumed-randomness
    digests of the two runs are asserted equal.
    """
    base_cfg = dataclasses.replace(cfg, datasets=pair.base)
    consts = resolve_constants(base_cfg)
    base_cfg = dataclasses.replace(base_cfg, constants=consts)
    pert_cfg = dataclasses.replace(cfg, datasets=pair.perturbed, constants=consts)

    res_a = run(base_cfg)
    res_b = run(pert_cfg)
    if res_a.rng_digest != res_b.rng_digest:
        raise ConfigError("coupled runs consumed different randomness; coupling is broken")

    div = float(np.linalg.norm(res_a.w_hat - res_b.w_hat))
    gen = pair.base[pair.perturbed_client].generator
    rng = substream(cfg.seed, _EVAL_NS, pair.perturbed_client, pair.perturbed_index)
    xs, ys = gen.draw(rng, _EVAL_DRAWS)
    diffs = [
        abs(point_loss(cfg.spec, xs[t], float(ys[t]), res_a.w_hat)
            - point_loss(cfg.spec, xs[t], float(ys[t]), res_b.w_hat))
        for t in range(_EVAL_DRAWS)
    ]
    return StabilityResult(
        param_divergence=div,
        loss_divergence=float(np.mean(diffs)),
        lipschitz_surrogate=consts.G * div,
        base=res_a,
        perturbed=res_b,
    )


def generalization_gap(
    spec,
    w: np.ndarray,
    train: list[ClientDataset],
    test: list[ClientDataset],
) -> float:
    """|mean train loss - mean test loss|, each mean taken over clients."""
    if not test or any(ds.n == 0 for ds in test):
        raise ConfigError("generalization gap requires nonempty test sets")
    from .data import loss as _loss

    train_mean = float(np.mean([_loss(spec, ds, w) for ds in train]))
    test_mean = float(np.mean([_loss(spec, ds, w) for ds in test]))
    return abs(train_mean - test_mean)


def loglog_slope(ns: list[int], divergences: list[float]) -> float:
    """Least-squares slope of log(divergence) against log(n)."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(divergences, dtype=np.float64))
    x = x - x.mean()
    return float((x @ (y - y.mean())) / (x @ x))
