"""The two sub-model training loops plus the full-model baseline.

Both algorithms follow the same round skeleton: the server hands each client
a masked copy of the global model, clients run K local stochastic gradient
steps restricted to their mask, and the server fills the untrained
coordinates from the previous global model, averages, and projects.  The
random variant draws fresh Bernoulli masks every round; the rolling variant
walks each client through its R fixed windows in an order reshuffled once
per epoch.  Training ends with one extra masked full-batch gradient step of
size 1/L and a final projection.

Rounds are addressed by a global counter (epoch * R + r), and every source
of randomness is a named substream of the master seed, so a rolling run
with one round per epoch consumes byte-identical randomness to a random
run with the same total number of rounds.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, DomainBall, NumericError, project_l2, server_average
from .data import ClientDataset, ConstantsReport, ObjectiveSpec, estimate_constants, gradient, stochastic_gradient
from .masking import (
    DATA_NS,
    MASK_NS,
    OUTPUT_NS,
    PERM_NS,
    MaskPlan,
    build_rolling_masks,
    sample_bernoulli_masks,
    shuffle_permutation,
    substream,
)
from .oracle import (
    MaskedObjectiveHandle,
    mask_objective_gradient,
    mask_objective_value,
    objective_gradient,
    objective_value,
    solve_masked_optimum,
)

ETA_PRESETS = ("thm1", "thm2", "thm3", "thm4", "thm5")


@dataclass
class TrainConfig:
    spec: ObjectiveSpec
    datasets: list[ClientDataset]
    plan: MaskPlan
    K: int
    rounds: int              # total rounds (random) or rounds per epoch (rolling)
    ball: DomainBall
    seed: int
    epochs: int = 1          # rolling only; random mode runs a single epoch
    eta: float | str = 0.1
    record_every: int = 0    # 0 records only the first and final rounds
    constants: ConstantsReport | None = None
    const_trials: int = 64
    compute_mask_metrics: bool = True

    def __post_init__(self):
        if self.K < 1 or self.rounds < 1 or self.epochs < 1:
            raise ConfigError("K, rounds, and epochs must all be >= 1")
        if self.plan.mode == "rolling":
            if self.plan.R != self.rounds:
                raise ConfigError("rolling plans must carry R equal to the per-epoch round count")
        elif self.epochs != 1:
            raise ConfigError("random-mask runs use a single epoch; set rounds instead")
        if isinstance(self.eta, str):
            if self.eta not in ETA_PRESETS:
                raise ConfigError(f"unknown step-size preset {self.eta!r}")
        elif self.eta < 0:
            # eta = 0 is allowed as the degenerate no-learning case
            raise ConfigError("eta must be nonnegative")

    @property
    def dim(self) -> int:
        return self.spec.param_dim(self.datasets[0].dim)

    @property
    def total_rounds(self) -> int:
        return self.rounds * self.epochs


@dataclass
class MetricsRecord:
    round: int
    F_value: float
    Fmask_value: float
    grad_norm_sq_F: float
    grad_norm_sq_Fmask: float
    dist_to_wstar_mask: float


@dataclass
class TrainResult:
    w_hat: np.ndarray
    w_final: np.ndarray
    trajectory: list[tuple[int, np.ndarray]]
    metrics: list[MetricsRecord]
    eta: float
    constants: ConstantsReport
    rng_digest: str


def resolve_constants(cfg: TrainConfig) -> ConstantsReport:
    if cfg.constants is not None:
        return cfg.constants
    p = cfg.plan.p if cfg.plan.mode in ("random", "full") else np.ones(len(cfg.datasets))
    return estimate_constants(
        cfg.spec, cfg.datasets, cfg.ball, p, trials=cfg.const_trials,
        seed=cfg.seed ^ 0x5EED,
    )


def resolve_eta(cfg: TrainConfig, consts: ConstantsReport) -> float:
    """Numeric step size from a preset name or a literal value.

    thm1  2 log(K R_tot) / (mu_tilde K R_tot)    strongly convex, random
    thm2  1 / (L sqrt(K R_tot))                  nonconvex, random
    thm3  2 log(T) / (mu K R T)                  strongly convex, rolling
    thm4  1 / (L sqrt(K R T))                    nonconvex, rolling
    thm5  sqrt(N n) / (R_tot K)                  stability regime
    """
    if not isinstance(cfg.eta, str):
        return float(cfg.eta)
    K, R, T = cfg.K, cfg.rounds, cfg.epochs
    R_tot = cfg.total_rounds
    if cfg.eta == "thm1":
        return 2.0 * math.log(K * R_tot) / (consts.mu_tilde * K * R_tot)
    if cfg.eta == "thm2":
        return 1.0 / (consts.L * math.sqrt(K * R_tot))
    if cfg.eta == "thm3":
        return 2.0 * math.log(max(T, 2)) / (consts.mu * K * R * T)
    if cfg.eta == "thm4":
        return 1.0 / (consts.L * math.sqrt(K * R * T))
    if cfg.eta == "thm5":
        N = len(cfg.datasets)
        n = cfg.datasets[0].n
        return math.sqrt(N * n) / (R_tot * K)
    raise ConfigError(f"unknown step-size preset {cfg.eta!r}")


def _metrics_handle(cfg: TrainConfig) -> MaskedObjectiveHandle:
    if cfg.plan.mode == "rolling":
        return MaskedObjectiveHandle(cfg.spec, cfg.datasets, cfg.plan)
    if cfg.spec.kind == "quadratic":
        mode = "closed_quadratic"
    elif cfg.dim <= 10:
        mode = "enum"
    else:
        mode = "monte_carlo"
    return MaskedObjectiveHandle(
        cfg.spec, cfg.datasets, cfg.plan, eval_mode=mode,
        mc_samples=256, mc_seed=cfg.seed ^ 0x0AC1E,
    )


class _Recorder:
    """Collects the thinned trajectory and metric time series."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.trajectory: list[tuple[int, np.ndarray]] = []
        self.metrics: list[MetricsRecord] = []
        self.handle = _metrics_handle(cfg) if cfg.compute_mask_metrics else None
        self.w_star_mask = None
        if self.handle is not None:
            try:
                self.w_star_mask = solve_masked_optimum(self.handle, cfg.ball)
            except ConfigError:
                self.w_star_mask = None

    def due(self, g: int, total: int) -> bool:
        if g == 0 or g == total:
            return True
        return self.cfg.record_every > 0 and g % self.cfg.record_every == 0

    def record(self, g: int, w: np.ndarray) -> None:
        self.trajectory.append((g, w.copy()))
        cfg = self.cfg
        f_val = objective_value(cfg.spec, cfg.datasets, w)
        g_f = objective_gradient(cfg.spec, cfg.datasets, w)
        if self.handle is not None:
            fm_val = mask_objective_value(self.handle, w)
            g_fm = mask_objective_gradient(self.handle, w)
            gm2 = float(g_fm @ g_fm)
        else:
            fm_val, gm2 = float("nan"), float("nan")
        dist = (
            float(np.linalg.norm(w - self.w_star_mask))
            if self.w_star_mask is not None
            else float("nan")
        )
        self.metrics.append(MetricsRecord(
            round=g, F_value=f_val, Fmask_value=fm_val,
            grad_norm_sq_F=float(g_f @ g_f), grad_norm_sq_Fmask=gm2,
            dist_to_wstar_mask=dist,
        ))


def _check_finite(w: np.ndarray, g: int) -> None:
    if not np.all(np.isfinite(w)):
        raise NumericError(f"non-finite global model after round {g}; aborting run")


def _local_steps(
    spec: ObjectiveSpec,
    ds: ClientDataset,
    mask: np.ndarray,
    w_start: np.ndarray,
    eta: float,
    idx: np.ndarray,
    where: str,
) -> np.ndarray:
    w_loc = mask * w_start
    for k in idx:
        g_vec = mask * stochastic_gradient(spec, ds, mask * w_loc, int(k))
        w_loc = w_loc - eta * g_vec
    if not np.all(np.isfinite(w_loc)):
        raise NumericError(f"non-finite local model ({where}); aborting run")
    if __debug__:
        assert np.all(w_loc[mask == 0] == 0.0), "local step leaked outside the mask support"
    return w_loc


def output_step(
    w: np.ndarray,
    plan: MaskPlan,
    spec: ObjectiveSpec,
    datasets: list[ClientDataset],
    ball: DomainBall,
    L: float,
    seed: int,
) -> np.ndarray:
    """One extra masked full-batch gradient step of size 1/L, then projection.

    Random plans sample fresh masks from a dedicated stream; rolling plans
    average the masked gradients over all R windows in canonical order.
    """
    if L <= 0:
        raise ConfigError("output step requires L > 0")
    N = len(datasets)
    d = spec.param_dim(datasets[0].dim)
    acc = np.zeros(d)
    if plan.mode == "rolling":
        for i, ds in enumerate(datasets):
            inner = np.zeros(d)
            for m in build_rolling_masks(d, int(plan.s[i]), plan.R):
                inner += m * gradient(spec, ds, m * w)
            acc += inner / plan.R
    else:
        rngs = [substream(seed, OUTPUT_NS, i) for i in range(N)]
        masks = sample_bernoulli_masks(plan.p, d, rngs)
        for ds, m in zip(datasets, masks):
            acc += m * gradient(spec, ds, m * w)
    return project_l2(w - acc / (L * N), ball)


def _warn_if_divergent(eta: float, K: int, L: float) -> None:
    if eta * K * L > 1.0:
        warnings.warn(
            f"eta*K*L = {eta * K * L:.3g} > 1 lies outside the analyzed step-size regimes",
            RuntimeWarning,
        )


def run_random_masked_fedavg(cfg: TrainConfig) -> TrainResult:
    """Random (Bernoulli) sub-model FedAvg; also the full-model baseline."""
    if cfg.plan.mode not in ("random", "full"):
        raise ConfigError("random trainer requires a random or full plan")
    consts = resolve_constants(cfg)
    eta = resolve_eta(cfg, consts)
    _warn_if_divergent(eta, cfg.K, consts.L)
    N, d = len(cfg.datasets), cfg.dim
    digest = hashlib.sha256()
    rec = _Recorder(cfg)

    w = np.zeros(d)
    rec.record(0, w)
    for g in range(cfg.rounds):
        rngs = [substream(cfg.seed, MASK_NS, g, i) for i in range(N)]
        masks = sample_bernoulli_masks(cfg.plan.p, d, rngs)
        locals_ = []
        for i, ds in enumerate(cfg.datasets):
            idx = substream(cfg.seed, DATA_NS, g, i).integers(0, ds.n, size=cfg.K)
            digest.update(masks[i].tobytes())
            digest.update(idx.tobytes())
            locals_.append(_local_steps(cfg.spec, ds, masks[i], w, eta, idx,
                                        where=f"round {g}, client {i}"))
        w = server_average(locals_, masks, w, cfg.ball)
        _check_finite(w, g)
        if rec.due(g + 1, cfg.rounds):
            rec.record(g + 1, w)

    w_hat = output_step(w, cfg.plan, cfg.spec, cfg.datasets, cfg.ball, consts.L, cfg.seed)
    return TrainResult(
        w_hat=w_hat, w_final=w, trajectory=rec.trajectory, metrics=rec.metrics,
        eta=eta, constants=consts, rng_digest=digest.hexdigest(),
    )


def run_rolling_masked_fedavg(cfg: TrainConfig) -> TrainResult:
    """Rolling sub-model FedAvg with per-epoch shuffles of the fixed windows."""
    if cfg.plan.mode != "rolling":
        raise ConfigError("rolling trainer requires a rolling plan")
    consts = resolve_constants(cfg)
    eta = resolve_eta(cfg, consts)
    _warn_if_divergent(eta, cfg.K, consts.L)
    N, d = len(cfg.datasets), cfg.dim
    R = cfg.plan.R
    windows = [build_rolling_masks(d, int(s_i), R) for s_i in cfg.plan.s]
    digest = hashlib.sha256()
    rec = _Recorder(cfg)

    w = np.zeros(d)
    rec.record(0, w)
    for e in range(cfg.epochs):
        sigma = shuffle_permutation(R, substream(cfg.seed, PERM_NS, e))
        digest.update(sigma.sigma.tobytes())
        for r in range(1, R + 1):
            g = e * R + (r - 1)
            masks = [windows[i][sigma(r) - 1] for i in range(N)]
            locals_ = []
            for i, ds in enumerate(cfg.datasets):
                idx = substream(cfg.seed, DATA_NS, g, i).integers(0, ds.n, size=cfg.K)
                digest.update(masks[i].tobytes())
                digest.update(idx.tobytes())
                locals_.append(_local_steps(cfg.spec, ds, masks[i], w, eta, idx,
                                            where=f"epoch {e}, round {r}, client {i}"))
            w = server_average(locals_, masks, w, cfg.ball)
            _check_finite(w, g)
            if rec.due(g + 1, cfg.total_rounds):
                rec.record(g + 1, w)

    w_hat = output_step(w, cfg.plan, cfg.spec, cfg.datasets, cfg.ball, consts.L, cfg.seed)
    return TrainResult(
        w_hat=w_hat, w_final=w, trajectory=rec.trajectory, metrics=rec.metrics,
        eta=eta, constants=consts, rng_digest=digest.hexdigest(),
    )


def run(cfg: TrainConfig) -> TrainResult:
    if cfg.plan.mode == "rolling":
        return run_rolling_masked_fedavg(cfg)
    return run_random_masked_fedavg(cfg)
