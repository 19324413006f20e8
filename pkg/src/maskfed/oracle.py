"""Exact and sampled evaluation of the mask-induced surrogate objectives.

Random masking optimizes F_p(w) = (1/N) sum_i E_{m~Ber(p_i)} f_i(m * w);
rolling masking optimizes the finite average F_m over each client's R fixed
windows.  Three evaluation modes cover F_p:

    enum             exact expectation by summing all 2^d masks (d <= 20)
    closed_quadratic exact for the quadratic kind via Bernoulli moments:
                     E[M A M] = p^2 A + p(1-p) diag(A) and E[M] c = p c
    monte_carlo      sample average over a fixed set of masks drawn once per
                     handle, so repeated evaluations share the same masks and
                     solvers see a smooth deterministic function

F_m needs no modes; the average over N*R masks is computed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import ConfigError, DomainBall, project_l2
from .data import (
    ClientDataset,
    ObjectiveSpec,
    grad_batch,
    gradient,
    loss,
    loss_batch,
    quadratic_moments,
)
from .masking import MaskPlan, build_rolling_masks, substream

EVAL_MODES = ("enum", "closed_quadratic", "monte_carlo")
_ENUM_MAX_DIM = 20


@lru_cache(maxsize=8)
def _enum_masks(d: int) -> tuple[np.ndarray, np.ndarray]:
    """All 2^d binary vectors and their popcounts."""
    bits = ((np.arange(1 << d)[:, None] >> np.arange(d)[None, :]) & 1).astype(np.float64)
    return bits, bits.sum(axis=1)


@dataclass
class MaskedObjectiveHandle:
    spec: ObjectiveSpec
    datasets: list[ClientDataset]
    plan: MaskPlan
    eval_mode: str = "enum"
    mc_samples: int = 512
    mc_seed: int = 0
    _mc_masks: list[np.ndarray] | None = field(default=None, repr=False)
    _quad: list[tuple] | None = field(default=None, repr=False)
    _windows: list[list[np.ndarray]] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.plan.n_clients != len(self.datasets):
            raise ConfigError("plan and datasets disagree on the number of clients")
        if self.plan.mode == "rolling":
            return
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"unknown eval mode {self.eval_mode!r}")
        if self.eval_mode == "enum" and self.dim > _ENUM_MAX_DIM:
            raise ConfigError(f"enum mode enumerates 2^d masks; refusing d={self.dim} > {_ENUM_MAX_DIM}")
        if self.eval_mode == "closed_quadratic" and self.spec.kind != "quadratic":
            raise ConfigError("closed_quadratic mode requires the quadratic kind")
        if self.eval_mode == "monte_carlo" and self.mc_samples < 2:
            raise ConfigError("monte_carlo needs at least 2 mask samples")

    @property
    def dim(self) -> int:
        return self.spec.param_dim(self.datasets[0].dim)

    @property
    def n_clients(self) -> int:
        return len(self.datasets)

    def mc_masks(self) -> list[np.ndarray]:
        if self._mc_masks is None:
            masks = []
            for i, p_i in enumerate(self.plan.p):
                rng = substream(self.mc_seed, i)
                masks.append((rng.random((self.mc_samples, self.dim)) < p_i).astype(np.float64))
            self._mc_masks = masks
        return self._mc_masks

    def quad_moments(self) -> list[tuple]:
        if self._quad is None:
            self._quad = [quadratic_moments(self.spec, ds) for ds in self.datasets]
        return self._quad

    def rolling_windows(self) -> list[list[np.ndarray]]:
        if self._windows is None:
            if self.plan.mode != "rolling":
                raise ConfigError("rolling windows require a rolling plan")
            self._windows = [
                build_rolling_masks(self.dim, int(s_i), self.plan.R) for s_i in self.plan.s
            ]
        return self._windows


def objective_value(spec: ObjectiveSpec, datasets: list[ClientDataset], w: np.ndarray) -> float:
    """The unmasked objective F(w), the mean of client losses."""
    return float(np.mean([loss(spec, ds, w) for ds in datasets]))


def objective_gradient(spec: ObjectiveSpec, datasets: list[ClientDataset], w: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(w)
    for ds in datasets:
        acc += gradient(spec, ds, w)
    return acc / len(datasets)


def _enum_weights(p_i: float, d: int) -> np.ndarray:
    _, pop = _enum_masks(d)
    return p_i ** pop * (1.0 - p_i) ** (d - pop)


def _client_masked_moments(h: MaskedObjectiveHandle, i: int, w: np.ndarray, want_sq: bool):
    """(E value, E masked gradient, E ||masked gradient||^2) for client i.

    The squared-norm term is only computed when `want_sq` is set; closed
    quadratic mode derives it from Bernoulli second moments, the other two
    modes from the same mask set that defines the value.
    """
    spec, ds = h.spec, h.datasets[i]
    d = h.dim
    if h.plan.mode == "rolling":
        masks = np.stack(h.rolling_windows()[i]).astype(np.float64)
        weights = np.full(len(masks), 1.0 / len(masks))
    elif h.eval_mode == "enum":
        masks, _ = _enum_masks(d)
        weights = _enum_weights(float(h.plan.p[i]), d)
    elif h.eval_mode == "monte_carlo":
        masks = h.mc_masks()[i]
        weights = np.full(len(masks), 1.0 / len(masks))
    else:
        return _closed_quadratic_moments(h, i, w, want_sq)

    pts = masks * w
    vals = loss_batch(spec, ds, pts)
    grads = grad_batch(spec, ds, pts) * masks
    value = float(weights @ vals)
    egrad = weights @ grads
    esq = float(weights @ np.sum(grads * grads, axis=1)) if want_sq else None
    return value, egrad, esq


def _closed_quadratic_moments(h: MaskedObjectiveHandle, i: int, w: np.ndarray, want_sq: bool):
    A, c, const = h.quad_moments()[i]
    p = float(h.plan.p[i])
    H = p * p * A + (p - p * p) * np.diag(np.diag(A))
    value = 0.5 * float(w @ (H @ w)) - p * float(c @ w) + const
    egrad = H @ w - p * c
    esq = _masked_grad_second_moment(A, c, p, w) if want_sq else None
    return value, egrad, esq


def _masked_grad_second_moment(A: np.ndarray, c: np.ndarray, p: float, w: np.ndarray) -> float:
    """E||M(A M w - c)||^2 for M = diag(m), m ~ Ber(p) per coordinate.

    Coordinate j contributes p * E[(alpha_j + sum_{k!=j} beta_jk m_k)^2] with
    beta_jk = A_jk w_k and alpha_j = A_jj w_j - c_j, using the independence
    of the off-diagonal Bernoulli draws.
    """
    beta = A * w[None, :]
    diag_term = np.diag(A) * w
    alpha = diag_term - c
    B = A @ w - diag_term                    # row sums of beta without k = j
    Q = np.sum(beta * beta, axis=1) - diag_term ** 2
    per_coord = alpha * alpha + 2.0 * p * alpha * B + p * (1 - p) * Q + p * p * B * B
    return float(p * np.sum(per_coord))


def fp_value(h: MaskedObjectiveHandle, w: np.ndarray) -> float:
    """F_p(w) under the handle's evaluation mode."""
    if h.plan.mode == "rolling":
        raise ConfigError("fp_value requires a random or full plan")
    return float(np.mean([_client_masked_moments(h, i, w, False)[0] for i in range(h.n_clients)]))


def fp_value_stderr(h: MaskedObjectiveHandle, w: np.ndarray) -> tuple[float, float]:
    """Monte-Carlo F_p estimate with its standard error (0 for exact modes)."""
    if h.eval_mode != "monte_carlo" or h.plan.mode == "rolling":
        return fp_value(h, w), 0.0
    total, var = 0.0, 0.0
    for i in range(h.n_clients):
        pts = h.mc_masks()[i] * w
        vals = loss_batch(h.spec, h.datasets[i], pts)
        total += float(np.mean(vals))
        var += float(np.var(vals, ddof=1)) / len(vals)
    N = h.n_clients
    return total / N, float(np.sqrt(var)) / N


def fp_gradient(h: MaskedObjectiveHandle, w: np.ndarray) -> np.ndarray:
    if h.plan.mode == "rolling":
        raise ConfigError("fp_gradient requires a random or full plan")
    acc = np.zeros_like(w)
    for i in range(h.n_clients):
        acc += _client_masked_moments(h, i, w, False)[1]
    return acc / h.n_clients


def fm_value(h: MaskedObjectiveHandle, w: np.ndarray) -> float:
    """F_m(w), the exact average over the N*R rolling windows."""
    if h.plan.mode != "rolling":
        raise ConfigError("fm_value requires a rolling plan")
    return float(np.mean([_client_masked_moments(h, i, w, False)[0] for i in range(h.n_clients)]))


def fm_gradient(h: MaskedObjectiveHandle, w: np.ndarray) -> np.ndarray:
    if h.plan.mode != "rolling":
        raise ConfigError("fm_gradient requires a rolling plan")
    acc = np.zeros_like(w)
    for i in range(h.n_clients):
        acc += _client_masked_moments(h, i, w, False)[1]
    return acc / h.n_clients


def mask_objective_value(h: MaskedObjectiveHandle, w: np.ndarray) -> float:
    return fm_value(h, w) if h.plan.mode == "rolling" else fp_value(h, w)


def mask_objective_gradient(h: MaskedObjectiveHandle, w: np.ndarray) -> np.ndarray:
    return fm_gradient(h, w) if h.plan.mode == "rolling" else fp_gradient(h, w)


def _masked_quadratic_system(h: MaskedObjectiveHandle) -> tuple[np.ndarray, np.ndarray]:
    """(H, b) with the masked quadratic objective equal to 0.5 w'Hw - b'w + const."""
    d = h.dim
    H = np.zeros((d, d))
    b = np.zeros(d)
    if h.plan.mode == "rolling":
        R = h.plan.R
        for i, (A, c, _) in enumerate(h.quad_moments()):
            for m in h.rolling_windows()[i]:
                mf = m.astype(np.float64)
                H += (A * mf[None, :]) * mf[:, None]
                b += mf * c
        H /= h.n_clients * R
        b /= h.n_clients * R
    else:
        for i, (A, c, _) in enumerate(h.quad_moments()):
            p = float(h.plan.p[i])
            H += p * p * A + (p - p * p) * np.diag(np.diag(A))
            b += p * c
        H /= h.n_clients
        b /= h.n_clients
    return H, b


def solve_masked_optimum(
    h: MaskedObjectiveHandle,
    ball: DomainBall,
    tol: float = 1e-8,
    max_iter: int = 500_000,
) -> np.ndarray:
    """Minimizer of the masked objective over the ball.

    Quadratic: direct solve of the expected (or averaged) linear system, with
    a projected-gradient polish when the unconstrained solution leaves the
    ball (KKT residual 1e-10).  Logistic with ridge > 0: projected gradient
    descent until the gradient-mapping norm drops below `tol`.  Nonconvex
    specs are refused.
    """
    if h.spec.kind == "mlp":
        raise ConfigError("no unique masked optimum for a nonconvex objective")
    if h.spec.kind == "logistic" and h.spec.ridge <= 0:
        raise ConfigError("logistic masked optimum requires ridge > 0")

    if h.spec.kind == "quadratic":
        H, b = _masked_quadratic_system(h)
        w, *_ = np.linalg.lstsq(H, b, rcond=None)
        if np.linalg.norm(w) <= ball.radius:
            return w
        grad = lambda x: H @ x - b
        lips = float(np.linalg.eigvalsh(H)[-1])
        tol = 1e-10
    else:
        grad = lambda x: mask_objective_gradient(h, x)
        lips = _logistic_smoothness(h)
        tol = min(tol, 1e-8)

    eta = 1.0 / max(lips, 1e-12)
    w = np.zeros(h.dim)
    for _ in range(max_iter):
        w_next = project_l2(w - eta * grad(w), ball)
        if np.linalg.norm(w - w_next) / eta < tol:
            return w_next
        w = w_next
    raise ConfigError(f"masked optimum solver did not reach tolerance {tol}")


def _logistic_smoothness(h: MaskedObjectiveHandle) -> float:
    worst = 0.0
    for ds in h.datasets:
        X = ds.features
        top = float(np.linalg.eigvalsh(X.T @ X / len(X))[-1])
        worst = max(worst, 0.25 * top + h.spec.ridge)
    return worst


def sigma_star(h: MaskedObjectiveHandle, ball: DomainBall) -> float:
    """Mean expected squared masked-gradient norm at the masked optimum."""
    w_star = solve_masked_optimum(h, ball)
    return float(np.mean([
        _client_masked_moments(h, i, w_star, True)[2] for i in range(h.n_clients)
    ]))


@dataclass
class DissimilarityReport:
    """Heterogeneity and dissimilarity constants measured on a finite point set.

    The gradient-dissimilarity maxima are taken over the declared evaluation
    points rather than all of R^d, so they are lower estimates, recorded as
    such via `eval_points`.
    """

    sigma_star_sq: float
    zeta_p_sq: float
    zeta_m_sq: float
    zeta_max_sq: float
    d_max: float
    eval_points: str

    def to_text(self) -> str:
        rows = [
            ("sigma_star_sq", self.sigma_star_sq),
            ("zeta_p_sq", self.zeta_p_sq),
            ("zeta_m_sq", self.zeta_m_sq),
            ("zeta_max_sq", self.zeta_max_sq),
            ("d_max", self.d_max),
        ]
        lines = [f"{k} = {v:.17g}" for k, v in rows]
        lines.append(f"eval_points = {self.eval_points}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DissimilarityReport":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                kv[key.strip()] = val.strip()
        return cls(
            sigma_star_sq=float(kv["sigma_star_sq"]),
            zeta_p_sq=float(kv["zeta_p_sq"]),
            zeta_m_sq=float(kv["zeta_m_sq"]),
            zeta_max_sq=float(kv["zeta_max_sq"]),
            d_max=float(kv["d_max"]),
            eval_points=kv["eval_points"],
        )


def _tv_distance(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    pa = hist_a / hist_a.sum()
    pb = hist_b / hist_b.sum()
    return 0.5 * float(np.abs(pa - pb).sum())


def pairwise_discrepancy(datasets: list[ClientDataset], feature_bins: int = 16) -> float:
    """Max pairwise total-variation distance between client data histograms.

    Distributions are discretized onto a shared grid: quantile bins of the
    pooled feature norms crossed with the label (classification) or quantile
    bins of the pooled targets (regression).
    """
    norms = [np.linalg.norm(ds.features, axis=1) for ds in datasets]
    pooled = np.concatenate(norms)
    edges = np.quantile(pooled, np.linspace(0, 1, feature_bins + 1)[1:-1])
    kind = datasets[0].generator.kind
    if kind == "logistic":
        label_of = lambda y: (y > 0).astype(np.int64)
        n_labels = 2
    else:
        pooled_y = np.concatenate([ds.targets for ds in datasets])
        y_edges = np.quantile(pooled_y, [0.25, 0.5, 0.75])
        label_of = lambda y: np.searchsorted(y_edges, y)
        n_labels = 4
    hists = []
    for ds, nrm in zip(datasets, norms):
        fb = np.searchsorted(edges, nrm)
        lb = label_of(ds.targets)
        hist = np.zeros((feature_bins, n_labels))
        np.add.at(hist, (fb, lb), 1.0)
        hists.append(hist.ravel())
    worst = 0.0
    for i in range(len(hists)):
        for j in range(i + 1, len(hists)):
            worst = max(worst, _tv_distance(hists[i], hists[j]))
    return worst


def zeta_hat(
    h: MaskedObjectiveHandle,
    eval_points: list[np.ndarray],
    ball: DomainBall | None = None,
) -> DissimilarityReport:
    """Dissimilarity constants maximized over the given evaluation points.

    sigma_star_sq is filled when the masked optimum is solvable (convex
    spec and a ball is supplied); the zeta constant of the other masking
    mode is reported as NaN.
    """
    if not eval_points:
        raise ConfigError("zeta_hat needs at least one evaluation point")
    N = h.n_clients
    zeta_sq = 0.0
    zeta_max_sq = 0.0
    for w in eval_points:
        moments = [_client_masked_moments(h, i, w, True) for i in range(N)]
        grad_avg = np.mean([m[1] for m in moments], axis=0)
        g2 = float(grad_avg @ grad_avg)
        per_client = [m[2] - 2.0 * float(grad_avg @ m[1]) + g2 for m in moments]
        per_client = [max(v, 0.0) for v in per_client]
        zeta_sq = max(zeta_sq, float(np.mean(per_client)))
        zeta_max_sq = max(zeta_max_sq, max(per_client))
    try:
        s_star = sigma_star(h, ball) if ball is not None else float("nan")
    except ConfigError:
        s_star = float("nan")
    return DissimilarityReport(
        sigma_star_sq=s_star,
        zeta_p_sq=zeta_sq if h.plan.mode != "rolling" else float("nan"),
        zeta_m_sq=zeta_sq if h.plan.mode == "rolling" else float("nan"),
        zeta_max_sq=zeta_max_sq,
        d_max=pairwise_discrepancy(h.datasets),
        eval_points=f"{len(eval_points)} declared points",
    )


def stationarity_bound(h: MaskedObjectiveHandle, w: np.ndarray, eps_sq: float, G: float, L: float) -> float:
    """Upper bound on ||grad F(w)||^2 implied by eps_sq-stationarity of the
    masked objective: 2*eps_sq plus the mask-deficit term."""
    d = h.dim
    if h.plan.mode == "rolling":
        deficits = np.array([d - int(s_i) for s_i in h.plan.s], dtype=np.float64)
    else:
        deficits = d * (1.0 - h.plan.p)
    wn2 = float(w @ w)
    return 2.0 * eps_sq + float(np.mean(deficits)) * (G * G + L * L * wn2)
