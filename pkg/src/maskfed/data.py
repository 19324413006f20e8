"""Synthetic heterogeneous client data and the loss oracles built on it.

Three objective kinds share one interface:

    quadratic   per-sample loss 0.5*(a.w - b)^2 + (ridge/2)*||w||^2
    logistic    log(1 + exp(-y * a.w)) + (ridge/2)*||w||^2, labels y in {-1,+1}
    mlp         0.5*(v.tanh(U a) - b)^2 + (ridge/2)*||w||^2, one hidden layer

For quadratic and logistic the model dimension equals the feature dimension.
For mlp the parameter vector packs [U row-major, v], so the model dimension
is hidden*(d+1).

Heterogeneity is a single knob in [0,1]: it shifts per-client feature means
along fixed per-client directions and, for classification, biases per-client
label proportions.  Regression targets are exact linear functions of the
features (no additive noise), so with identical generators every client
interpolates the same weight vector and the pooled optimum is noise-free.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DomainBall
from .masking import CONST_NS, GEN_NS, substream

KINDS = ("quadratic", "logistic", "mlp")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

_SHIFT_SCALE = 1.0   # feature-mean shift at heterogeneity 1
_BIAS_SCALE = 2.0    # label-proportion bias at heterogeneity 1
_DATA_MAGIC = b"MFD1"


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    ridge: float = 0.0
    hidden: int = 4  # mlp only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.ridge < 0:
            raise ConfigError("ridge must be nonnegative")
        if self.kind == "mlp" and self.hidden < 1:
            raise ConfigError("mlp hidden width must be >= 1")

    def param_dim(self, feature_dim: int) -> int:
        if self.kind == "mlp":
            return self.hidden * (feature_dim + 1)
        return feature_dim

    @property
    def strongly_convex(self) -> bool:
        return self.kind in ("quadratic", "logistic") and self.ridge > 0


@dataclass(frozen=True)
class ClientGenerator:
    """Distribution descriptor for one client; drawing is separate from state.

    Features are Gaussian with per-coordinate scales plus the client's mean
    shift; anisotropic scales give ill-conditioned (weakly convex) quadratic
    problems.  Regression targets are the linear signal plus optional noise;
    classification labels follow the logistic model around the biased margin.
    """

    kind: str
    mean_shift: np.ndarray
    w_gen: np.ndarray
    label_bias: float
    noise_std: float
    feature_scales: np.ndarray | None = None

    def scales(self) -> np.ndarray:
        if self.feature_scales is None:
            return np.ones(len(self.mean_shift))
        return self.feature_scales

    def draw(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        d = len(self.mean_shift)
        x = rng.normal(size=(size, d)) * self.scales() + self.mean_shift
        margin = x @ self.w_gen
        if self.kind == "logistic":
            prob = 1.0 / (1.0 + np.exp(-(margin + self.label_bias)))
            y = np.where(rng.random(size) < prob, 1.0, -1.0)
        else:
            y = margin
            if self.noise_std > 0:
                y = y + self.noise_std * rng.normal(size=size)
        return x, y

    def params_equal(self, other: "ClientGenerator") -> bool:
        return (
            self.kind == other.kind
            and np.array_equal(self.mean_shift, other.mean_shift)
            and np.array_equal(self.w_gen, other.w_gen)
            and self.label_bias == other.label_bias
            and self.noise_std == other.noise_std
            and np.array_equal(self.scales(), other.scales())
        )


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray  # (n, d)
    targets: np.ndarray   # (n,)
    generator: ClientGenerator

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def gen_clients(
    N: int,
    n: int,
    d: int,
    heterogeneity: float,
    kind: str,
    seed: int,
    split: int = 0,
    noise_std: float = 0.0,
) -> list[ClientDataset]:
    """N client datasets of n samples each, deterministic in (args, seed).

    heterogeneity 0 gives every client the identical generator; 1 gives the
    maximal configured feature shift and label bias.  `split` selects an
    independent draw stream from the same generators (0 train, 1 test, ...).
    With noise_std 0 every regression client interpolates the shared weight
    vector exactly; noise_std > 0 adds i.i.d. Gaussian target noise.
    """
    if N < 1 or n < 1 or d < 1:
        raise ConfigError(f"sizes must be >= 1, got N={N} n={n} d={d}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ConfigError(f"heterogeneity must lie in [0,1], got {heterogeneity}")
    if kind not in KINDS:
        raise ConfigError(f"unknown objective kind {kind!r}")
    if noise_std < 0:
        raise ConfigError("noise_std must be nonnegative")
    shared = substream(seed, GEN_NS)
    w_gen = shared.normal(size=d)
    w_gen /= np.linalg.norm(w_gen)
    datasets = []
    for i in range(N):
        u = shared.normal(size=d)
        u /= np.linalg.norm(u)
        spread = 0.0 if N == 1 else 2.0 * i / (N - 1) - 1.0
        gen = ClientGenerator(
            kind=kind,
            mean_shift=heterogeneity * _SHIFT_SCALE * u,
            w_gen=w_gen,
            label_bias=heterogeneity * _BIAS_SCALE * spread,
            noise_std=noise_std,
        )
        x, y = gen.draw(substream(seed, GEN_NS, i, split), n)
        datasets.append(ClientDataset(client_id=i, features=x, targets=y, generator=gen))
    return datasets


def gen_like(datasets: list[ClientDataset], n: int, seed: int, split: int) -> list[ClientDataset]:
    """Fresh datasets drawn from the same per-client generators."""
    out = []
    for ds in datasets:
        x, y = ds.generator.draw(substream(seed, GEN_NS, ds.client_id, split), n)
        out.append(ClientDataset(ds.client_id, x, y, ds.generator))
    return out


# --- loss / gradient oracles ------------------------------------------------

def _unpack_mlp(spec: ObjectiveSpec, w: np.ndarray, q: int):
    h = spec.hidden
    return w[: h * q].reshape(h, q), w[h * q :]


def _mlp_forward(spec, X, w):
    U, v = _unpack_mlp(spec, w, X.shape[1])
    t = np.tanh(X @ U.T)  # (n, h)
    return t @ v, t


def loss(spec: ObjectiveSpec, ds: ClientDataset, w: np.ndarray) -> float:
    """Empirical mean loss over the client's samples plus the ridge term."""
    X, y = ds.features, ds.targets
    if spec.kind == "quadratic":
        r = X @ w - y
        base = 0.5 * float(np.mean(r * r))
    elif spec.kind == "logistic":
        z = y * (X @ w)
        base = float(np.mean(np.logaddexp(0.0, -z)))
    else:
        pred, _ = _mlp_forward(spec, X, w)
        r = pred - y
        base = 0.5 * float(np.mean(r * r))
    return base + 0.5 * spec.ridge * float(w @ w)


def point_loss(spec: ObjectiveSpec, a: np.ndarray, b: float, w: np.ndarray) -> float:
    """Loss of a single sample (a, b) at w, ridge included."""
    if spec.kind == "quadratic":
        base = 0.5 * float(a @ w - b) ** 2
    elif spec.kind == "logistic":
        base = float(np.logaddexp(0.0, -b * (a @ w)))
    else:
        U, v = _unpack_mlp(spec, w, len(a))
        base = 0.5 * float(np.tanh(U @ a) @ v - b) ** 2
    return base + 0.5 * spec.ridge * float(w @ w)


def per_sample_gradients(spec: ObjectiveSpec, ds: ClientDataset, w: np.ndarray) -> np.ndarray:
    """(n, dim) array whose row k is the exact gradient of sample k's loss."""
    X, y = ds.features, ds.targets
    if spec.kind == "quadratic":
        r = X @ w - y
        G = X * r[:, None]
    elif spec.kind == "logistic":
        z = y * (X @ w)
        s = 1.0 / (1.0 + np.exp(z))  # sigmoid(-z)
        G = X * (-y * s)[:, None]
    else:
        U, v = _unpack_mlp(spec, w, X.shape[1])
        t = np.tanh(X @ U.T)
        e = t @ v - y
        dv = e[:, None] * t                              # (n, h)
        gU = (e[:, None] * (v * (1.0 - t * t)))          # (n, h)
        dU = gU[:, :, None] * X[:, None, :]              # (n, h, q)
        G = np.concatenate([dU.reshape(len(y), -1), dv], axis=1)
    return G + spec.ridge * w


def gradient(spec: ObjectiveSpec, ds: ClientDataset, w: np.ndarray) -> np.ndarray:
    """Exact gradient of `loss`; equals the mean of per-sample gradients."""
    X, y = ds.features, ds.targets
    n = len(y)
    if spec.kind == "quadratic":
        r = X @ w - y
        g = (X * r[:, None]).mean(axis=0)
    elif spec.kind == "logistic":
        z = y * (X @ w)
        s = 1.0 / (1.0 + np.exp(z))
        g = (X * (-y * s)[:, None]).mean(axis=0)
    else:
        U, v = _unpack_mlp(spec, w, X.shape[1])
        t = np.tanh(X @ U.T)
        e = t @ v - y
        dv = (e[:, None] * t).mean(axis=0)
        gU = e[:, None] * (v * (1.0 - t * t))
        dU = (gU[:, :, None] * X[:, None, :]).mean(axis=0)
        g = np.concatenate([dU.ravel(), dv])
    return g + spec.ridge * w


def stochastic_gradient(spec: ObjectiveSpec, ds: ClientDataset, w: np.ndarray, sample_index: int) -> np.ndarray:
    """Single-sample gradient plus ridge; unbiased for `gradient` under a uniform index."""
    n = ds.n
    if not 0 <= sample_index < n:
        raise ConfigError(f"sample index {sample_index} out of range [0, {n})")
    a = ds.features[sample_index]
    b = ds.targets[sample_index]
    if spec.kind == "quadratic":
        g = a * (a @ w - b)
    elif spec.kind == "logistic":
        z = b * (a @ w)
        g = -b / (1.0 + np.exp(z)) * a
    else:
        U, v = _unpack_mlp(spec, w, len(a))
        t = np.tanh(U @ a)
        e = t @ v - b
        dv = e * t
        dU = np.outer(e * (v * (1.0 - t * t)), a)
        g = np.concatenate([dU.ravel(), dv])
    return g + spec.ridge * w


def loss_batch(spec: ObjectiveSpec, ds: ClientDataset, W: np.ndarray) -> np.ndarray:
    """Losses at every row of W, shape (S,). Vectorized over evaluation points."""
    X, y = ds.features, ds.targets
    if spec.kind == "quadratic":
        r = W @ X.T - y  # (S, n)
        base = 0.5 * np.mean(r * r, axis=1)
    elif spec.kind == "logistic":
        z = y * (W @ X.T)
        base = np.mean(np.logaddexp(0.0, -z), axis=1)
    else:
        base = np.array([loss(spec, ds, w) - 0.5 * spec.ridge * float(w @ w) for w in W])
    return base + 0.5 * spec.ridge * np.einsum("sd,sd->s", W, W)


def grad_batch(spec: ObjectiveSpec, ds: ClientDataset, W: np.ndarray) -> np.ndarray:
    """Gradients at every row of W, shape (S, dim)."""
    X, y = ds.features, ds.targets
    n = len(y)
    if spec.kind == "quadratic":
        r = W @ X.T - y
        G = r @ X / n
    elif spec.kind == "logistic":
        z = y * (W @ X.T)
        s = 1.0 / (1.0 + np.exp(z))
        G = (-s * y) @ X / n
    else:
        G = np.stack([gradient(spec, ds, w) - spec.ridge * w for w in W])
    return G + spec.ridge * W


# --- problem constants --------------------------------------------------------

@dataclass
class ConstantsReport:
    """Estimated smoothness/convexity/variance constants for one setup.

    mu_p and L_p are the masked-objective analogues (1/N) sum p_i mu and
    (1/N) sum p_i L; mu_tilde and L_tilde are min_i p_i mu and max_i p_i L.
    The two play different roles in step-size presets, so both are kept.
    """

    L: float
    mu: float
    G: float
    W: float
    delta: float
    mu_p: float
    L_p: float
    mu_tilde: float
    L_tilde: float
    trials: int
    low_confidence: bool = False

    @property
    def kappa(self) -> float:
        return self.L / self.mu if self.mu > 0 else float("inf")

    def to_text(self) -> str:
        rows = [
            ("L", self.L), ("mu", self.mu), ("G", self.G), ("W", self.W),
            ("delta", self.delta), ("kappa", self.kappa),
            ("mu_p", self.mu_p), ("L_p", self.L_p),
            ("mu_tilde", self.mu_tilde), ("L_tilde", self.L_tilde),
        ]
        lines = [f"{k} = {v:.17g}" for k, v in rows]
        lines.append(f"trials = {self.trials}")
        lines.append(f"low_confidence = {int(self.low_confidence)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ConstantsReport":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
        return cls(
            L=float(kv["L"]), mu=float(kv["mu"]), G=float(kv["G"]), W=float(kv["W"]),
            delta=float(kv["delta"]), mu_p=float(kv["mu_p"]), L_p=float(kv["L_p"]),
            mu_tilde=float(kv["mu_tilde"]), L_tilde=float(kv["L_tilde"]),
            trials=int(kv["trials"]), low_confidence=bool(int(kv["low_confidence"])),
        )


def _hessian(spec: ObjectiveSpec, ds: ClientDataset, w: np.ndarray) -> np.ndarray:
    X, y = ds.features, ds.targets
    n, d = X.shape
    if spec.kind == "quadratic":
        H = X.T @ X / n
    elif spec.kind == "logistic":
        z = y * (X @ w)
        s = 1.0 / (1.0 + np.exp(-z))
        H = (X * (s * (1 - s))[:, None]).T @ X / n
    else:
        raise ConfigError("no closed Hessian for mlp")
    return H + spec.ridge * np.eye(d)


def quadratic_moments(spec: ObjectiveSpec, ds: ClientDataset) -> tuple[np.ndarray, np.ndarray, float]:
    """(A, c, const) with f(w) = 0.5 w'Aw - c'w + const for the quadratic kind."""
    if spec.kind != "quadratic":
        raise ConfigError("quadratic moments require the quadratic kind")
    X, y = ds.features, ds.targets
    n = len(y)
    A = X.T @ X / n + spec.ridge * np.eye(X.shape[1])
    c = X.T @ y / n
    return A, c, 0.5 * float(y @ y) / n


def ball_points(rng: np.random.Generator, d: int, radius: float, count: int) -> np.ndarray:
    """Points inside the ball, alternating interior-uniform and boundary draws."""
    pts = np.empty((count, d))
    for t in range(count):
        x = rng.normal(size=d)
        x /= np.linalg.norm(x)
        scale = radius if t % 2 == 0 else radius * rng.random() ** (1.0 / d)
        pts[t] = x * scale
    return pts


def estimate_constants(
    spec: ObjectiveSpec,
    datasets: list[ClientDataset],
    ball: DomainBall,
    p: np.ndarray,
    trials: int,
    seed: int,
) -> ConstantsReport:
    """Measure L, mu, G, delta for the given clients over the ball.

    Quadratic L and mu come from exact Hessian eigenvalues.  Logistic and
    mlp values are empirical maxima/minima over `trials` sampled points
    (gradient differences for mlp), so they are estimates, flagged
    low-confidence below 100 trials.  delta follows the bounded-variance
    form: the max over sampled (point, mask, client) triples of the
    per-client variance of masked single-sample gradients.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    N = len(datasets)
    p = np.asarray(p, dtype=np.float64)
    if len(p) != N:
        raise ConfigError(f"p has {len(p)} entries for {N} clients")
    dm = spec.param_dim(datasets[0].dim)
    rng = substream(seed, CONST_NS)
    probes = ball_points(rng, dm, ball.radius, trials)

    if spec.kind == "quadratic":
        eigs = [np.linalg.eigvalsh(_hessian(spec, ds, probes[0])) for ds in datasets]
        L = max(float(e[-1]) for e in eigs)
        mu = min(float(e[0]) for e in eigs)
    elif spec.kind == "logistic":
        L, mu = 0.0, float("inf")
        for w in probes:
            for ds in datasets:
                e = np.linalg.eigvalsh(_hessian(spec, ds, w))
                L = max(L, float(e[-1]))
                mu = min(mu, float(e[0]))
    else:
        L, mu = 0.0, float("inf")
        for t in range(trials):
            w1 = probes[t]
            w2 = probes[(t + 1) % trials]
            dw = w1 - w2
            nrm2 = float(dw @ dw)
            if nrm2 == 0.0:
                continue
            for ds in datasets:
                dg = gradient(spec, ds, w1) - gradient(spec, ds, w2)
                L = max(L, float(np.linalg.norm(dg)) / np.sqrt(nrm2))
                mu = min(mu, float(dg @ dw) / nrm2)

    G = 0.0
    for w in probes:
        for ds in datasets:
            G = max(G, float(np.linalg.norm(gradient(spec, ds, w))))

    delta_sq = 0.0
    for t in range(trials):
        w = probes[t]
        i = t % N
        ds = datasets[i]
        m = (rng.random(dm) < p[i]).astype(np.float64)
        u = m * w
        Gs = per_sample_gradients(spec, ds, u) * m
        delta_sq = max(delta_sq, float(np.mean(np.sum((Gs - Gs.mean(axis=0)) ** 2, axis=1))))

    return ConstantsReport(
        L=L, mu=mu, G=G, W=ball.radius, delta=float(np.sqrt(delta_sq)),
        mu_p=float(np.mean(p) * mu), L_p=float(np.mean(p) * L),
        mu_tilde=float(np.min(p) * mu), L_tilde=float(np.max(p) * L),
        trials=trials, low_confidence=trials < 100,
    )


# --- binary serialization -----------------------------------------------------

def save_datasets(path, datasets: list[ClientDataset]) -> None:
    """Flat binary layout: header (magic, version, N, n, d, kind) then, per
    client, generator parameters followed by features and targets as
    little-endian float64."""
    N = len(datasets)
    if N == 0:
        raise ConfigError("nothing to save")
    n, d = datasets[0].features.shape
    kind = datasets[0].generator.kind
    header = _DATA_MAGIC + struct.pack("<IIIII", 1, N, n, d, _KIND_CODE[kind])
    chunks = [header]
    for ds in datasets:
        if ds.features.shape != (n, d):
            raise ConfigError("all clients must share (n, d) for serialization")
        g = ds.generator
        block = np.concatenate([
            g.mean_shift, g.w_gen, g.scales(), [g.label_bias, g.noise_std],
            ds.features.ravel(), ds.targets,
        ]).astype("<f8")
        chunks.append(block.tobytes())
    with open(path, "wb") as fh:
        for c in chunks:
            fh.write(c)


def load_datasets(path) -> list[ClientDataset]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _DATA_MAGIC:
        raise ConfigError(f"{path}: not a dataset file (bad magic)")
    version, N, n, d, kind_code = struct.unpack("<IIIII", raw[4:24])
    if version != 1:
        raise ConfigError(f"{path}: unsupported dataset version {version}")
    kind = KINDS[kind_code]
    per = 3 * d + 2 + n * d + n
    body = np.frombuffer(raw[24:], dtype="<f8")
    if len(body) != N * per:
        raise ConfigError(f"{path}: truncated dataset body")
    out = []
    for i in range(N):
        blk = body[i * per : (i + 1) * per]
        gen = ClientGenerator(
            kind=kind,
            mean_shift=blk[:d].copy(),
            w_gen=blk[d : 2 * d].copy(),
            feature_scales=blk[2 * d : 3 * d].copy(),
            label_bias=float(blk[3 * d]),
            noise_std=float(blk[3 * d + 1]),
        )
        x = blk[3 * d + 2 : 3 * d + 2 + n * d].reshape(n, d).copy()
        y = blk[3 * d + 2 + n * d :].copy()
        out.append(ClientDataset(client_id=i, features=x, targets=y, generator=gen))
    return out
