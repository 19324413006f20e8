"""Mask construction and the seeded randomness streams that drive runs.

Every source of randomness in a run is a separate numpy Generator derived
from the master seed and a small integer path, so that two runs sharing a
master seed consume exactly the same mask bits, permutations, and sample
indices regardless of what else they do.  Stream paths in use:

    (MASK_NS, global_round, client)   Bernoulli masks, one stream per client
    (DATA_NS, global_round, client)   local minibatch sample indices
    (PERM_NS, epoch)                  per-epoch sub-model shuffles
    (OUTPUT_NS, client)               masks for the final output step
    (CONST_NS, trial)                 constant-estimation probes

Rolling runs address rounds by the global counter epoch*R + r, so a rolling
run with one round per epoch consumes the same data streams as a random-mask
run with the same number of total rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError

MASK_NS = 0
DATA_NS = 1
PERM_NS = 2
OUTPUT_NS = 3
CONST_NS = 4
GEN_NS = 5


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for (master_seed, path)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=tuple(path))))


def derive_seed(master_seed: int, *path: int) -> int:
    """Stable 63-bit integer seed for (master_seed, path)."""
    words = np.random.SeedSequence(master_seed, spawn_key=tuple(path)).generate_state(2, np.uint32)
    return int((int(words[0]) << 31) ^ int(words[1]))


@dataclass(frozen=True)
class MaskPlan:
    """Which sub-models clients train.

    mode "random": client i draws a fresh Bernoulli(p[i]) mask every round.
    mode "rolling": client i owns R fixed cyclic windows of s[i] coordinates,
    reassigned to rounds by a per-epoch shuffle.
    mode "full": random with every p[i] = 1.
    """

    mode: str
    p: np.ndarray | None = None
    s: np.ndarray | None = None
    R: int | None = None  # sub-models per client (rolling)

    def __post_init__(self):
        if self.mode not in ("random", "rolling", "full"):
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if self.mode in ("random", "full"):
            if self.p is None:
                raise ConfigError("random mode requires masking probabilities p")
            p = np.asarray(self.p, dtype=np.float64)
            if np.any(p <= 0) or np.any(p > 1):
                raise ConfigError("masking probabilities must lie in (0, 1]")
            if self.mode == "full" and not np.all(p == 1.0):
                raise ConfigError("full mode requires all p_i = 1")
            object.__setattr__(self, "p", p)
        else:
            if self.s is None or self.R is None:
                raise ConfigError("rolling mode requires sub-model sizes s and count R")
            s = np.asarray(self.s, dtype=np.int64)
            if np.any(s < 1):
                raise ConfigError("sub-model sizes must be >= 1")
            if self.R < 1:
                raise ConfigError("rolling mode requires R >= 1")
            object.__setattr__(self, "s", s)

    @property
    def n_clients(self) -> int:
        return len(self.p) if self.mode in ("random", "full") else len(self.s)


def full_plan(n_clients: int) -> MaskPlan:
    return MaskPlan(mode="full", p=np.ones(n_clients))


def sample_bernoulli_masks(p: np.ndarray, d: int, rngs: list[np.random.Generator]) -> list[np.ndarray]:
    """One Bernoulli(p[i]) mask per client, drawn from that client's stream."""
    if np.any(np.asarray(p) <= 0):
        raise ConfigError("masking probability <= 0 makes the masked objective degenerate")
    masks = []
    for p_i, rng in zip(p, rngs):
        masks.append((rng.random(d) < p_i).astype(np.uint8))
    return masks


def build_rolling_masks(d: int, s_i: int, R: int) -> list[np.ndarray]:
    """The R cyclic windows of s_i coordinates owned by one client.

    Window j (1-based) starts at ((j-1) * ceil(d/R)) mod d and wraps, so the
    R windows jointly cover every coordinate whenever R * s_i >= d.
    """
    if not (1 <= s_i <= d):
        raise ConfigError(f"sub-model size {s_i} must lie in [1, {d}]")
    if R < 1:
        raise ConfigError("R must be >= 1")
    stride = -(-d // R)  # ceil
    masks = []
    for j in range(R):
        start = (j * stride) % d
        m = np.zeros(d, dtype=np.uint8)
        idx = (start + np.arange(s_i)) % d
        m[idx] = 1
        masks.append(m)
    return masks


@dataclass(frozen=True)
class Permutation:
    """Bijection on {1, ..., R}; sigma[r] is the 1-based sub-model id of round r+1."""

    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.int64)
        if sorted(s.tolist()) != list(range(1, len(s) + 1)):
            raise ConfigError("permutation values must be exactly 1..R")
        object.__setattr__(self, "sigma", s)

    def __len__(self) -> int:
        return len(self.sigma)

    def __call__(self, r: int) -> int:
        """Sub-model id assigned to 1-based round r."""
        return int(self.sigma[r - 1])


def shuffle_permutation(R: int, rng: np.random.Generator) -> Permutation:
    """Uniform permutation of {1..R} via Fisher-Yates on the stream."""
    if R < 1:
        raise ConfigError("R must be >= 1")
    sigma = np.arange(1, R + 1, dtype=np.int64)
    for i in range(R - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        sigma[i], sigma[j] = sigma[j], sigma[i]
    return Permutation(sigma)
