"""Vector primitives shared by every training and analysis path.

Model parameters are plain float64 numpy arrays of shape (d,).  Masks are
dense uint8 arrays of the same shape holding 0/1.  All functions here are
pure; none mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Invalid sizes, dimensions, or modes. Fatal for the run."""


class NumericError(RuntimeError):
    """Non-finite values encountered where the run cannot continue."""


def as_param_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate and return a float64 parameter vector.

    Rejects non-finite entries and, if `dim` is given, wrong lengths.
    """
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1:
        raise ConfigError(f"parameter vector must be 1-d, got shape {w.shape}")
    if dim is not None and w.shape[0] != dim:
        raise ConfigError(f"parameter vector has dim {w.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(w)):
        raise NumericError("parameter vector contains NaN or Inf")
    return w


def as_mask(bits, dim: int | None = None) -> np.ndarray:
    """Validate and return a uint8 0/1 mask vector."""
    m = np.asarray(bits)
    if m.ndim != 1:
        raise ConfigError(f"mask must be 1-d, got shape {m.shape}")
    if dim is not None and m.shape[0] != dim:
        raise ConfigError(f"mask has dim {m.shape[0]}, expected {dim}")
    m = m.astype(np.uint8, copy=False)
    if not np.all((m == 0) | (m == 1)):
        raise ConfigError("mask entries must be 0 or 1")
    return m


@dataclass(frozen=True)
class DomainBall:
    """Closed L2 ball of the given radius, the feasible domain for all runs."""

    radius: float

    def __post_init__(self):
        if not (self.radius > 0 and np.isfinite(self.radius)):
            raise ConfigError(f"ball radius must be positive and finite, got {self.radius}")


def apply_mask(m: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Elementwise product mask * vector."""
    if m.shape != w.shape:
        raise ConfigError(f"mask dim {m.shape} does not match vector dim {w.shape}")
    return m * w


def project_l2(w: np.ndarray, ball: DomainBall) -> np.ndarray:
    """Project onto the closed L2 ball; returns w unchanged when inside."""
    nrm = float(np.linalg.norm(w))
    if nrm <= ball.radius:
        return w
    if np.isfinite(nrm):
        return w * (ball.radius / nrm)
    # the squared norm overflowed: rescale by the largest coordinate first;
    # genuinely non-finite entries propagate NaN for the caller to detect
    top = float(np.max(np.abs(w)))
    scaled = w / top
    return scaled * (ball.radius / float(np.linalg.norm(scaled)))


def server_average(
    locals_: list[np.ndarray],
    masks: list[np.ndarray],
    w_prev: np.ndarray,
    ball: DomainBall,
) -> np.ndarray:
    """Fill-and-average aggregation.

    Coordinates a client did not train are filled from the previous global
    model, then all client models are averaged and projected onto the ball.
    The sum runs over clients in ascending index order with a single
    accumulator, which pins the float reduction order and makes the result
    bitwise reproducible.
    """
    n_clients = len(locals_)
    if n_clients == 0:
        raise ConfigError("server_average requires at least one client")
    if len(masks) != n_clients:
        raise ConfigError(f"{n_clients} local models but {len(masks)} masks")
    acc = np.zeros_like(w_prev)
    for w_i, m_i in zip(locals_, masks):
        if w_i.shape != w_prev.shape or m_i.shape != w_prev.shape:
            raise ConfigError("client model or mask dim does not match the global model")
        acc += w_i + (1 - m_i) * w_prev
    return project_l2(acc / n_clients, ball)
