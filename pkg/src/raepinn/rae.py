"""Residual-based pointwise weights for the interior loss.

Pipeline per update: normalised raw weights from |R|, a k-nearest-neighbour
mean over the (frozen) interior cloud, then an exponential moving average.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .network import NonFiniteError


@dataclass(frozen=True)
class NeighborIndex:
    neighbors: np.ndarray   # (N, k) int, row i includes i itself
    k: int
    lo: np.ndarray          # per-axis normalisation used for distances
    span: np.ndarray


def normalise_coords(points):
    points = np.asarray(points, dtype=np.float64)
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return (points - lo) / span, lo, span


def build_neighbor_index(points, k):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k_int={k} must lie in 1..N_int={n}")
    xn, lo, span = normalise_coords(points)
    _, idx = cKDTree(xn).query(xn, k=k)
    idx = np.asarray(idx, dtype=np.int64).reshape(n, k)
    # ties at equal distance can push self out of row i; put it back in front
    rows = np.arange(n)
    missing = ~(idx == rows[:, None]).any(axis=1)
    if missing.any():
        idx[missing, 1:] = idx[missing, :-1]
        idx[missing, 0] = rows[missing]
    return NeighborIndex(idx, k, lo, span)


def raw_weights(abs_residuals):
    r = np.abs(np.asarray(abs_residuals, dtype=np.float64))
    bad = np.flatnonzero(~np.isfinite(r))
    if bad.size:
        raise NonFiniteError(f"non-finite residual at interior point {bad[0]}", int(bad[0]))
    total = r.sum()
    if total == 0.0:
        return np.ones_like(r)
    return (r / total) * len(r)  # divide first: n / total overflows for subnormal sums


def knn_average(w_raw, index):
    w_raw = np.asarray(w_raw, dtype=np.float64)
    if index.neighbors.shape[0] != w_raw.shape[0]:
        raise ValueError("neighbour index was built over a different point set")
    return w_raw[index.neighbors].mean(axis=1)


@dataclass
class WeightState:
    lam: np.ndarray
    beta: float = 0.1
    k_int: int = 50
    iteration: int = 0
    w_raw: np.ndarray = field(default=None, repr=False)
    lambda_knear: np.ndarray = field(default=None, repr=False)

    @classmethod
    def initial(cls, n, beta=0.1, k_int=50):
        if not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        return cls(np.ones(n), beta, k_int)


def ema_update(state, lambda_knear):
    """``lambda <- beta * lambda_knear + (1 - beta) * lambda``."""
    b = state.beta
    lam = b * np.asarray(lambda_knear, dtype=np.float64) + (1.0 - b) * state.lam
    return WeightState(lam, b, state.k_int, state.iteration + 1, state.w_raw, lambda_knear)


def rae_update(state, residuals, index):
    w = raw_weights(residuals)
    knear = knn_average(w, index)
    new = ema_update(state, knear)
    new.w_raw = w
    return new
