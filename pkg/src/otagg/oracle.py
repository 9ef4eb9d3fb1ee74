"""Exact references the approximate pipeline is validated against.

Two regimes admit closed-form or exact answers: one-dimensional measures
(quantile coupling) and small uniform equal-size instances (assignment).
Both are implemented independently of the scaling solver so agreement is
evidence, not tautology. Statistics pooling lives here as the baseline
aggregator the transport variants are compared to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core_ot import CostMatrix, _as_float_array

__all__ = [
    "SampleSet1D",
    "exact_w2_1d",
    "exact_assignment",
    "stats_pool",
]

ASSIGNMENT_MAX_SIZE = 16
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class SampleSet1D:
    """Unordered 1D observations."""

    values: np.ndarray

    def __post_init__(self):
        values = _as_float_array(self.values, "values", 1)
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _as_sample_set(x) -> SampleSet1D:
    if isinstance(x, SampleSet1D):
        return x
    return SampleSet1D(np.asarray(x, dtype=np.float64))


def exact_w2_1d(x, y) -> float:
    """Squared 2-Wasserstein distance between two empirical 1D measures.

    Both sets carry uniform mass. Equal sizes couple order statistics
    directly; unequal sizes integrate the squared quantile difference over
    the union of both quantile grids, which is exact because the empirical
    quantile functions are piecewise constant.
    """
    xs = np.sort(_as_sample_set(x).values)
    ys = np.sort(_as_sample_set(y).values)
    nx = xs.shape[0]
    ny = ys.shape[0]
    if nx == ny:
        d = xs - ys
        return float(np.mean(d * d))
    edges = np.union1d(np.arange(1, nx) / nx, np.arange(1, ny) / ny)
    qs = np.concatenate(([0.0], edges, [1.0]))
    widths = np.diff(qs)
    mids = (qs[:-1] + qs[1:]) / 2.0
    ix = np.minimum((mids * nx).astype(np.int64), nx - 1)
    iy = np.minimum((mids * ny).astype(np.int64), ny - 1)
    d = xs[ix] - ys[iy]
    return float(np.sum(widths * d * d))


def exact_assignment(cost: CostMatrix) -> tuple:
    """Minimum-cost perfect matching as a 1/N-mass coupling.

    Returns (plan, value): the plan is the permutation matrix scaled by 1/N,
    the value its transport cost. Exact optimum of the uniform equal-size
    transport problem, so any feasible plan's cost is a valid upper bound
    to compare against.
    """
    entries = cost.entries
    n, m = entries.shape
    if n != m:
        raise ValueError(f"assignment needs a square cost, got {n}x{m}")
    if n > ASSIGNMENT_MAX_SIZE:
        raise ValueError(
            f"assignment limited to N <= {ASSIGNMENT_MAX_SIZE}, got N = {n}"
        )
    rows, cols = linear_sum_assignment(entries)
    plan = np.zeros((n, n))
    plan[rows, cols] = 1.0 / n
    value = float(entries[rows, cols].sum() / n)
    return plan, value


def stats_pool(features, weights=None) -> np.ndarray:
    """Concatenated (weighted) mean and standard deviation per coordinate.

    Variance is the weighted population form sum_i w_i (x_i - m)^2; a
    coordinate whose variance is at or below 1e-12 reports a std of
    exactly 0 rather than sqrt of noise.
    """
    features = _as_float_array(features, "features", 2)
    n = features.shape[1]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = _as_float_array(weights, "weights", 1)
        if w.shape[0] != n:
            raise ValueError(f"got {n} columns but {w.shape[0]} weights")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1 (got {total!r})")
    mean = features @ w
    dev = features - mean.reshape(-1, 1)
    var = (dev * dev) @ w
    std = np.where(var > VARIANCE_FLOOR, np.sqrt(var), 0.0)
    return np.concatenate((mean, std))
