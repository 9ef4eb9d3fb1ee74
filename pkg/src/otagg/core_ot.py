"""Entropic optimal transport between discrete measures.

Measures are point sets with nonnegative intensities summing to one. The
solver is alternating diagonal scaling of the Gibbs kernel exp(-C/eps):
cheap, differentiable, and exact enough for matching tasks when eps is
small. A log-domain variant sits behind ``SinkhornConfig.log_domain`` for
regimes where the kernel entries themselves underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "DiscreteMeasure",
    "CostMatrix",
    "TransportPlan",
    "SinkhornConfig",
    "SinkhornUnderflowError",
    "cost_matrix",
    "sinkhorn",
    "transport_cost",
    "entropic_cost",
]

INTENSITY_SUM_TOL = 1e-9


class SinkhornUnderflowError(FloatingPointError):
    """A scaling denominator fell below the configured floor.

    Raised instead of clamping: a clamped denominator silently corrupts the
    plan and everything differentiated through it. Usually means epsilon is
    too small for the cost scale; the log-domain variant handles that regime.
    """

    def __init__(self, iteration: int, floor: float):
        self.iteration = iteration
        self.floor = floor
        super().__init__(
            f"scaling denominator fell below {floor:g} at iteration {iteration}; "
            f"epsilon is too small for this cost scale (consider log_domain=True)"
        )


def _as_float_array(x, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    return arr


def _check_intensities(w: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(w < 0):
        raise ValueError(f"{name} contains negative entries")
    total = float(w.sum())
    if abs(total - 1.0) > INTENSITY_SUM_TOL:
        raise ValueError(f"{name} must sum to 1 (got {total!r})")


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point set: ``points`` is d x N, one column per point."""

    points: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        points = _as_float_array(self.points, "points", 2)
        intensities = _as_float_array(self.intensities, "intensities", 1)
        if not np.all(np.isfinite(points)):
            raise ValueError("points contains non-finite entries")
        if intensities.shape[0] != points.shape[1]:
            raise ValueError(
                f"got {points.shape[1]} points but {intensities.shape[0]} intensities"
            )
        _check_intensities(intensities, "intensities")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "intensities", intensities)

    @property
    def dim(self) -> int:
        return self.points.shape[0]

    @property
    def size(self) -> int:
        return self.points.shape[1]

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        """Measure with equal intensity on every point."""
        pts = _as_float_array(points, "points", 2)
        n = pts.shape[1]
        return cls(pts, np.full(n, 1.0 / n))


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise squared distances, one row per source point."""

    entries: np.ndarray

    def __post_init__(self):
        entries = _as_float_array(self.entries, "entries", 2)
        if not np.all(np.isfinite(entries)):
            raise ValueError("cost entries must be finite")
        if np.any(entries < 0):
            raise ValueError("cost entries must be nonnegative")
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self) -> tuple:
        return self.entries.shape


@dataclass(frozen=True)
class TransportPlan:
    """Coupling matrix plus how it was obtained.

    ``marginal_residual`` is the max-norm mismatch between the plan's
    marginals and the requested intensities at the final iteration;
    ``converged`` records whether it fell below the configured tolerance.
    """

    entries: np.ndarray
    converged: bool
    iterations_used: int
    marginal_residual: float

    def __post_init__(self):
        entries = _as_float_array(self.entries, "entries", 2)
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self) -> tuple:
        return self.entries.shape


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver knobs.

    ``log_domain`` selects the logsumexp formulation; it computes the same
    fixed point but tolerates exp(-C/epsilon) underflowing, at roughly twice
    the cost per iteration. Needed in practice once epsilon drops below ~0.1
    of the cost scale.
    """

    epsilon: float = 1.0
    max_iterations: int = 20
    convergence_tolerance: float = 1e-6
    underflow_floor: float = 1e-300
    log_domain: bool = False

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be at least 1, got {self.max_iterations!r}")
        if not (self.convergence_tolerance > 0):
            raise ValueError(
                f"convergence_tolerance must be positive, got {self.convergence_tolerance!r}"
            )
        if self.underflow_floor < 0:
            raise ValueError(f"underflow_floor must be nonnegative, got {self.underflow_floor!r}")


def cost_matrix(source: DiscreteMeasure, reference: DiscreteMeasure) -> CostMatrix:
    """Squared Euclidean distances between every source/reference pair."""
    if source.dim != reference.dim:
        raise ValueError(
            f"dimension mismatch: source has d={source.dim}, reference has d={reference.dim}"
        )
    X = np.ascontiguousarray(source.points.T)
    Z = np.ascontiguousarray(reference.points.T)
    return CostMatrix(kernels.squared_distances(X, Z))


def sinkhorn(cost: CostMatrix, a, b, config: SinkhornConfig) -> TransportPlan:
    """Entropic transport plan between intensity vectors a and b.

    Alternating updates v <- b/(K^T u), u <- a/(K v) on K = exp(-C/epsilon),
    from uniform initializers, stopping at ``max_iterations`` or when the
    max-norm marginal residual of diag(u) K diag(v) drops below
    ``convergence_tolerance``.
    """
    a = _as_float_array(a, "a", 1)
    b = _as_float_array(b, "b", 1)
    n, m = cost.entries.shape
    if a.shape[0] != n:
        raise ValueError(f"a has length {a.shape[0]}, cost has {n} rows")
    if b.shape[0] != m:
        raise ValueError(f"b has length {b.shape[0]}, cost has {m} columns")
    _check_intensities(a, "a")
    _check_intensities(b, "b")

    if config.log_domain:
        M = -cost.entries / config.epsilon
        with np.errstate(divide="ignore"):
            loga = np.log(a)
            logb = np.log(b)
        f, g, iterations, residual = kernels.sinkhorn_log(
            M, a, b, loga, logb, config.max_iterations, config.convergence_tolerance
        )
        entries = kernels.plan_from_log(M, f, g)
    else:
        K = np.exp(-cost.entries / config.epsilon)
        u, v, iterations, residual, bad_iteration = kernels.sinkhorn_scale(
            K, a, b, config.max_iterations, config.convergence_tolerance,
            config.underflow_floor,
        )
        if bad_iteration >= 0:
            raise SinkhornUnderflowError(int(bad_iteration), config.underflow_floor)
        entries = kernels.plan_from_uv(K, u, v)

    residual = float(residual)
    return TransportPlan(
        entries=entries,
        converged=residual < config.convergence_tolerance,
        iterations_used=int(iterations),
        marginal_residual=residual,
    )


def transport_cost(plan: TransportPlan, cost: CostMatrix) -> float:
    """Objective value sum_ij P_ij C_ij of a plan against a cost matrix."""
    if plan.entries.shape != cost.entries.shape:
        raise ValueError(
            f"shape mismatch: plan {plan.entries.shape} vs cost {cost.entries.shape}"
        )
    return float(np.sum(plan.entries * cost.entries))


def entropic_cost(plan: TransportPlan, cost: CostMatrix, epsilon: float) -> float:
    """Transport cost minus epsilon times plan entropy.

    Zero entries contribute nothing to the entropy (x log x -> 0). This is
    the quantity the scaling iteration actually minimizes over couplings.
    """
    if not (epsilon > 0):
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    if plan.entries.shape != cost.entries.shape:
        raise ValueError(
            f"shape mismatch: plan {plan.entries.shape} vs cost {cost.entries.shape}"
        )
    P = plan.entries
    if np.any(P < 0):
        raise ValueError("plan entries must be nonnegative")
    positive = P[P > 0]
    entropy = -float(np.sum(positive * np.log(positive)))
    return transport_cost(plan, cost) - epsilon * entropy
