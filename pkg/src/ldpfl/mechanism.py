"""Two-point LDP perturbation of bounded real weights.

Every weight ``w`` in ``[c - r, c + r]`` is replaced by one of two extreme
values, ``c + r*k`` or ``c - r*k`` with ``k = (e^eps + 1) / (e^eps - 1)``,
with probabilities chosen so the report is an unbiased estimate of ``w``.
Closed-form variance and concentration calculators for the cloud-side mean
live here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

EPSILON_MIN = 1e-3

# expm1 overflows a double past ~709.78; k is exactly 1.0 in float well before that.
_EPS_SATURATE = 700.0


class BudgetTooSmallError(ValueError):
    """Privacy budget below the configured floor (coefficient would diverge)."""


class RangeViolationError(ValueError):
    """A weight was handed to the mechanism outside its declared range."""


class EmptyAggregateError(ValueError):
    pass


@dataclass(frozen=True)
class Range:
    """Closed interval ``[center - radius, center + radius]`` for one layer."""

    center: float
    radius: float

    def __post_init__(self):
        if not (math.isfinite(self.center) and math.isfinite(self.radius)):
            raise ValueError(f"range must be finite, got ({self.center}, {self.radius})")
        if self.radius <= 0:
            raise ValueError(f"range radius must be > 0, got {self.radius}")

    @property
    def lower(self) -> float:
        return self.center - self.radius

    @property
    def upper(self) -> float:
        return self.center + self.radius

    def contains(self, w):
        w = np.asarray(w, dtype=float)
        inside = (w >= self.lower) & (w <= self.upper)
        return bool(inside) if inside.ndim == 0 else inside


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    floor: float = EPSILON_MIN

    def __post_init__(self):
        if not math.isfinite(self.epsilon):
            raise BudgetTooSmallError(f"epsilon must be finite, got {self.epsilon}")
        if self.epsilon < self.floor:
            raise BudgetTooSmallError(
                f"epsilon={self.epsilon} is below the floor {self.floor}"
            )


BudgetLike = Union[PrivacyBudget, float]


def as_budget(budget: BudgetLike) -> PrivacyBudget:
    if isinstance(budget, PrivacyBudget):
        return budget
    return PrivacyBudget(float(budget))


def _coefficient(eps: float) -> float:
    if eps >= _EPS_SATURATE:
        return 1.0
    return 1.0 + 2.0 / math.expm1(eps)


class TwoPointMechanism:
    """The perturbation rule, factored so alternative (e.g. corrupted) rules
    can be substituted in verification runs.

    Probabilities are evaluated as
    ``((1 + s) + (1 - s) e^-eps) / (2 (1 + e^-eps))`` with ``s = (w - c) / r``,
    which is algebraically the textbook expression but free of cancellation
    at the range endpoints and of overflow for large ``eps``.
    """

    name = "two-point"

    def coefficient(self, budget: BudgetLike) -> float:
        return _coefficient(as_budget(budget).epsilon)

    def probabilities(self, w, center, radius, budget: BudgetLike):
        """Return ``(p_high, p_low)`` arrays broadcast over the inputs."""
        eps = as_budget(budget).epsilon
        s = np.clip((np.asarray(w, dtype=float) - center) / radius, -1.0, 1.0)
        q = math.exp(-eps)
        denom = 2.0 * (1.0 + q)
        p_high = ((1.0 + s) + (1.0 - s) * q) / denom
        p_low = ((1.0 - s) + (1.0 + s) * q) / denom
        return p_high, p_low

    def outputs(self, center, radius, budget: BudgetLike):
        k = self.coefficient(budget)
        return center + radius * k, center - radius * k

    def sample(self, w, center, radius, budget: BudgetLike, rng: np.random.Generator):
        """Perturb an array of in-range weights; one uniform draw per weight."""
        w = np.asarray(w, dtype=float)
        center = np.asarray(center, dtype=float)
        radius = np.asarray(radius, dtype=float)
        outside = (w < center - radius) | (w > center + radius)
        if np.any(outside):
            idx = np.flatnonzero(outside)
            raise RangeViolationError(
                f"{idx.size} weight(s) outside the declared range (first at flat index {idx[0]}); "
                "clip before perturbing"
            )
        p_high, _ = self.probabilities(w, center, radius, budget)
        high, low = self.outputs(center, radius, budget)
        u = rng.random(np.shape(p_high))
        return np.where(u < p_high, high, low)


DEFAULT_MECHANISM = TwoPointMechanism()


def coefficient(budget: BudgetLike) -> float:
    """``(e^eps + 1) / (e^eps - 1)``, computed as ``1 + 2 / expm1(eps)``."""
    return DEFAULT_MECHANISM.coefficient(budget)


def clip(w, rng_range: Range):
    out = np.minimum(np.maximum(w, rng_range.lower), rng_range.upper)
    return float(out) if np.ndim(out) == 0 else out


def perturb(w: float, rng_range: Range, budget: BudgetLike, rng: np.random.Generator) -> float:
    """Perturb a single weight. Raises RangeViolationError if ``w`` is outside the range."""
    return float(
        DEFAULT_MECHANISM.sample(w, rng_range.center, rng_range.radius, budget, rng)
    )


def perturb_array(w, center, radius, budget: BudgetLike, rng: np.random.Generator) -> np.ndarray:
    return DEFAULT_MECHANISM.sample(w, center, radius, budget, rng)


def high_probability(w, rng_range: Range, budget: BudgetLike):
    p_high, _ = DEFAULT_MECHANISM.probabilities(w, rng_range.center, rng_range.radius, budget)
    return float(p_high) if np.ndim(p_high) == 0 else p_high


def estimate_mean(values: Sequence[float]) -> float:
    """Cloud estimator of the true average weight.

    Uses exactly-rounded summation so the result does not depend on the
    order in which reports arrived.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise EmptyAggregateError("cannot estimate the mean of an empty aggregate")
    return math.fsum(values) / values.size


def _check_in_range(w, rng_range: Range):
    if not np.all(rng_range.contains(w)):
        raise RangeViolationError(
            f"w={w} outside [{rng_range.lower}, {rng_range.upper}]"
        )


def mechanism_variance(w, rng_range: Range, budget: BudgetLike):
    """Exact variance ``r^2 k^2 - (w - c)^2`` of one perturbed report."""
    _check_in_range(w, rng_range)
    k = coefficient(budget)
    r = rng_range.radius
    out = (r * k) ** 2 - (np.asarray(w, dtype=float) - rng_range.center) ** 2
    return float(out) if np.ndim(out) == 0 else out


def mechanism_variance_bound(rng_range: Range, budget: BudgetLike) -> float:
    return (rng_range.radius * coefficient(budget)) ** 2


def mean_variance_bounds(radii, budget: BudgetLike, n: int | None = None) -> tuple[float, float]:
    """Bounds on the variance of the mean of ``n`` independent reports.

    Client ``u`` perturbs with radius ``radii[u]``. Returns ``(lower, upper)``
    with ``upper = k^2 * sum(r_u^2) / n^2`` and ``lower = upper - sum(r_u^2) / n^2``.
    """
    radii = np.asarray(radii, dtype=float).ravel()
    if radii.size == 0:
        raise EmptyAggregateError("radii must be non-empty")
    if n is None:
        n = radii.size
    if n != radii.size:
        raise ValueError(f"n={n} does not match {radii.size} radii")
    if np.any(radii <= 0):
        raise ValueError("all radii must be > 0")
    k = coefficient(budget)
    s = math.fsum(radii**2) / n**2
    upper = k * k * s
    return upper - s, upper


def concentration_radius(range_radius: float, budget: BudgetLike, n: int, beta: float) -> float:
    """Smallest ``lam`` with Bernstein tail bound
    ``2 exp(-n lam^2 / (2 r^2 k^2 + 4 lam r e^eps / (3 (e^eps - 1)))) <= beta``.

    Solved in closed form as a quadratic in ``lam``. ``beta == 1`` returns 0
    (any deviation probability is at most 1).
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if range_radius <= 0:
        raise ValueError("range_radius must be > 0")
    if beta == 1.0:
        return 0.0
    k = coefficient(budget)
    r = float(range_radius)
    log_term = math.log(2.0 / beta)
    # e^eps / (e^eps - 1) == (k + 1) / 2, which stays finite for large eps
    linear = 2.0 * r * (k + 1.0) / 3.0
    quad = 2.0 * r * r * k * k
    # n lam^2 - L*linear*lam - L*quad = 0
    b = log_term * linear
    disc = b * b + 4.0 * n * log_term * quad
    return (b + math.sqrt(disc)) / (2.0 * n)


def endpoint_ratios(budget: BudgetLike,
                    mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> tuple[float, float]:
    """``(P[high | c+r] / P[high | c-r], P[low | c-r] / P[low | c+r])``.

    Probabilities depend on ``(w - c) / r`` only, so the endpoints are
    evaluated in normalized coordinates and the result is range-independent.
    """
    hi_top, lo_top = mechanism.probabilities(1.0, 0.0, 1.0, budget)
    hi_bot, lo_bot = mechanism.probabilities(-1.0, 0.0, 1.0, budget)
    return float(hi_top) / float(hi_bot), float(lo_bot) / float(lo_top)


def ldp_ratio(budget: BudgetLike, rng_range: Range | None = None,
              mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> float:
    """Worst-case ``P[M(w) = y] / P[M(w') = y]`` over outputs ``y`` and inputs
    ``w, w'`` in the range.

    Output probabilities are affine in ``w``, so the maximum is attained at the
    endpoints. ``rng_range`` only matters through ``(w - c) / r`` and is
    accepted for symmetry with the other calculators.
    """
    as_budget(budget)
    high, low = endpoint_ratios(budget, mechanism)
    return max(high, 1.0 / high, low, 1.0 / low)
