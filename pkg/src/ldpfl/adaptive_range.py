"""Per-layer (center, radius) ranges: fixed and adaptive policies.

In adaptive mode the cloud recomputes each layer's range from the
aggregated weights of the round just finished and ships it with the next
round's global model. Clients never derive ranges from their own weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .mechanism import Range
from .model import ModelWeights

RADIUS_FLOOR = 1e-4


class RangeMode(str, enum.Enum):
    FIXED = "fixed"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class RangeVector:
    ranges: tuple[Range, ...]

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(self.ranges))

    def __len__(self):
        return len(self.ranges)

    def __iter__(self) -> Iterator[Range]:
        return iter(self.ranges)

    def __getitem__(self, i) -> Range:
        return self.ranges[i]

    @property
    def centers(self) -> np.ndarray:
        return np.array([r.center for r in self.ranges])

    @property
    def radii(self) -> np.ndarray:
        return np.array([r.radius for r in self.ranges])


@dataclass(frozen=True)
class RangePolicy:
    mode: RangeMode = RangeMode.FIXED
    center: float = 0.0
    radius: float = 1.0
    radius_floor: float = RADIUS_FLOOR
    # adaptive only: derive round-0 ranges from the initial global weights
    init_from_weights: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", RangeMode(self.mode))
        if self.radius <= 0:
            raise ValueError(f"initial radius must be > 0, got {self.radius}")
        if self.radius_floor <= 0:
            raise ValueError("radius_floor must be > 0")

    @property
    def adaptive(self) -> bool:
        return self.mode is RangeMode.ADAPTIVE


# Defaults for the image benchmarks: fixed ranges for MNIST / FMNIST.
MNIST_POLICY = RangePolicy(RangeMode.FIXED, 0.0, 0.075)
FMNIST_POLICY = RangePolicy(RangeMode.FIXED, 0.0, 0.015)


def init_ranges(layer_count: int, policy: RangePolicy,
                initial: ModelWeights | None = None) -> RangeVector:
    """Round-0 ranges: ``(center, radius)`` replicated on every layer, or, for
    an adaptive policy with ``init_from_weights``, the per-layer span of the
    initial global model (which the cloud drew itself).
    """
    if layer_count < 1:
        raise ValueError("layer_count must be >= 1")
    if policy.adaptive and policy.init_from_weights:
        if initial is None or len(initial) != layer_count:
            raise ValueError("init_from_weights needs the initial model")
        return RangeVector(tuple(layer_range(v, policy.radius_floor)
                                 for v in initial.layer_vectors()))
    return RangeVector(tuple(Range(policy.center, policy.radius) for _ in range(layer_count)))


def layer_range(values: np.ndarray, radius_floor: float = RADIUS_FLOOR) -> Range:
    """Midpoint and half-width of ``values``, with the radius floored."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot derive a range from an empty layer")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite weight in aggregated layer")
    lo, hi = float(values.min()), float(values.max())
    center = (lo + hi) / 2.0
    radius = max((hi - lo) / 2.0, radius_floor)
    # rounding in the midpoint can leave an endpoint an ulp outside
    while center - radius > lo or center + radius < hi:
        radius = np.nextafter(radius, np.inf)
    return Range(center, float(radius))


def update_ranges(aggregated: ModelWeights | Sequence[np.ndarray], policy: RangePolicy,
                  current: RangeVector) -> RangeVector:
    """Range vector for the next round.

    Fixed mode returns ``current`` untouched. Adaptive mode takes the min/max
    of each aggregated layer.
    """
    vectors = aggregated.layer_vectors() if isinstance(aggregated, ModelWeights) else aggregated
    if len(vectors) != len(current):
        raise ValueError(f"{len(vectors)} layers but {len(current)} ranges")
    for v in vectors:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite weight in aggregated model")
    if not policy.adaptive:
        return current
    return RangeVector(tuple(layer_range(v, policy.radius_floor) for v in vectors))
