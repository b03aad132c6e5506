"""Federated rounds with local perturbation and parameter shuffling.

One round: the cloud samples clients without replacement, each selected
client trains from the current global model, clips and perturbs every
weight into its layer range, then split-and-shuffles the result. The cloud
averages the arrival-ordered reports per weight id and, in adaptive mode,
derives next round's ranges from the new global model.

Random streams are keyed by ``(seed, purpose, round, client)`` so every
client's randomness is independent of how many other clients ran, or in
which order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import shuffling
from .adaptive_range import RangePolicy, RangeVector, init_ranges, update_ranges
from .mechanism import DEFAULT_MECHANISM, PrivacyBudget, TwoPointMechanism, coefficient
from .model import Dataset, ModelWeights, SgdConfig, evaluate, sgd_epochs
from .shuffling import ProtocolError, ReportBatch, ShuffleConfig, TimingProfile

log = logging.getLogger(__name__)

# stream purposes
_SELECT, _CLIENT, _PARTITION, _PROFILES = 1, 2, 3, 4


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


@dataclass(frozen=True)
class FederationConfig:
    total_clients: int = 100
    fraction: float = 1.0
    rounds: int = 10
    sgd: SgdConfig = field(default_factory=SgdConfig)
    epsilon: float = 1.0
    range_policy: RangePolicy = field(default_factory=RangePolicy)
    shuffle_window: float = 1.0
    seed: int = 0
    selected: int | None = None
    perturb: bool = True
    delays: bool = True
    local_time: tuple[float, float] = (1.0, 5.0)
    comm_time: tuple[float, float] = (0.1, 1.0)

    def __post_init__(self):
        if self.total_clients < 1:
            raise ValueError("total_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.selected is not None and not 1 <= self.selected <= self.total_clients:
            raise ValueError("selected must lie in [1, total_clients]")
        if self.perturb:
            PrivacyBudget(self.epsilon)

    @property
    def clients_per_round(self) -> int:
        if self.selected is not None:
            return self.selected
        return max(1, int(round(self.fraction * self.total_clients)))

    @property
    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(self.epsilon)


@dataclass
class RoundMetrics:
    accuracy: float | None
    clip_rate: float
    ranges: RangeVector
    # simulation-only diagnostics, unknown to a real cloud: mean squared gap
    # between the aggregate and the exact mean of the clipped local weights,
    # and its analytic upper bound k^2 r^2 / n averaged over weights
    aggregation_mse: float | None = None
    aggregation_bound: float | None = None


@dataclass
class RoundState:
    round: int
    global_weights: ModelWeights
    ranges: RangeVector
    metrics: RoundMetrics | None = None


class LocalUpdate(NamedTuple):
    reports: ReportBatch
    clipped: int
    local: list[np.ndarray]  # clipped pre-noise vectors, for diagnostics only


def partition_data(data: Dataset, n: int, rng: np.random.Generator) -> list[Dataset]:
    """Random disjoint shards whose sizes differ by at most one."""
    if len(data) < n:
        raise ValueError(f"cannot split {len(data)} samples across {n} clients")
    order = rng.permutation(len(data))
    return [data.subset(idx) for idx in np.array_split(order, n)]


def clip_layers(weights: ModelWeights, ranges: RangeVector) -> tuple[list[np.ndarray], int]:
    """Clip each layer into its range; also returns how many weights moved."""
    out, clipped = [], 0
    for v, rg in zip(weights.layer_vectors(), ranges):
        lo, hi = rg.lower, rg.upper
        clipped += int(np.count_nonzero((v < lo) | (v > hi)))
        out.append(np.minimum(np.maximum(v, lo), hi))
    return out, clipped


def local_update(global_weights: ModelWeights, ranges: RangeVector, data: Dataset,
                 config: FederationConfig, rng: np.random.Generator,
                 profile: TimingProfile | None = None, shuffle: ShuffleConfig | None = None,
                 mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> LocalUpdate:
    if len(ranges) != len(global_weights):
        raise ValueError(f"{len(ranges)} ranges for {len(global_weights)} layers")
    if profile is None:
        profile = TimingProfile(0.0, 0.0)
    if shuffle is None:
        shuffle = ShuffleConfig(window=config.shuffle_window, slowest=profile.response)
    trained = sgd_epochs(global_weights, data, config.sgd, rng)
    if not trained.is_finite():
        # NaN would slip through clipping and be reported as the low output
        raise FloatingPointError("local training produced non-finite weights")
    if config.perturb:
        local, clipped = clip_layers(trained, ranges)
        vectors = [mechanism.sample(v, rg.center, rg.radius, config.budget, rng)
                   for v, rg in zip(local, ranges)]
    else:
        vectors, clipped = trained.layer_vectors(), 0
        local = vectors
    entries = shuffling.split(vectors)
    batch = shuffling.schedule(entries, profile, shuffle, rng, delays=config.delays)
    return LocalUpdate(batch, clipped, local)


def aggregate(stream_: ReportBatch, layer_sizes: Sequence[int], expected: int) -> list[np.ndarray]:
    """Per-id mean of the reports, one flat vector per layer.

    Sums are exactly rounded (``math.fsum``), so the result is independent
    of arrival order.
    """
    starts = np.concatenate([[0], np.cumsum(layer_sizes)])
    d = int(starts[-1])
    layer, offset = stream_.layer, stream_.offset
    if layer.size and (layer.min() < 0 or layer.max() >= len(layer_sizes)
                       or offset.min() < 0
                       or np.any(offset >= np.asarray(layer_sizes)[layer])):
        raise ProtocolError("report carries an unknown weight id")
    flat = starts[layer] + offset
    counts = np.bincount(flat, minlength=d)
    if d and (counts.min() != expected or counts.max() != expected):
        bad = int(np.flatnonzero(counts != expected)[0])
        raise ProtocolError(
            f"weight {bad} received {counts[bad]} reports, expected {expected}"
        )
    order = np.argsort(flat, kind="stable")
    rows = stream_.value[order].reshape(d, expected).tolist()
    means = np.array([math.fsum(row) / expected for row in rows])
    return [means[starts[i]:starts[i + 1]] for i in range(len(layer_sizes))]


def cloud_round(state: RoundState, batches: Sequence[ReportBatch], policy: RangePolicy,
                expected_clients: int, test: Dataset | None = None,
                clip_rate: float = 0.0) -> RoundState:
    stream_ = shuffling.merge(batches)
    w = state.global_weights
    means = aggregate(stream_, w.layer_sizes, expected_clients)
    new_weights = w.with_layer_vectors(means)
    ranges = update_ranges(means, policy, state.ranges)
    acc = evaluate(new_weights, test) if test is not None else None
    return RoundState(state.round + 1, new_weights, ranges, RoundMetrics(acc, clip_rate, ranges))


def client_profiles(config: FederationConfig) -> list[TimingProfile]:
    return shuffling.random_profiles(config.total_clients, stream(config.seed, _PROFILES),
                                     config.local_time, config.comm_time)


def select_clients(config: FederationConfig, round_: int) -> np.ndarray:
    rng = stream(config.seed, _SELECT, round_)
    return np.sort(rng.choice(config.total_clients, config.clients_per_round, replace=False))


def client_shards(config: FederationConfig, train: Dataset) -> list[Dataset]:
    return partition_data(train, config.total_clients, stream(config.seed, _PARTITION))


def client_stream(config: FederationConfig, round_: int, client: int) -> np.random.Generator:
    return stream(config.seed, _CLIENT, round_, client)


def run_federated(config: FederationConfig, train: Dataset, initial: ModelWeights,
                  test: Dataset | None = None,
                  mechanism: TwoPointMechanism = DEFAULT_MECHANISM) -> list[RoundState]:
    """Execute ``config.rounds`` rounds; returns one state per completed round."""
    shards = client_shards(config, train)
    profiles = client_profiles(config)
    state = RoundState(0, initial.copy(), init_ranges(len(initial), config.range_policy, initial))
    history = []
    for rnd in range(1, config.rounds + 1):
        chosen = select_clients(config, rnd)
        shuffle = ShuffleConfig.for_profiles([profiles[i] for i in chosen], config.shuffle_window)
        batches, clipped = [], 0
        local_sum = [np.zeros(n) for n in state.global_weights.layer_sizes]
        for i in chosen:
            up = local_update(state.global_weights, state.ranges, shards[i], config,
                              client_stream(config, rnd, int(i)), profiles[i], shuffle, mechanism)
            batches.append(up.reports)
            clipped += up.clipped
            for acc, v in zip(local_sum, up.local):
                acc += v
        clip_rate = clipped / (len(chosen) * state.global_weights.dimension)
        sent_ranges = state.ranges
        state = cloud_round(state, batches, config.range_policy, len(chosen), test, clip_rate)
        if config.perturb:
            n = len(chosen)
            gap = np.concatenate([g - s / n for g, s in
                                  zip(state.global_weights.layer_vectors(), local_sum)])
            k2 = coefficient(config.epsilon) ** 2
            bound = sum(size * k2 * rg.radius ** 2 / n
                        for size, rg in zip(state.global_weights.layer_sizes, sent_ranges))
            state.metrics.aggregation_mse = float(np.mean(gap * gap))
            state.metrics.aggregation_bound = bound / state.global_weights.dimension
        if not state.global_weights.is_finite():
            raise FloatingPointError(f"global weights became non-finite in round {rnd}")
        log.debug("round %d: acc=%s clip=%.4f", rnd, state.metrics.accuracy, clip_rate)
        history.append(state)
    return history
