"""Parameter split-and-shuffle as a seeded timed-event simulation.

Each client splits its perturbed model into ``(id, value)`` pairs and
releases every pair after its own random delay. Client ``i`` first waits
``T_S - t_local_i - t_comm_i`` so that, whatever its speed, every report
lands in the common window ``[T_S, T_S + T]``. The cloud only ever sees the
merged stream ordered by arrival.

Reports are held column-wise (numpy arrays) because a round easily carries
hundreds of thousands of them; iterating a batch yields ``WeightReport``
records.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .model import ModelWeights


class ProtocolError(RuntimeError):
    pass


class SchedulingError(ValueError):
    pass


class WeightId(NamedTuple):
    layer: int
    offset: int


@dataclass(frozen=True)
class WeightReport:
    id: WeightId
    value: float
    arrival: float


@dataclass(frozen=True)
class TimingProfile:
    t_local: float
    t_comm: float

    def __post_init__(self):
        if self.t_local < 0 or self.t_comm < 0:
            raise ValueError("timings must be >= 0")

    @property
    def response(self) -> float:
        return self.t_local + self.t_comm


@dataclass(frozen=True)
class ShuffleConfig:
    """``window`` is the shuffle window T; ``slowest`` is T_S.

    ``jitter`` (std-dev, seconds) perturbs each client's actual response time
    away from its declared profile, modelling a misestimated T_S.
    ``drop_probability`` loses individual reports in transit.
    """

    window: float = 1.0
    slowest: float = 0.0
    jitter: float = 0.0
    drop_probability: float = 0.0

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError(f"shuffle window must be > 0, got {self.window}")
        if self.slowest < 0 or self.jitter < 0:
            raise ValueError("slowest and jitter must be >= 0")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must lie in [0, 1)")

    @classmethod
    def for_profiles(cls, profiles: Iterable[TimingProfile], window: float = 1.0,
                     **kw) -> "ShuffleConfig":
        slowest = max((p.response for p in profiles), default=0.0)
        return cls(window=window, slowest=slowest, **kw)


def _flat_keys(layer: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return (layer.astype(np.int64) << 32) | offset.astype(np.int64)


@dataclass
class Entries:
    """Split model: one ``(WeightId, value)`` per scalar weight, in id order."""

    layer: np.ndarray
    offset: np.ndarray
    value: np.ndarray

    def __len__(self):
        return self.value.size

    def __iter__(self) -> Iterator[tuple[WeightId, float]]:
        for l, o, v in zip(self.layer.tolist(), self.offset.tolist(), self.value.tolist()):
            yield WeightId(l, o), v


@dataclass
class ReportBatch:
    """Column-wise reports. ``tiebreak`` orders reports with equal arrival."""

    layer: np.ndarray
    offset: np.ndarray
    value: np.ndarray
    arrival: np.ndarray
    tiebreak: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tiebreak is None:
            self.tiebreak = np.zeros_like(self.arrival)

    def __len__(self):
        return self.value.size

    def __iter__(self) -> Iterator[WeightReport]:
        for l, o, v, a in zip(self.layer.tolist(), self.offset.tolist(),
                              self.value.tolist(), self.arrival.tolist()):
            yield WeightReport(WeightId(l, o), v, a)

    @classmethod
    def empty(cls) -> "ReportBatch":
        z = np.zeros(0)
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), z, z.copy(), z.copy())

    @classmethod
    def from_reports(cls, reports: Sequence[WeightReport]) -> "ReportBatch":
        if not reports:
            return cls.empty()
        return cls(
            np.array([r.id.layer for r in reports], dtype=np.int64),
            np.array([r.id.offset for r in reports], dtype=np.int64),
            np.array([r.value for r in reports], dtype=float),
            np.array([r.arrival for r in reports], dtype=float),
        )

    def keys(self) -> np.ndarray:
        return _flat_keys(self.layer, self.offset)

    def take(self, idx) -> "ReportBatch":
        return ReportBatch(self.layer[idx], self.offset[idx], self.value[idx],
                           self.arrival[idx], self.tiebreak[idx])


def split(weights: ModelWeights | Sequence[np.ndarray]) -> Entries:
    vectors = weights.layer_vectors() if isinstance(weights, ModelWeights) else list(weights)
    if not vectors:
        return Entries(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    layer = np.concatenate([np.full(v.size, i, dtype=np.int64) for i, v in enumerate(vectors)])
    offset = np.concatenate([np.arange(v.size, dtype=np.int64) for v in vectors])
    value = np.concatenate([np.asarray(v, dtype=float).ravel() for v in vectors])
    return Entries(layer, offset, value)


def reassemble(pairs: Iterable[tuple[WeightId, float]], layer_sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of ``split``: rebuild flat per-layer vectors by id."""
    vectors = [np.full(n, np.nan) for n in layer_sizes]
    for wid, v in pairs:
        vectors[wid.layer][wid.offset] = v
    if any(np.isnan(v).any() for v in vectors):
        raise ProtocolError("reassembly left weights unassigned")
    return vectors


def schedule(entries: Entries, profile: TimingProfile, config: ShuffleConfig,
             rng: np.random.Generator, *, delays: bool = True, wait: bool = True) -> ReportBatch:
    """Assign each entry an arrival time at the cloud.

    With the wait rule (default) arrival is ``T_S + u`` with ``u ~ U(0, T)``
    for every entry. ``wait=False`` reproduces the unadjusted design, where a
    client's reports arrive at ``t_local + t_comm + u`` and thus betray its
    speed. ``delays=False`` sends everything at ``T_S`` (ties resolved by the
    random tiebreak only).
    """
    if profile.response > config.slowest:
        raise SchedulingError(
            f"client response time {profile.response} exceeds T_S={config.slowest}"
        )
    n = len(entries)
    u = rng.uniform(0.0, config.window, size=n) if delays else np.zeros(n)
    tiebreak = rng.random(n)
    base = config.slowest if wait else profile.response
    if config.jitter > 0:
        base = base + rng.normal(0.0, config.jitter)
    arrival = base + u
    batch = ReportBatch(entries.layer.copy(), entries.offset.copy(), entries.value.copy(),
                        arrival, tiebreak)
    if config.drop_probability > 0:
        batch = batch.take(rng.random(n) >= config.drop_probability)
    return batch


def _check_unique(batch: ReportBatch, which: int):
    keys = batch.keys()
    if keys.size < 2 or np.all(keys[1:] > keys[:-1]):
        return
    if np.unique(keys).size != keys.size:
        raise ProtocolError(f"batch {which} contains duplicate weight ids")


def merge(batches: Iterable[ReportBatch]) -> ReportBatch:
    """The network: interleave all clients' reports by ``(arrival, tiebreak)``.

    Batch boundaries (i.e. who sent what) do not survive the merge.
    """
    batches = list(batches)
    for i, b in enumerate(batches):
        _check_unique(b, i)
    if not batches:
        return ReportBatch.empty()
    cat = ReportBatch(*(np.concatenate([getattr(b, f) for b in batches])
                        for f in ("layer", "offset", "value", "arrival", "tiebreak")))
    order = np.lexsort((cat.tiebreak, cat.arrival))
    return cat.take(order)


def collect(batches: Iterable[ReportBatch]) -> dict[WeightId, list[float]]:
    """Group the arrival-ordered stream by weight id."""
    stream = merge(batches)
    groups: dict[WeightId, list[float]] = {}
    for report in stream:
        groups.setdefault(report.id, []).append(report.value)
    return groups


class ShuffleMode(str, enum.Enum):
    NONE = "none"
    MODEL = "model"
    PARAMETER = "parameter"


def budget_composition(epsilon: float, rounds: int, dimension: int,
                       mode: ShuffleMode | str) -> float:
    """Total privacy cost of ``rounds`` releases of a ``dimension``-weight model.

    Without shuffling every weight of every round composes (``T d eps``);
    shuffling whole models breaks linkage across rounds (``d eps``); splitting
    and shuffling individual parameters leaves ``eps``.
    """
    if epsilon <= 0 or rounds < 1 or dimension < 1:
        raise ValueError("epsilon, rounds and dimension must be positive")
    mode = ShuffleMode(mode)
    if mode is ShuffleMode.NONE:
        return rounds * dimension * epsilon
    if mode is ShuffleMode.MODEL:
        return dimension * epsilon
    return epsilon


def arrival_uniformity(stream: ReportBatch, config: ShuffleConfig):
    """KS test of ``arrival - T_S`` against ``Uniform(0, T)``."""
    return stats.kstest(stream.arrival - config.slowest, "uniform", args=(0.0, config.window))


def random_profiles(count: int, rng: np.random.Generator,
                    local: tuple[float, float] = (1.0, 5.0),
                    comm: tuple[float, float] = (0.1, 1.0)) -> list[TimingProfile]:
    """Heterogeneous clients: compute and transfer times drawn uniformly."""
    t_local = rng.uniform(*local, size=count)
    t_comm = rng.uniform(*comm, size=count)
    return [TimingProfile(float(a), float(b)) for a, b in zip(t_local, t_comm)]


def nearest_anchor_attack(arrivals: Sequence[np.ndarray], rng: np.random.Generator) -> float:
    """Timing-linkage attacker.

    The attacker learns the owner of one randomly chosen report per client
    (its anchor) and assigns every other report to the client whose anchor
    arrived closest in time. ``arrivals[i]`` holds client ``i``'s arrival
    times; returns the fraction of non-anchor reports attributed correctly.
    """
    anchor_idx = [int(rng.integers(a.size)) for a in arrivals]
    anchors = np.array([a[j] for a, j in zip(arrivals, anchor_idx)])
    correct = total = 0
    for owner, (a, j) in enumerate(zip(arrivals, anchor_idx)):
        rest = np.delete(a, j)
        guess = np.argmin(np.abs(rest[:, None] - anchors[None, :]), axis=1)
        correct += int(np.sum(guess == owner))
        total += rest.size
    return correct / total


@dataclass(frozen=True)
class LinkageResult:
    accuracy: float
    standard_error: float
    chance: float
    trials: int

    @property
    def z(self) -> float:
        return (self.accuracy - self.chance) / self.standard_error


def linkage_experiment(clients: int, weights_per_client: int, trials: int,
                       rng: np.random.Generator, window: float = 1.0,
                       wait: bool = True) -> LinkageResult:
    """Repeat the timing attack over fresh heterogeneous clients each trial."""
    accs = np.empty(trials)
    entries = split([np.zeros(weights_per_client)])
    for t in range(trials):
        profiles = random_profiles(clients, rng)
        config = ShuffleConfig.for_profiles(profiles, window)
        arrivals = [schedule(entries, p, config, rng, wait=wait).arrival for p in profiles]
        accs[t] = nearest_anchor_attack(arrivals, rng)
    se = accs.std(ddof=1) / math.sqrt(trials) if trials > 1 else float("nan")
    return LinkageResult(float(accs.mean()), float(se), 1.0 / clients, trials)
