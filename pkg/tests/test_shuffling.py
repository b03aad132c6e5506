from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from ldpfl import shuffling as sh
from ldpfl.model import init_weights
from ldpfl.shuffling import (ProtocolError, ReportBatch, SchedulingError, ShuffleConfig,
                             ShuffleMode, TimingProfile, WeightId, WeightReport)


def make_batches(clients, sizes, seed, **config_kw):
    rng = np.random.default_rng(seed)
    profiles = sh.random_profiles(clients, rng)
    config = ShuffleConfig.for_profiles(profiles, 1.0, **config_kw)
    batches = []
    for p in profiles:
        vectors = [rng.normal(size=n) for n in sizes]
        batches.append(sh.schedule(sh.split(vectors), p, config, rng))
    return batches, config, profiles


def test_split_reassemble_round_trip():
    w = init_weights([4, 3, 2], np.random.default_rng(0))
    entries = sh.split(w)
    assert len(entries) == w.dimension
    assert list(entries)[0][0] == WeightId(0, 0)
    back = sh.reassemble(entries, w.layer_sizes)
    assert w.with_layer_vectors(back).array_equal(w)


def test_reassemble_detects_missing():
    with pytest.raises(ProtocolError):
        sh.reassemble([(WeightId(0, 0), 1.0)], [2])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(1, 20), min_size=1, max_size=4),
       st.integers(0, 2**32 - 1))
def test_merge_preserves_multiset(clients, sizes, seed):
    batches, _, _ = make_batches(clients, sizes, seed)
    stream = sh.merge(batches)
    sent = Counter((int(l), int(o), v) for b in batches
                   for l, o, v in zip(b.layer, b.offset, b.value))
    got = Counter((int(l), int(o), v) for l, o, v in zip(stream.layer, stream.offset, stream.value))
    assert sent == got
    assert np.all(np.diff(stream.arrival) >= 0)


def test_collect_groups_by_id():
    batches, _, _ = make_batches(5, [3, 2], 1)
    groups = sh.collect(batches)
    assert set(groups) == {WeightId(0, i) for i in range(3)} | {WeightId(1, i) for i in range(2)}
    assert all(len(v) == 5 for v in groups.values())


def test_arrivals_uniform_in_window():
    # 100 clients x 100 weights = 1e4 reports
    batches, config, _ = make_batches(100, [100], 7)
    stream = sh.merge(batches)
    assert len(stream) == 10_000
    assert sh.arrival_uniformity(stream, config).pvalue > 0.01


def test_heterogeneous_profiles_land_in_window():
    rng = np.random.default_rng(3)
    profiles = sh.random_profiles(50, rng, local=(0.1, 20.0), comm=(0.0, 5.0))
    config = ShuffleConfig.for_profiles(profiles, 2.5)
    entries = sh.split([np.zeros(200)])
    for p in profiles:
        a = sh.schedule(entries, p, config, rng).arrival
        assert a.min() >= config.slowest and a.max() <= config.slowest + config.window


def test_no_wait_schedule_leaks_speed():
    rng = np.random.default_rng(3)
    fast, slow = TimingProfile(1.0, 0.1), TimingProfile(5.0, 1.0)
    config = ShuffleConfig.for_profiles([fast, slow], 1.0)
    entries = sh.split([np.zeros(100)])
    a = sh.schedule(entries, fast, config, rng, wait=False).arrival
    b = sh.schedule(entries, slow, config, rng, wait=False).arrival
    assert a.max() < b.min()


def test_linkage_attack_at_chance():
    res = sh.linkage_experiment(10, 50, 200, np.random.default_rng(11))
    assert res.chance == 0.1
    assert abs(res.accuracy - 0.1) <= 3 * res.standard_error


def test_linkage_attack_succeeds_without_wait():
    res = sh.linkage_experiment(10, 50, 50, np.random.default_rng(11), wait=False)
    assert res.accuracy > 0.3 and res.z > 10


def test_scheduling_errors():
    with pytest.raises(SchedulingError):
        sh.schedule(sh.split([np.zeros(2)]), TimingProfile(3.0, 1.0), ShuffleConfig(1.0, 2.0),
                    np.random.default_rng(0))
    with pytest.raises(ValueError):
        ShuffleConfig(window=0.0)
    with pytest.raises(ValueError):
        ShuffleConfig(drop_probability=1.0)
    with pytest.raises(ValueError):
        TimingProfile(-1.0, 0.0)


def test_no_delays_sends_at_slowest():
    cfg = ShuffleConfig(1.0, 2.0)
    b = sh.schedule(sh.split([np.zeros(5)]), TimingProfile(1.0, 0.5), cfg,
                    np.random.default_rng(0), delays=False)
    assert_array_equal(b.arrival, np.full(5, 2.0))


def test_duplicate_ids_rejected():
    r = WeightReport(WeightId(0, 1), 0.5, 1.0)
    with pytest.raises(ProtocolError):
        sh.merge([ReportBatch.from_reports([r, r])])


def test_merge_breaks_ties_by_tiebreak_and_empty():
    a = ReportBatch(np.array([0]), np.array([0]), np.array([1.0]), np.array([1.0]), np.array([0.9]))
    b = ReportBatch(np.array([0]), np.array([0]), np.array([2.0]), np.array([1.0]), np.array([0.1]))
    assert_array_equal(sh.merge([a, b]).value, [2.0, 1.0])
    assert len(sh.merge([])) == 0


def test_schedule_is_seed_deterministic():
    entries = sh.split([np.arange(10.0)])
    cfg = ShuffleConfig(1.0, 5.0)
    p = TimingProfile(1.0, 1.0)
    a = sh.schedule(entries, p, cfg, np.random.default_rng(5))
    b = sh.schedule(entries, p, cfg, np.random.default_rng(5))
    assert_array_equal(a.arrival, b.arrival)


def test_drop_probability_loses_reports():
    batches, _, _ = make_batches(1, [1000], 0, drop_probability=0.3)
    assert 600 < len(batches[0]) < 800


def test_iteration_yields_reports():
    batches, _, _ = make_batches(2, [2], 0)
    reports = list(sh.merge(batches))
    assert len(reports) == 4 and isinstance(reports[0], WeightReport)
    again = ReportBatch.from_reports(reports)
    assert_array_equal(again.value, [r.value for r in reports])


def test_budget_composition():
    assert sh.budget_composition(1.0, 10, 1000, ShuffleMode.NONE) == 10_000
    assert sh.budget_composition(1.0, 10, 1000, "model") == 1000
    assert sh.budget_composition(1.0, 10, 1000, "parameter") == 1
    with pytest.raises(ValueError):
        sh.budget_composition(1.0, 10, 1000, "everything")
    with pytest.raises(ValueError):
        sh.budget_composition(0.0, 10, 1000, "none")
