import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ldpfl import fl_core as fl
from ldpfl import shuffling as sh
from ldpfl.adaptive_range import RangeMode, RangePolicy, init_ranges
from ldpfl.datasets import make_blobs, train_test_split
from ldpfl.mechanism import DEFAULT_MECHANISM, Range, coefficient, concentration_radius
from ldpfl.model import Dataset, SgdConfig, init_weights, sgd_epochs
from ldpfl.shuffling import ProtocolError, ReportBatch
from oracles import fedavg_oracle


@pytest.fixture(scope="module")
def blobs():
    data = make_blobs(600, 5, 3, np.random.default_rng(0))
    return train_test_split(data, 100)


def test_noise_free_matches_fedavg_oracle(blobs):
    train, test = blobs
    initial = init_weights([5, 8, 3], np.random.default_rng(1))
    sgd = SgdConfig(0.05, 10, 2)
    cfg = fl.FederationConfig(total_clients=10, rounds=5, sgd=sgd, perturb=False, delays=False,
                              seed=4)
    history = fl.run_federated(cfg, train, initial, test)
    oracle = fedavg_oracle(initial, train, 4, 10, 5, sgd)
    assert len(history) == 5
    for state, ref in zip(history, oracle):
        assert state.global_weights.array_equal(ref)


def test_single_client_is_centralized_sgd(blobs):
    train, _ = blobs
    initial = init_weights([5, 4, 3], np.random.default_rng(2))
    sgd = SgdConfig(0.05, 16, 1)
    cfg = fl.FederationConfig(total_clients=1, rounds=3, sgd=sgd, perturb=False, seed=9)
    history = fl.run_federated(cfg, train, initial)
    shard = fl.client_shards(cfg, train)[0]
    w = initial
    for rnd, state in enumerate(history, start=1):
        w = sgd_epochs(w, shard, sgd, np.random.default_rng([9, 2, rnd, 0]))
        assert state.global_weights.array_equal(w)


def test_partition_data():
    rng = np.random.default_rng(0)
    data = Dataset(np.arange(100.0)[:, None], np.zeros(100, int), 1)
    shards = fl.partition_data(data, 100, rng)
    assert [len(s) for s in shards] == [1] * 100
    small = Dataset(np.arange(10.0)[:, None], np.zeros(10, int), 1)
    shards = fl.partition_data(small, 3, rng)
    assert sorted(len(s) for s in shards) == [3, 3, 4]
    union = np.sort(np.concatenate([s.features[:, 0] for s in shards]))
    assert_array_equal(union, np.arange(10.0))
    with pytest.raises(ValueError):
        fl.partition_data(small, 11, rng)


def test_local_update_without_training_is_pure_perturbation(blobs):
    train, _ = blobs
    w = init_weights([5, 4, 3], np.random.default_rng(0))
    ranges = init_ranges(2, RangePolicy(RangeMode.FIXED, 0.0, 1.0))
    cfg = fl.FederationConfig(total_clients=1, sgd=SgdConfig(0.0, 10, 1), epsilon=1.0)
    up = fl.local_update(w, ranges, train, cfg, np.random.default_rng(5))
    assert len(up.reports) == w.dimension and up.clipped == 0
    rng = np.random.default_rng(5)
    sgd_epochs(w, train, cfg.sgd, rng)
    expected = np.concatenate([DEFAULT_MECHANISM.sample(v, 0.0, 1.0, 1.0, rng)
                               for v in w.layer_vectors()])
    assert_array_equal(up.reports.value, expected)
    k = coefficient(1.0)
    assert set(np.unique(up.reports.value)) <= {k, -k}


def test_local_update_checks_layer_count(blobs):
    w = init_weights([5, 4, 3], np.random.default_rng(0))
    with pytest.raises(ValueError):
        fl.local_update(w, init_ranges(3, RangePolicy()), blobs[0], fl.FederationConfig(),
                        np.random.default_rng(0))


def test_clip_rate_small_for_blob_run():
    # reference run: 100 clients, (0, 1) fixed range, eps = 5
    train, test = train_test_split(make_blobs(6000, 20, 10, np.random.default_rng(0)), 1000)
    cfg = fl.FederationConfig(total_clients=100, rounds=10, epsilon=5.0, seed=1,
                              range_policy=RangePolicy(RangeMode.FIXED, 0.0, 1.0))
    history = fl.run_federated(cfg, train, init_weights([20, 32, 10], np.random.default_rng(3)),
                               test)
    assert all(s.metrics.clip_rate < 0.05 for s in history)
    assert all(0.0 <= s.metrics.accuracy <= 1.0 for s in history)


def _batch(values, layer_sizes):
    entries = sh.split([np.asarray(values[s:e]) for s, e in
                        zip(np.cumsum([0] + layer_sizes[:-1]), np.cumsum(layer_sizes))])
    return sh.schedule(entries, sh.TimingProfile(0, 0), sh.ShuffleConfig(1.0, 0.0),
                       np.random.default_rng(len(values)))


def test_cloud_round_single_client_and_constant_reports():
    w = init_weights([2, 2], np.random.default_rng(0))
    state = fl.RoundState(0, w, init_ranges(1, RangePolicy()))
    vec = np.array([0.1, -0.2, 0.3, 0.4, 0.5, 0.6])
    new = fl.cloud_round(state, [_batch(vec, [6])], RangePolicy(), 1)
    assert_array_equal(new.global_weights.layer_vectors()[0], vec)
    assert new.round == 1
    k = coefficient(1.0)
    same = [_batch(np.full(6, k), [6]) for _ in range(7)]
    new = fl.cloud_round(state, same, RangePolicy(), 7)
    assert_array_equal(new.global_weights.layer_vectors()[0], np.full(6, k))


def test_cloud_round_protocol_errors():
    w = init_weights([2, 2], np.random.default_rng(0))
    state = fl.RoundState(0, w, init_ranges(1, RangePolicy()))
    full = _batch(np.zeros(6), [6])
    with pytest.raises(ProtocolError):
        fl.cloud_round(state, [full.take(np.arange(5))], RangePolicy(), 1)
    with pytest.raises(ProtocolError):
        fl.cloud_round(state, [full, full.take(np.arange(5))], RangePolicy(), 2)
    bad = dataclasses.replace(full, offset=full.offset + 1)
    with pytest.raises(ProtocolError):
        fl.cloud_round(state, [bad], RangePolicy(), 1)


def test_aggregate_concentrates_for_many_clients():
    # 1000 clients, identical true weight, eps = 1
    rng = np.random.default_rng(0)
    w_true, n, d, reps = 0.3, 1000, 4, 200
    lam = concentration_radius(1.0, 1.0, n, 0.05)
    hits = 0
    for _ in range(reps):
        values = DEFAULT_MECHANISM.sample(np.full((n, d), w_true), 0.0, 1.0, 1.0, rng).ravel()
        batch = ReportBatch(np.zeros(n * d, np.int64), np.tile(np.arange(d), n), values,
                            rng.random(n * d))
        mean = fl.aggregate(batch, [d], n)[0]
        hits += int(np.all(np.abs(mean - w_true) <= lam))
    assert hits >= 0.95 * reps


def test_aggregate_unbiased_over_rounds(blobs):
    train, _ = blobs
    w = init_weights([5, 3], np.random.default_rng(0))
    w = w.with_layer_vectors([np.clip(v, -0.9, 0.9) for v in w.layer_vectors()])
    ranges = init_ranges(1, RangePolicy())
    cfg = fl.FederationConfig(total_clients=10, sgd=SgdConfig(0.0, 10, 1), epsilon=1.0)
    rounds, k = 300, 10
    means = []
    for rnd in range(rounds):
        batches = [fl.local_update(w, ranges, train, cfg, fl.stream(0, rnd, i)).reports
                   for i in range(k)]
        means.append(fl.aggregate(sh.merge(batches), w.layer_sizes, k)[0])
    est = np.mean(means, axis=0)
    truth = w.layer_vectors()[0]
    sd = coefficient(1.0) / math.sqrt(k * rounds)
    assert np.max(np.abs(est - truth) / sd) < 4.5


def test_run_is_seed_deterministic(blobs):
    train, test = blobs
    initial = init_weights([5, 6, 3], np.random.default_rng(0))
    cfg = fl.FederationConfig(total_clients=8, fraction=0.5, rounds=2, seed=3,
                              range_policy=RangePolicy(RangeMode.ADAPTIVE))
    a = fl.run_federated(cfg, train, initial, test)
    b = fl.run_federated(cfg, train, initial, test)
    for x, y in zip(a, b):
        assert x.global_weights.array_equal(y.global_weights)
        assert x.metrics.accuracy == y.metrics.accuracy
        assert x.ranges == y.ranges


def test_client_selection():
    cfg = fl.FederationConfig(total_clients=20, fraction=0.25, seed=1)
    assert cfg.clients_per_round == 5
    picks = [fl.select_clients(cfg, r) for r in range(1, 6)]
    assert all(len(set(p)) == 5 and np.all(np.diff(p) > 0) for p in picks)
    assert len({tuple(p) for p in picks}) > 1
    assert fl.FederationConfig(total_clients=20, selected=7).clients_per_round == 7


def test_config_validation():
    for kw in [dict(total_clients=0), dict(rounds=0), dict(fraction=0.0), dict(fraction=1.5),
               dict(selected=0), dict(total_clients=3, selected=4), dict(epsilon=0.0)]:
        with pytest.raises(ValueError):
            fl.FederationConfig(**kw)
    fl.FederationConfig(epsilon=0.0, perturb=False)


def test_reports_carry_no_client_identity():
    assert {f.name for f in dataclasses.fields(ReportBatch)} == {
        "layer", "offset", "value", "arrival", "tiebreak"}
    assert {f.name for f in dataclasses.fields(sh.WeightReport)} == {"id", "value", "arrival"}
    assert "client" not in {f.name for f in dataclasses.fields(fl.RoundState)}


def test_divergence_raises(blobs):
    train, _ = blobs
    cfg = fl.FederationConfig(total_clients=2, rounds=2, sgd=SgdConfig(1e6, 5, 1), perturb=False)
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
        fl.run_federated(cfg, train, init_weights([5, 4, 3], np.random.default_rng(0)))


def test_adaptive_ranges_follow_aggregate(blobs):
    train, test = blobs
    cfg = fl.FederationConfig(total_clients=10, rounds=2, epsilon=5.0,
                              range_policy=RangePolicy(RangeMode.ADAPTIVE))
    history = fl.run_federated(cfg, train, init_weights([5, 4, 3], np.random.default_rng(0)), test)
    for state in history:
        for v, rg in zip(state.global_weights.layer_vectors(), state.ranges):
            assert rg.lower <= v.min() and v.max() <= rg.upper
            assert rg == Range((v.min() + v.max()) / 2, rg.radius)


def test_aggregation_diagnostics_match_exact_variance(blobs):
    # no training: every client reports the same clipped weights, so the
    # expected MSE is the exact mean variance and the bound is k^2 r^2 / n
    train, test = blobs
    w = init_weights([5, 4, 3], np.random.default_rng(0))
    cfg = fl.FederationConfig(total_clients=50, rounds=20, sgd=SgdConfig(0.0, 10, 1),
                              epsilon=1.0, seed=2)
    history = fl.run_federated(cfg, train, w, test)
    k2 = coefficient(1.0) ** 2
    v = np.concatenate(w.layer_vectors())
    exact = np.mean(k2 - v ** 2) / 50
    assert all(s.metrics.aggregation_bound == pytest.approx(k2 / 50, rel=1e-12)
               for s in history)
    pooled = np.mean([s.metrics.aggregation_mse for s in history])
    # 20 rounds x 47 weights, relative SE about 0.05
    assert pooled == pytest.approx(exact, rel=0.2)
    free = fl.run_federated(dataclasses.replace(cfg, perturb=False, rounds=1), train, w, test)
    assert free[0].metrics.aggregation_mse is None
