import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ldpfl.model import (Dataset, ModelWeights, SgdConfig, ShapeError, backward, evaluate,
                         forward, init_weights, loss, predict, sgd_epochs)
from oracles import finite_difference_grad, max_relative_error, random_net


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        w, x, y = random_net(rng)
        analytic = backward(w, x, y).layer_vectors()
        numeric = finite_difference_grad(w, x, y)
        for a, n in zip(analytic, numeric):
            assert max_relative_error(a, n) < 1e-4


def test_shapes_and_validation():
    w = init_weights([4, 3, 2], np.random.default_rng(0))
    assert w.sizes == [4, 3, 2]
    assert w.layer_sizes == [15, 8]
    assert w.dimension == 23
    logits, acts = forward(w, np.zeros((5, 4)))
    assert logits.shape == (5, 2) and len(acts) == 2
    with pytest.raises(ShapeError):
        forward(w, np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        ModelWeights([(np.zeros((3, 4)), np.zeros(2))])
    with pytest.raises(ShapeError):
        ModelWeights([(np.zeros((3, 4)), np.zeros(3)), (np.zeros((2, 5)), np.zeros(2))])
    with pytest.raises(ShapeError):
        w.with_layer_vectors([np.zeros(15)])
    with pytest.raises(ValueError):
        init_weights([4], np.random.default_rng(0))


def test_init_weights_glorot_and_scales():
    w = init_weights([100, 50, 10], np.random.default_rng(0), scales=[1.0, 0.01])
    lim0 = np.sqrt(6 / 150)
    lim1 = np.sqrt(6 / 60) * 0.01
    assert np.abs(w.layers[0][0]).max() <= lim0
    assert np.abs(w.layers[1][0]).max() <= lim1
    assert np.abs(w.layers[0][0]).max() > 0.9 * lim0
    assert all(np.all(b == 0) for _, b in w.layers)
    with pytest.raises(ValueError):
        init_weights([3, 2], np.random.default_rng(0), scales=[1.0, 1.0])


@settings(max_examples=50)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=5), st.integers(0, 2**32 - 1))
def test_layer_vector_round_trip(sizes, seed):
    w = init_weights(sizes, np.random.default_rng(seed))
    assert w.with_layer_vectors(w.layer_vectors()).array_equal(w)
    assert sum(v.size for v in w.layer_vectors()) == w.dimension


def test_uniform_logits_loss_is_log_classes():
    w = ModelWeights([(np.zeros((5, 3)), np.zeros(5))])
    assert loss(w, np.ones((4, 3)), np.array([0, 1, 2, 3])) == pytest.approx(np.log(5))


def test_loss_stable_for_large_logits():
    w = ModelWeights([(np.array([[1000.0], [-1000.0]]), np.zeros(2))])
    assert np.isfinite(loss(w, np.array([[1.0]]), np.array([1])))


def test_predict_ties_go_to_lowest_class():
    w = ModelWeights([(np.zeros((3, 2)), np.zeros(3))])
    assert_array_equal(predict(w, np.ones((4, 2))), [0, 0, 0, 0])


def test_dataset_validation():
    with pytest.raises(ShapeError):
        Dataset(np.zeros(3), np.zeros(3))
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), num_classes=3)
    d = Dataset(np.zeros((3, 2)), np.array([0, 2, 1]))
    assert d.num_classes == 3 and len(d.subset([0, 1])) == 2


def test_sgd_zero_learning_rate_is_identity():
    rng = np.random.default_rng(0)
    w = init_weights([3, 4, 2], rng)
    data = Dataset(rng.normal(size=(20, 3)), rng.integers(0, 2, 20), 2)
    out = sgd_epochs(w, data, SgdConfig(0.0, 5, 3), np.random.default_rng(1))
    assert out.array_equal(w)


def test_sgd_does_not_modify_input_and_reduces_loss():
    rng = np.random.default_rng(0)
    w = init_weights([2, 8, 2], rng)
    x = rng.normal(size=(200, 2))
    data = Dataset(x, (x[:, 0] > 0).astype(int), 2)
    before = w.copy()
    losses = []
    out = sgd_epochs(w, data, SgdConfig(0.1, 10, 5), np.random.default_rng(1), losses)
    assert w.array_equal(before)
    assert len(losses) == 5 and losses[-1] < losses[0]
    assert evaluate(out, data) > 0.9


def test_sgd_matches_manual_batches():
    # oracle: hand-rolled loop over the same permutation
    rng = np.random.default_rng(3)
    w = init_weights([3, 2], rng)
    data = Dataset(rng.normal(size=(7, 3)), rng.integers(0, 2, 7), 2)
    out = sgd_epochs(w, data, SgdConfig(0.05, 3, 1), np.random.default_rng(9))
    order = np.random.default_rng(9).permutation(7)
    (W, b), = w.copy().layers
    for start in (0, 3, 6):
        idx = order[start:start + 3]
        xb, yb = data.features[idx], data.labels[idx]
        z = xb @ W.T + b
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(yb)), yb] -= 1
        p /= len(yb)
        W, b = W - 0.05 * (p.T @ xb), b - 0.05 * p.sum(axis=0)
    assert_allclose(out.layers[0][0], W, rtol=1e-12, atol=1e-15)
    assert_allclose(out.layers[0][1], b, rtol=1e-12, atol=1e-15)


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(-0.1)
    with pytest.raises(ValueError):
        SgdConfig(0.1, 0)
    with pytest.raises(ValueError):
        SgdConfig(0.1, 1, 0)
