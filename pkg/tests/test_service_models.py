import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leakguard import nn
from leakguard.data import find_har_dir, load_uci_har
from leakguard.errors import DomainError, ShapeError
from leakguard.numeric import make_rng
from leakguard.service_models import (DecisionTree, NetworkModel, RandomForest, ServiceConfig,
                                      canonical_kind, predict, predict_proba, train_service_model)

KINDS = ("softmax_regression", "mlp", "random_forest")
FAST = ServiceConfig(seed=3, n_trees=10, epochs=20, lr_steps=200)


def blobs(n=200, seed=0):
    rng = make_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 3)) * 0.3 + np.where(y[:, None] == 1, 1.5, -1.5)
    return x, y


def fixed_proba_model(probs):
    c = len(probs)
    layer = nn.Layer(np.zeros((2, c)), np.log(np.array(probs, dtype=float)), "linear")
    return NetworkModel("softmax_regression", [layer], c, 2)


@pytest.fixture(scope="module")
def trained():
    x, y = blobs()
    return {k: train_service_model(x, y, k, FAST) for k in KINDS}


@pytest.mark.parametrize("kind", KINDS)
def test_blobs_train_accuracy(trained, kind):
    x, y = blobs()
    assert np.mean(trained[kind].predict(x) == y) >= 0.95


def test_rejects_single_class_and_unseen_labels():
    x, y = blobs()
    with pytest.raises(DomainError):
        train_service_model(x, np.zeros_like(y), "lr")
    with pytest.raises(DomainError):
        train_service_model(x, y + 1, "lr", num_classes=2)
    with pytest.raises(DomainError):
        train_service_model(x[:1], y[:1], "lr", num_classes=2)
    with pytest.raises(DomainError):
        canonical_kind("svm")


def best_stump_accuracy(x, y):
    """Enumerate every axis-aligned threshold with majority leaves."""
    best = 0.0
    for f in range(x.shape[1]):
        vals = np.unique(x[:, f])
        for thr in np.concatenate([vals, [vals[0] - 1]]):
            left = x[:, f] <= thr
            correct = 0
            for side in (left, ~left):
                if side.any():
                    correct += np.bincount(y[side], minlength=2).max()
            best = max(best, correct / len(y))
    return best


def test_stump_cannot_solve_xor():
    x = np.array(list(itertools.product([-1.0, 1.0], repeat=2)) * 10)
    y = (x[:, 0] * x[:, 1] < 0).astype(int)
    assert best_stump_accuracy(x, y) == 0.5
    rf = train_service_model(x, y, "rf", ServiceConfig(n_trees=1, max_depth=1, bootstrap=False))
    acc = np.mean(rf.predict(x) == y)
    assert acc <= 0.75
    assert acc <= best_stump_accuracy(x, y)


def test_predict_argmax_and_tie_rule():
    assert predict(fixed_proba_model([0.2, 0.5, 0.3]), [0.0, 0.0]) == 1
    assert predict(fixed_proba_model([0.5, 0.5]), [3.0, -1.0]) == 0


def test_zero_weight_softmax_is_uniform():
    m = NetworkModel("softmax_regression", [nn.Layer(np.zeros((3, 5)), np.zeros(5))], 5, 3)
    assert predict_proba(m, [0.1, 0.2, 0.3]).tolist() == [0.2] * 5


@pytest.mark.parametrize("kind", KINDS)
def test_predict_agrees_with_proba_argmax(trained, kind):
    z = make_rng(4).uniform(-3, 3, (1000, 3))
    m = trained[kind]
    p = m.predict_proba(z)
    assert np.array_equal(m.predict(z), np.argmax(p, axis=1))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0)
    assert np.all(p >= 0)
    assert all(predict(m, row) == int(np.argmax(predict_proba(m, row))) for row in z[:20])


@pytest.mark.parametrize("kind", KINDS)
def test_prediction_deterministic(trained, kind):
    z = make_rng(6).uniform(-3, 3, (50, 3))
    assert np.array_equal(trained[kind].predict_proba(z), trained[kind].predict_proba(z))


def test_training_deterministic():
    x, y = blobs()
    for kind in KINDS:
        a = train_service_model(x, y, kind, FAST).predict_proba(x)
        b = train_service_model(x, y, kind, FAST).predict_proba(x)
        assert np.array_equal(a, b)


def test_single_pure_tree_gives_one_hot():
    x, y = blobs()
    rf = train_service_model(x, y, "rf", ServiceConfig(n_trees=1, bootstrap=False, max_depth=30))
    p = rf.predict_proba(x)
    assert set(np.unique(p)) <= {0.0, 1.0}
    assert np.array_equal(p.sum(axis=1), np.ones(len(x)))


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(10)))
def test_forest_invariant_to_tree_order(order):
    x, y = blobs(seed=1)
    rf = train_service_model(x, y, "rf", FAST)
    shuffled = RandomForest([rf.trees[i] for i in order], rf.num_classes, rf.input_dim)
    z = make_rng(2).uniform(-3, 3, (200, 3))
    assert np.array_equal(rf.predict_proba(z), shuffled.predict_proba(z))


def test_shape_errors(trained):
    for m in trained.values():
        with pytest.raises(ShapeError):
            m.predict([1.0, 2.0])


def test_tree_validation():
    good = DecisionTree(np.array([0, -1, -1]), np.array([0.0, 0, 0]), np.array([1, -1, -1]),
                        np.array([2, -1, -1]), np.array([[1.0, 1], [1, 0], [0, 1]]))
    good.validate(2)
    cyclic = DecisionTree(good.feature, good.threshold, np.array([1, 0, -1]), np.array([2, 0, -1]), good.value)
    with pytest.raises(DomainError):
        cyclic.validate(2)
    with pytest.raises(DomainError):
        RandomForest([good], 2, 0)


def test_latent_models_accurate_on_surrogate(small_models, small_data):
    ae, fit, test = small_models["ae"], small_models["fit"], small_data[1]
    for kind in KINDS:
        m = train_service_model(ae.encode(fit.features), fit.labels, kind, ServiceConfig(seed=0), 4)
        assert np.mean(m.predict(ae.encode(test.features)) == test.labels) >= 0.85


@pytest.mark.skipif(find_har_dir() is None, reason="UCI HAR data not available")
def test_latent_models_accurate_on_har():
    from leakguard.autoencoder import train_autoencoder
    from leakguard.pipeline import PipelineConfig
    train, test = load_uci_har(find_har_dir())
    ae = train_autoencoder(train.features, PipelineConfig().ae_config())
    for kind in KINDS:
        m = train_service_model(ae.encode(train.features), train.labels, kind, ServiceConfig(seed=0), 6)
        assert np.mean(m.predict(ae.encode(test.features)) == test.labels) >= 0.85
