import numpy as np
import pytest

from phenoicu.models.container import ContainerError, dumps_container, loads_container
from phenoicu.models.forest import LEAF, Forest, ForestConfig, ModelError, Tree, train_forest, train_tree


def leaf(dist):
    d = np.asarray([dist], dtype=float)
    return Tree(np.array([LEAF]), np.array([0.0]), np.array([-1]), np.array([-1]), d, np.array([1.0]))


def test_pure_node_is_single_leaf(rng):
    t = train_tree(rng.normal(size=(10, 3)), np.ones(10, dtype=int), rng, n_classes=2)
    assert t.n_nodes == 1
    assert np.allclose(t.value[0], [0, 1])


def test_one_dimensional_split(rng):
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    t = train_tree(X, np.array([0, 0, 1, 1]), rng)
    assert t.n_nodes == 3
    assert t.feature[0] == 0 and 1.0 < t.threshold[0] < 2.0


def test_identical_rows_different_labels(rng):
    t = train_tree(np.zeros((2, 2)), np.array([0, 1]), rng)
    assert t.n_nodes == 1
    assert np.allclose(t.value[0], [0.5, 0.5])


def test_tie_break_lowest_feature(rng):
    X = np.array([[0, 0], [0, 0], [1, 1], [1, 1]], dtype=float)
    t = train_tree(X, np.array([0, 0, 1, 1]), rng)
    assert t.feature[0] == 0 and t.threshold[0] == 0.5


def test_empty_input_rejected(rng):
    with pytest.raises(ModelError):
        train_tree(np.zeros((0, 2)), np.zeros(0, dtype=int), rng)
    with pytest.raises(ModelError):
        train_forest(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_default_hyperparameters():
    cfg = ForestConfig()
    assert (cfg.n_estimators, cfg.criterion, cfg.max_depth, cfg.min_samples_split, cfg.min_samples_leaf) == \
        (300, "gini", None, 2, 1)
    assert cfg.n_subsample(64) == 8


def test_single_class_forest(rng):
    f = train_forest(rng.normal(size=(20, 3)), np.zeros(20, dtype=int), ForestConfig(n_estimators=5), 2)
    assert np.allclose(f.predict_proba(rng.normal(size=(5, 3))), [[1, 0]] * 5)


def test_separable_blobs(rng):
    X = np.vstack([rng.normal(0, 1, (200, 2)), rng.normal(4, 1, (200, 2))])
    y = np.r_[np.zeros(200, int), np.ones(200, int)]
    f = train_forest(X, y, ForestConfig(n_estimators=25, seed=1))
    Xt = np.vstack([rng.normal(0, 1, (100, 2)), rng.normal(4, 1, (100, 2))])
    yt = np.r_[np.zeros(100, int), np.ones(100, int)]
    assert (f.predict_proba(Xt).argmax(1) == yt).mean() >= 0.95


def test_deterministic_serialization(rng):
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] > 0).astype(int)
    cfg = ForestConfig(n_estimators=7, seed=3)
    a, b = train_forest(X, y, cfg), train_forest(X, y, cfg)
    assert a.to_bytes() == b.to_bytes()
    again = Forest.from_bytes(a.to_bytes())
    assert np.array_equal(again.predict_proba(X), a.predict_proba(X))
    assert train_forest(X, y, ForestConfig(n_estimators=7, seed=4)).to_bytes() != a.to_bytes()


def test_thread_count_does_not_change_result(rng, monkeypatch):
    X = rng.normal(size=(60, 4))
    y = (X[:, 1] > 0).astype(int)
    cfg = ForestConfig(n_estimators=6, seed=2)
    monkeypatch.setenv("PHENOICU_THREADS", "1")
    one = train_forest(X, y, cfg).to_bytes()
    monkeypatch.setenv("PHENOICU_THREADS", "4")
    assert train_forest(X, y, cfg).to_bytes() == one


def test_prediction_averaging_and_order():
    f = Forest([leaf([1, 0]), leaf([0, 1])], 2, 2)
    assert np.allclose(f.predict_proba(np.zeros((1, 2))), [[0.5, 0.5]])
    assert np.allclose(Forest([leaf([1, 0])], 2, 2).predict_proba(np.zeros((1, 2))), [[1, 0]])
    g = Forest([leaf([0, 1]), leaf([1, 0])], 2, 2)
    assert np.allclose(g.predict_proba(np.zeros((1, 2))), f.predict_proba(np.zeros((1, 2))))
    with pytest.raises(ModelError):
        f.predict_proba(np.zeros((1, 3)))


def test_probabilities_valid(rng):
    X = rng.normal(size=(100, 5))
    y = rng.integers(0, 3, 100)
    f = train_forest(X, y, ForestConfig(n_estimators=10, seed=0), 3)
    p = f.predict_proba(rng.normal(size=(50, 5)))
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(1), 1, atol=1e-9)
    for t in f.trees:
        assert np.allclose(t.value.sum(1), 1, atol=1e-12)
        assert np.all(np.isfinite(t.threshold))


def test_duplicated_training_set_same_structure(rng):
    X = rng.normal(size=(40, 3))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    a = train_tree(X, y, np.random.default_rng(0), feature_subsample=None)
    b = train_tree(np.vstack([X, X]), np.r_[y, y], np.random.default_rng(0), feature_subsample=None)
    assert np.array_equal(a.feature, b.feature)
    assert np.array_equal(a.threshold, b.threshold)


def test_container_round_trip_and_corruption():
    data = dumps_container({"a": 1}, {"x": np.arange(3.0), "y": np.eye(2, dtype=np.int64)})
    header, arrays = loads_container(data)
    assert header["a"] == 1 and np.array_equal(arrays["y"], np.eye(2))
    with pytest.raises(ContainerError):
        loads_container(b"garbage" + data)
