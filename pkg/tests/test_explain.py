import numpy as np
import pytest

from phenoicu.explain import (ExplainError, exact_shapley, importance_report, patient_timeline, tree_shapley)
from phenoicu.models.forest import LEAF, Forest, ForestConfig, Tree, train_forest


def random_forest(rng, M=None, n_trees=None, depth=None, n_classes=2, n=80):
    M = M or int(rng.integers(2, 13))
    X = rng.integers(0, 4, size=(n, M)).astype(float)
    y = rng.integers(0, n_classes, n)
    cfg = ForestConfig(n_estimators=n_trees or int(rng.integers(1, 6)), max_depth=depth or int(rng.integers(1, 5)),
                       max_features=None, seed=int(rng.integers(1 << 30)))
    return train_forest(X, y, cfg, n_classes), X


def stump(feature, M, lo=0.2, hi=0.8):
    return Tree(np.array([feature, LEAF, LEAF]), np.array([0.5, 0.0, 0.0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([[0.0, 0.0], [1 - lo, lo], [1 - hi, hi]]), np.array([4.0, 1.0, 3.0]))


def test_additive_model_closed_form(rng):
    bg = rng.normal(size=(30, 2))
    x = np.array([1.5, -0.5])
    e = exact_shapley(lambda X: X[:, 0] + X[:, 1], x, bg)
    assert np.allclose(e.phi[0], x - bg.mean(0), atol=1e-12)


def test_constant_model_has_zero_phi(rng):
    e = exact_shapley(lambda X: np.full(len(X), 3.0), np.ones(4), rng.normal(size=(5, 4)))
    assert np.all(e.phi == 0) and e.base_value == 3.0


def test_symmetric_product(rng):
    v = rng.normal(size=10)
    bg = np.c_[v, v]
    e = exact_shapley(lambda X: X[:, 0] * X[:, 1], np.array([2.0, 2.0]), bg)
    assert e.phi[0, 0] == pytest.approx(e.phi[0, 1], abs=1e-12)


def test_exact_limit_and_errors(rng):
    with pytest.raises(ExplainError):
        exact_shapley(lambda X: X[:, 0], np.zeros(15), np.zeros((1, 15)))
    with pytest.raises(ExplainError):
        exact_shapley(lambda X: X[:, 0], np.zeros(3), np.zeros((0, 3)))


def test_single_leaf_tree():
    f = Forest([Tree(np.array([LEAF]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([[0.3, 0.7]]),
                     np.array([1.0]))], 5, 2)
    e = tree_shapley(f, np.ones((2, 5)))
    assert np.all(e.phi == 0) and e.base_value == pytest.approx(0.7)


def test_stump_touches_only_its_feature():
    f = Forest([stump(3, 6)], 6, 2)
    e = tree_shapley(f, np.ones((1, 6)))
    assert np.flatnonzero(e.phi[0]).tolist() == [3]
    assert e.additivity_error() < 1e-12


@pytest.mark.parametrize("semantics", ["tree_path_dependent", "marginal"])
def test_tree_matches_exact_oracle(rng, semantics):
    for _ in range(8):
        forest, X = random_forest(rng)
        bg = X[:12] if semantics == "marginal" else None
        xs = rng.integers(0, 4, size=(5, X.shape[1])).astype(float)
        fast = tree_shapley(forest, xs, background=bg)
        assert fast.additivity_error() < 1e-6
        for i, x in enumerate(xs):
            slow = exact_shapley(forest, x, bg, semantics=semantics)
            assert np.max(np.abs(slow.phi[0] - fast.phi[i])) < 1e-9
            assert slow.additivity_error() < 1e-10
            assert slow.base_value == pytest.approx(fast.base_value, abs=1e-12)


def test_dummy_linearity_and_scaling(rng):
    forest, X = random_forest(rng, M=8, n_trees=4, depth=3)
    xs = X[:10]
    e = tree_shapley(forest, xs)
    used = set()
    for t in forest.trees:
        used |= set(t.feature[t.feature >= 0].tolist())
    for j in set(range(8)) - used:
        assert np.all(e.phi[:, j] == 0)
    per_tree = [tree_shapley(Forest([t], 8, 2), xs).phi for t in forest.trees]
    assert np.allclose(np.mean(per_tree, axis=0), e.phi, atol=1e-12)
    scaled = tree_shapley(forest.scaled(0.5), xs)
    assert np.allclose(scaled.phi, 0.5 * e.phi, atol=1e-12)
    assert scaled.base_value == pytest.approx(0.5 * e.base_value)


def test_symmetry_under_feature_swap(rng):
    f = Forest([stump(0, 2), stump(1, 2)], 2, 2)
    e = tree_shapley(f, np.array([[1.0, 1.0]]))
    assert e.phi[0, 0] == pytest.approx(e.phi[0, 1])


def test_multiclass_output_selection(rng):
    forest, X = random_forest(rng, M=5, n_trees=3, depth=3, n_classes=10, n=200)
    total = sum(tree_shapley(forest, X[:3], output=k).phi for k in range(10))
    assert np.allclose(total, 0, atol=1e-12)
    grp = tree_shapley(forest, X[:3], output=[8, 9])
    assert np.allclose(grp.phi, tree_shapley(forest, X[:3], output=8).phi + tree_shapley(forest, X[:3], output=9).phi)


def test_importance_ranks_used_feature_first(rng):
    X = rng.normal(size=(200, 4))
    y = (X[:, 2] > 0).astype(int)
    f = train_forest(X, y, ForestConfig(n_estimators=10, max_features=None, seed=0))
    names = ["a", "b", "c", "d"]
    rep = importance_report(f, X[:50], names)
    assert rep.top(1) == ["c"]
    dup = importance_report(f, np.vstack([X[:50], X[:50]]), names)
    assert dup.ranking == rep.ranking and np.allclose(dup.mean_abs, rep.mean_abs)


def test_timeline_properties(rng):
    Xtr = rng.integers(0, 2, size=(300, 3)).astype(float)
    y = Xtr[:, 0].astype(int)
    f = train_forest(Xtr, y, ForestConfig(n_estimators=5, max_features=None, seed=0))
    const = patient_timeline(f, np.tile([1.0, 0.0, 1.0], (6, 1)), ["a", "b", "c"])
    assert np.allclose(const.phi, const.phi[0])
    rows = np.zeros((48, 3))
    rows[42:, 0] = 1
    bg = Xtr[Xtr[:, 0] == 0]
    tl = patient_timeline(f, rows, ["a", "b", "c"], background=bg)
    assert np.all(tl.phi[:42, 0] == 0)
    assert np.all(tl.phi[42:, 0] != 0)
    e = tl.explanation
    assert np.allclose(e.prediction, e.base_value + e.phi.sum(1), atol=1e-9)
    for h in (41, 42):
        ex = exact_shapley(f, rows[h], bg)
        assert np.allclose(ex.phi[0], tl.phi[h], atol=1e-9)
    lines = tl.heatmap_csv().splitlines()
    assert lines[0].startswith("hour,feature,shap") and len(lines) == 1 + 48 * 3
    with pytest.raises(ExplainError):
        patient_timeline(f, rows[::-1], ["a", "b", "c"], hours=np.arange(48)[::-1])


def test_non_forest_rejected():
    with pytest.raises(ExplainError):
        tree_shapley(object(), np.zeros((1, 2)))
