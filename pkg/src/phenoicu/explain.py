"""Shapley attributions: exact subset enumeration, tree algorithms, importance and timelines.

Two conditional-expectation semantics are available:

``marginal``
    features outside a coalition are replaced by background rows and the
    model output is averaged (the interventional tree algorithm computes this
    exactly for forests);
``tree_path_dependent``
    features outside a coalition are integrated out by following both
    branches of every split on them, weighted by training cover.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _treeshap
from .models.forest import Forest, ModelError, Tree

MARGINAL = "marginal"
PATH_DEPENDENT = "tree_path_dependent"
INTERVENTIONAL = "interventional"
SUBSET_LIMIT = 14


class ExplainError(ValueError):
    pass


@dataclass
class Explanation:
    """Attributions for a batch of rows: ``prediction ~= base_value + phi.sum(axis=1)``."""

    base_value: float
    phi: np.ndarray          # (n, M)
    prediction: np.ndarray   # (n,)
    values: np.ndarray       # (n, M) explained inputs
    output: str = "p(class=1)"
    semantics: str = PATH_DEPENDENT

    def __len__(self):
        return self.phi.shape[0]

    def additivity_error(self) -> float:
        return float(np.max(np.abs(self.prediction - (self.base_value + self.phi.sum(axis=1)))))

    def row(self, i: int) -> "Explanation":
        return Explanation(self.base_value, self.phi[i:i + 1], self.prediction[i:i + 1], self.values[i:i + 1],
                           self.output, self.semantics)


def output_weights(n_classes: int, output: int | Sequence[int] | None = None) -> tuple[np.ndarray, str]:
    """Linear functional over class probabilities that is being explained.

    ``None`` means the positive class of a binary model; a sequence sums a
    group of classes (e.g. the two long-stay classes).
    """
    w = np.zeros(n_classes)
    if output is None:
        if n_classes != 2:
            raise ExplainError("choose a class or class group to explain for multiclass models")
        output = 1
    if isinstance(output, (int, np.integer)):
        w[int(output)] = 1.0
        return w, f"p(class={int(output)})"
    classes = sorted(int(c) for c in output)
    w[classes] = 1.0
    return w, "p(class in {" + ",".join(map(str, classes)) + "})"


# ---------------------------------------------------------------------------
# exact enumeration


def _popcount(masks: np.ndarray) -> np.ndarray:
    counts = np.zeros_like(masks)
    m = masks.copy()
    while m.any():
        counts += m & 1
        m >>= 1
    return counts


def _shapley_from_values(v: np.ndarray, M: int) -> np.ndarray:
    """phi_i = sum_{S not containing i} |S|!(M-|S|-1)!/M! [v(S+i) - v(S)] over bitmask-indexed v."""
    masks = np.arange(1 << M, dtype=np.int64)
    size = _popcount(masks)
    w = np.array([math.factorial(k) * math.factorial(M - k - 1) / math.factorial(M) for k in range(M)])
    phi = np.zeros(M)
    for i in range(M):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(w[size[without]] * (v[without | bit] - v[without]))
    return phi


def _coalition_matrix(M: int) -> np.ndarray:
    masks = np.arange(1 << M, dtype=np.int64)
    return ((masks[:, None] >> np.arange(M)[None, :]) & 1).astype(bool)


def marginal_values(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, background: np.ndarray) -> np.ndarray:
    """v(S) = mean over background rows b of f(x on S, b elsewhere), for every S."""
    M = len(x)
    C = _coalition_matrix(M)
    out = np.empty(len(C))
    chunk = max(1, 200_000 // max(1, len(background)))
    for start in range(0, len(C), chunk):
        c = C[start:start + chunk]
        hybrid = np.where(c[:, None, :], x[None, None, :], background[None, :, :])
        vals = np.asarray(f(hybrid.reshape(-1, M)), dtype=np.float64).reshape(len(c), len(background))
        out[start:start + len(c)] = vals.mean(axis=1)
    return out


def tree_path_values(forest: Forest, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """v(S) under cover-weighted integration of features outside S, for every S."""
    M = len(x)
    C = _coalition_matrix(M)
    total = np.zeros(len(C))
    for tree in forest.trees:
        leaf_val = tree.value @ weights
        E = [None] * tree.n_nodes
        for node in range(tree.n_nodes - 1, -1, -1):
            f = tree.feature[node]
            if f < 0:
                E[node] = np.full(len(C), leaf_val[node])
                continue
            l, r = tree.left[node], tree.right[node]
            follow = E[l] if x[f] <= tree.threshold[node] else E[r]
            mix = (tree.cover[l] * E[l] + tree.cover[r] * E[r]) / tree.cover[node]
            E[node] = np.where(C[:, f], follow, mix)
        total += E[0]
    return total / len(forest.trees)


def exact_shapley(model, x: np.ndarray, background: np.ndarray | None = None, semantics: str = MARGINAL,
                  output: int | Sequence[int] | None = None, subset_limit: int = SUBSET_LIMIT) -> Explanation:
    """Shapley values by enumerating all 2^M coalitions.

    ``model`` is a callable returning one number per row, or any object with
    ``predict_proba`` (its output is reduced with ``output``). The
    ``tree_path_dependent`` semantics requires a :class:`Forest`.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    M = len(x)
    if M > subset_limit:
        raise ExplainError(f"{M} features exceed the enumeration limit of {subset_limit}")
    label = "f(x)"
    if hasattr(model, "predict_proba"):
        w, label = output_weights(model.n_classes, output)
        f = lambda X: model.predict_proba(X) @ w  # noqa: E731
    else:
        f = model
    if semantics == MARGINAL:
        if background is None or len(background) == 0:
            raise ExplainError("marginal semantics needs a non-empty background set")
        background = np.asarray(background, dtype=np.float64)
        if background.ndim != 2 or background.shape[1] != M:
            raise ExplainError("background width does not match the explained row")
        v = marginal_values(f, x, background)
    elif semantics == PATH_DEPENDENT:
        if not isinstance(model, Forest):
            raise ExplainError("tree_path_dependent semantics needs a forest")
        w, label = output_weights(model.n_classes, output)
        v = tree_path_values(model, x, w)
    else:
        raise ExplainError(f"unknown semantics {semantics!r}")
    phi = _shapley_from_values(v, M)
    return Explanation(float(v[0]), phi[None, :], np.array([v[-1]]), x[None, :], label,
                       semantics)


# ---------------------------------------------------------------------------
# tree algorithms


def _tree_tables(tree: Tree):
    return _treeshap.leaf_paths(tree.feature, tree.threshold, tree.left, tree.right, tree.cover)


def tree_expected_value(tree: Tree, weights: np.ndarray) -> float:
    leaves = tree.feature < 0
    return float(np.sum(tree.value[leaves] @ weights * tree.cover[leaves]) / tree.cover[0])


def tree_shapley(forest: Forest, X: np.ndarray, output: int | Sequence[int] | None = None,
                 background: np.ndarray | None = None) -> Explanation:
    """Shapley values of a forest in polynomial time, averaged over its trees.

    Without ``background`` the tree-path-dependent semantics is used and the
    base value is the cover-weighted expected output. With ``background`` the
    marginal (interventional) semantics is computed exactly against those
    reference rows and the base value is their mean prediction.
    """
    if not isinstance(forest, Forest):
        raise ExplainError("tree_shapley needs a random forest; recurrent models are not explained")
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if X.shape[1] != forest.n_features:
        raise ExplainError(f"expected {forest.n_features} features, got {X.shape[1]}")
    w, label = output_weights(forest.n_classes, output)
    phi = np.zeros(X.shape)
    if background is None:
        base = 0.0
        for tree in forest.trees:
            leaves, n_unique, ufeat, zfrac, n_split, sfeat, sthr, sleft, sidx = _tree_tables(tree)
            leaf_value = tree.value[leaves] @ w
            weights = _treeshap.shapley_weights(ufeat.shape[1])
            _treeshap.path_dependent_phi(X, leaf_value, n_unique, ufeat, zfrac, n_split, sfeat, sthr, sleft,
                                         sidx, weights, phi)
            base += tree_expected_value(tree, w)
        semantics = PATH_DEPENDENT
    else:
        R = np.ascontiguousarray(np.atleast_2d(np.asarray(background, dtype=np.float64)))
        if len(R) == 0 or R.shape[1] != forest.n_features:
            raise ExplainError("background must be a non-empty matrix of matching width")
        fact = np.array([math.factorial(k) for k in range(X.shape[1] + 2)], dtype=np.float64)
        for tree in forest.trees:
            leaf_value = tree.value @ w
            _treeshap.interventional_phi(X, R, tree.feature, tree.threshold, tree.left, tree.right, leaf_value,
                                         fact, phi)
        base = float(np.mean(forest.predict_proba(R) @ w)) * len(forest.trees)
        semantics = MARGINAL
    n_trees = len(forest.trees)
    pred = forest.predict_proba(X) @ w
    return Explanation(base / n_trees, phi / n_trees, pred, X, label, semantics)


# ---------------------------------------------------------------------------
# reports


@dataclass
class ImportanceReport:
    names: list[str]
    mean_abs: np.ndarray
    ranking: list[str]
    explanation: Explanation

    def top(self, k: int) -> list[str]:
        return self.ranking[:k]

    def rank_of(self, name: str) -> int:
        return self.ranking.index(name) + 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "feature", "mean_abs_shap"])
        idx = {n: i for i, n in enumerate(self.names)}
        for r, name in enumerate(self.ranking, start=1):
            w.writerow([r, name, repr(float(self.mean_abs[idx[name]]))])
        return buf.getvalue()

    def beeswarm_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "sample", "value", "shap"])
        e = self.explanation
        for name in self.ranking:
            j = self.names.index(name)
            for i in range(len(e)):
                w.writerow([name, i, repr(float(e.values[i, j])), repr(float(e.phi[i, j]))])
        return buf.getvalue()


def rank_features(names: Sequence[str], mean_abs: np.ndarray) -> list[str]:
    return [names[j] for j in sorted(range(len(names)), key=lambda j: (-mean_abs[j], names[j]))]


def importance_report(model: Forest, X: np.ndarray, names: Sequence[str],
                      output: int | Sequence[int] | None = None, background: np.ndarray | None = None
                      ) -> ImportanceReport:
    """Mean |SHAP| per feature over ``X``, ranked in decreasing order (ties by name)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ExplainError("importance_report needs at least one row")
    if len(names) != X.shape[1]:
        raise ExplainError("feature names do not match matrix width")
    e = tree_shapley(model, X, output, background)
    mean_abs = np.abs(e.phi).mean(axis=0)
    return ImportanceReport(list(names), mean_abs, rank_features(list(names), mean_abs), e)


@dataclass
class Timeline:
    hours: np.ndarray
    names: list[str]
    explanation: Explanation

    @property
    def phi(self) -> np.ndarray:
        return self.explanation.phi

    def importance(self) -> np.ndarray:
        return np.abs(self.phi).mean(axis=0)

    def ordered_features(self) -> list[str]:
        return rank_features(self.names, self.importance())

    def normalized_prediction(self) -> np.ndarray:
        p = self.explanation.prediction
        span = p.max() - p.min()
        return np.zeros_like(p) if span == 0 else (p - p.min()) / span

    def heatmap_csv(self, top: int | None = None) -> str:
        e = self.explanation
        imp = self.importance()
        order = self.ordered_features()[:top]
        norm = self.normalized_prediction()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["hour", "feature", "shap", "value", "prediction", "prediction_minmax", "importance"])
        for t, hour in enumerate(self.hours):
            for name in order:
                j = self.names.index(name)
                w.writerow([int(hour), name, repr(float(e.phi[t, j])), repr(float(e.values[t, j])),
                            repr(float(e.prediction[t])), repr(float(norm[t])), repr(float(imp[j]))])
        return buf.getvalue()

    def force_csv(self, hour: int, top: int | None = None) -> str:
        e = self.explanation
        t = int(np.flatnonzero(self.hours == hour)[0])
        order = sorted(range(len(self.names)), key=lambda j: (-abs(e.phi[t, j]), self.names[j]))[:top]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["hour", "feature", "value", "shap", "base_value", "prediction"])
        for j in order:
            w.writerow([int(hour), self.names[j], repr(float(e.values[t, j])), repr(float(e.phi[t, j])),
                        repr(float(e.base_value)), repr(float(e.prediction[t]))])
        return buf.getvalue()


def patient_timeline(model: Forest, rows: np.ndarray, names: Sequence[str], hours: Sequence[int] | None = None,
                     output: int | Sequence[int] | None = None, background: np.ndarray | None = None) -> Timeline:
    """One explanation per hour of a single episode, rows ordered by hour."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    hours = np.arange(len(rows)) if hours is None else np.asarray(hours)
    if len(hours) != len(rows):
        raise ExplainError("hours and rows differ in length")
    if len(hours) > 1 and (np.diff(hours) <= 0).any():
        raise ExplainError("rows must be ordered by strictly increasing hour")
    return Timeline(hours, list(names), tree_shapley(model, rows, output, background))


__all__ = [
    "Explanation", "ImportanceReport", "Timeline", "exact_shapley", "tree_shapley", "importance_report",
    "patient_timeline", "marginal_values", "tree_path_values", "output_weights", "ModelError",
]
