"""CART decision trees and random forests with Gini splits.

Trees are stored as flat node arrays (``feature < 0`` marks a leaf); every
node keeps its class distribution and training cover so that path-dependent
Shapley values can be computed from the tree alone.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, asdict, field

import numba
import numpy as np

from .container import dumps_container, loads_container

LEAF = -1


class ModelError(ValueError):
    pass


@dataclass
class Tree:
    feature: np.ndarray    # int64, -1 at leaves
    threshold: np.ndarray  # float64, go left when x <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # (n_nodes, n_classes) class distribution
    cover: np.ndarray      # weighted training count reaching the node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_classes(self) -> int:
        return self.value.shape[1]

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for n in range(self.n_nodes):
            if self.feature[n] >= 0:
                depth[self.left[n]] = depth[n] + 1
                depth[self.right[n]] = depth[n] + 1
        return int(depth.max())

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        leaves = _apply_tree(X, self.feature, self.threshold, self.left, self.right)
        return self.value[leaves]

    def scaled(self, c: float) -> "Tree":
        return Tree(self.feature, self.threshold, self.left, self.right, self.value * c, self.cover)


@numba.njit(cache=True)
def _apply_tree(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        n = 0
        while feature[n] >= 0:
            if X[i, feature[n]] <= threshold[n]:
                n = left[n]
            else:
                n = right[n]
        out[i] = n
    return out


def _best_split(Xn, yk, w, feats, min_samples_leaf):
    """Best Gini split over ``feats`` (ascending) for one node.

    Returns ``(feature, threshold, score)`` or ``None``; ``score`` is the
    weighted child impurity times the node weight, ties resolved to the lowest
    feature index, then the lowest threshold.
    """
    n = Xn.shape[0]
    if n < 2:
        return None
    V = Xn[:, feats]
    order = np.argsort(V, axis=0, kind="stable")
    Vs = np.take_along_axis(V, order, axis=0)
    W = yk * w[:, None]                       # (n, K) weighted one-hot
    CL = np.cumsum(W[order], axis=0)[:-1]     # (n-1, m, K) left counts
    total = W.sum(axis=0)
    nL = CL.sum(axis=2)
    nN = total.sum()
    nR = nN - nL
    CR = total[None, None, :] - CL
    valid = (Vs[1:] > Vs[:-1]) & (nL >= min_samples_leaf) & (nR >= min_samples_leaf)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (nL - (CL * CL).sum(axis=2) / nL) + (nR - (CR * CR).sum(axis=2) / nR)
    score = np.where(valid, score, np.inf)
    flat = np.argmin(score.T.ravel())          # feature-major: lowest feature, then threshold
    j, i = divmod(int(flat), n - 1)
    lo, hi = Vs[i, j], Vs[i + 1, j]
    thr = lo + (hi - lo) / 2.0
    if not thr < hi:
        thr = lo
    return int(feats[j]), float(thr), float(score[i, j])


def train_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, feature_subsample: int | None = None,
               n_classes: int | None = None, sample_weight: np.ndarray | None = None,
               max_depth: int | None = None, min_samples_split: int = 2, min_samples_leaf: int = 1) -> Tree:
    """Grow one CART tree greedily on Gini impurity.

    ``feature_subsample`` features are drawn per node; if none of them admits
    a split the next features of the same random permutation are tried.
    ``sample_weight`` holds integer multiplicities (bootstrap counts).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ModelError("train_tree needs a non-empty 2-D matrix")
    if len(y) != len(X):
        raise ModelError("rows and labels differ in length")
    if not np.isfinite(X).all():
        raise ModelError("non-finite feature values")
    K = int(n_classes if n_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= K:
        raise ModelError("labels outside class range")
    n_features = X.shape[1]
    m = n_features if feature_subsample is None else max(1, min(int(feature_subsample), n_features))
    w_all = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    keep = np.flatnonzero(w_all > 0)
    onehot = np.zeros((len(X), K))
    onehot[np.arange(len(X)), y] = 1.0

    feature, threshold, left, right, value, cover = [], [], [], [], [], []
    # stack entries: (row indices, depth, parent id, is_left)
    stack = [(keep, 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        node = len(feature)
        if parent >= 0:
            (left if is_left else right)[parent] = node
        w = w_all[idx]
        counts = (onehot[idx] * w[:, None]).sum(axis=0)
        total = counts.sum()
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(counts / total)
        cover.append(total)
        if counts.max() == total or total < min_samples_split or (max_depth is not None and depth >= max_depth):
            continue
        perm = rng.permutation(n_features)
        found = None
        for start in range(0, n_features, m):
            feats = np.sort(perm[start:start + m])
            found = _best_split(X[idx], onehot[idx], w, feats, min_samples_leaf)
            if found is not None:
                break
        if found is None:
            continue
        f, thr, _ = found
        go_left = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        stack.append((idx[~go_left], depth + 1, node, False))
        stack.append((idx[go_left], depth + 1, node, True))

    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold), np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64), np.vstack(value), np.asarray(cover))


@dataclass
class ForestConfig:
    n_estimators: int = 300
    criterion: str = "gini"
    max_depth: int | None = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: str | int | None = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def n_subsample(self, n_features: int) -> int:
        mf = self.max_features
        if mf is None:
            return n_features
        if mf == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if mf == "log2":
            return max(1, int(math.log2(n_features)))
        return max(1, min(int(mf), n_features))

    def validate(self) -> None:
        if self.criterion != "gini":
            raise ModelError("only the gini criterion is supported")
        if self.n_estimators < 1:
            raise ModelError("n_estimators must be >= 1")
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise ModelError("min_samples_split >= 2 and min_samples_leaf >= 1 required")


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    n_classes: int
    config: ForestConfig = field(default_factory=ForestConfig)
    schema_version: str = ""

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ModelError(f"expected {self.n_features} features, got shape {X.shape}")
        out = np.zeros((len(X), self.n_classes))
        for t in self.trees:
            out += t.predict_proba(X)
        return out / len(self.trees)

    def scaled(self, c: float) -> "Forest":
        return Forest([t.scaled(c) for t in self.trees], self.n_features, self.n_classes, self.config,
                      self.schema_version)

    def to_bytes(self) -> bytes:
        sizes = np.array([t.n_nodes for t in self.trees], dtype=np.int64)
        arrays = {
            "tree_sizes": sizes,
            "feature": np.concatenate([t.feature for t in self.trees]),
            "threshold": np.concatenate([t.threshold for t in self.trees]),
            "left": np.concatenate([t.left for t in self.trees]),
            "right": np.concatenate([t.right for t in self.trees]),
            "value": np.concatenate([t.value for t in self.trees]),
            "cover": np.concatenate([t.cover for t in self.trees]),
        }
        header = {"model": "random_forest", "hyperparameters": asdict(self.config),
                  "n_features": self.n_features, "n_classes": self.n_classes,
                  "schema_version": self.schema_version}
        return dumps_container(header, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Forest":
        header, a = loads_container(data)
        if header.get("model") != "random_forest":
            raise ModelError("container does not hold a random forest")
        trees = []
        pos = 0
        for n in a["tree_sizes"]:
            s = slice(pos, pos + int(n))
            trees.append(Tree(a["feature"][s].copy(), a["threshold"][s].copy(), a["left"][s].copy(),
                              a["right"][s].copy(), a["value"][s].copy(), a["cover"][s].copy()))
            pos += int(n)
        return cls(trees, header["n_features"], header["n_classes"], ForestConfig(**header["hyperparameters"]),
                   header.get("schema_version", ""))


def _fit_one(X, y, n_classes, cfg: ForestConfig, seed_seq) -> Tree:
    rng = np.random.default_rng(seed_seq)
    weight = None
    if cfg.bootstrap:
        weight = np.bincount(rng.integers(0, len(X), len(X)), minlength=len(X)).astype(np.float64)
    return train_tree(X, y, rng, cfg.n_subsample(X.shape[1]), n_classes, weight, cfg.max_depth,
                      cfg.min_samples_split, cfg.min_samples_leaf)


def n_threads() -> int:
    try:
        cap = int(os.environ.get("PHENOICU_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, os.cpu_count() or 1))


def train_forest(X: np.ndarray, y: np.ndarray, cfg: ForestConfig | None = None, n_classes: int | None = None,
                 schema_version: str = "") -> Forest:
    """Fit ``cfg.n_estimators`` trees on bootstrap resamples.

    Each tree draws from its own child seed of ``cfg.seed``, so the result is
    independent of scheduling and of ``PHENOICU_THREADS``.
    """
    cfg = cfg or ForestConfig()
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ModelError("empty training matrix")
    K = int(n_classes if n_classes is not None else max(2, y.max() + 1))
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_estimators)
    jobs = n_threads()
    if jobs > 1:
        from joblib import Parallel, delayed
        trees = Parallel(n_jobs=jobs)(delayed(_fit_one)(X, y, K, cfg, s) for s in seeds)
    else:
        trees = [_fit_one(X, y, K, cfg, s) for s in seeds]
    return Forest(trees, X.shape[1], K, cfg, schema_version)
