"""Metrics, calibration, bootstrap confidence intervals and pairwise significance matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .tasks import los_class

# representative remaining hours per length-of-stay class; open bins use
# 12 h (under a day) and 18 days (over two weeks)
LOS_REPRESENTATIVE_HOURS = (12, 36, 60, 84, 108, 132, 156, 180, 264, 432)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class CI:
    lo: float
    hi: float
    level: float = 0.95
    n_resamples: int = 0
    n_skipped: int = 0

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    ci: CI | None = None

    def __float__(self):
        return float(self.value)

    def to_dict(self) -> dict:
        d = {"name": self.name, "value": self.value}
        if self.ci is not None:
            d["ci"] = {"lo": self.ci.lo, "hi": self.ci.hi, "level": self.ci.level,
                       "n_resamples": self.ci.n_resamples, "n_skipped": self.ci.n_skipped}
        return d


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return s, y.astype(np.int64)


def auc_roc(scores, labels) -> MetricValue:
    """Probability that a random positive outscores a random negative, ties counted 1/2."""
    s, y = _binary(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC-ROC needs both classes")
    r = rankdata(s)
    return MetricValue("AUC-ROC", float((r[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)))


def auc_pr(scores, labels) -> MetricValue:
    """Average precision: sum over distinct thresholds of recall gain times precision."""
    s, y = _binary(scores, labels)
    n1 = int(y.sum())
    if n1 == 0:
        raise MetricError("AUC-PR needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]   # end of each tie group
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n1
    gain = np.diff(np.r_[0.0, recall])
    return MetricValue("AUC-PR", float(np.sum(gain * precision)))


def kappa(pred_classes, true_classes, weighting: str = "linear", n_classes: int | None = None) -> MetricValue:
    """Cohen's kappa ``1 - sum(w O) / sum(w E)``; linear weights |i-j| by default, 0/1 when unweighted."""
    p = np.asarray(pred_classes, dtype=np.int64).ravel()
    t = np.asarray(true_classes, dtype=np.int64).ravel()
    if len(p) == 0:
        raise MetricError("kappa of an empty set")
    if p.shape != t.shape:
        raise MetricError("predictions and truth differ in length")
    K = int(n_classes or max(p.max(), t.max()) + 1)
    O = np.zeros((K, K))
    np.add.at(O, (t, p), 1.0)
    O /= O.sum()
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    i, j = np.indices((K, K))
    if weighting == "linear":
        W = np.abs(i - j).astype(float)
    elif weighting in ("none", None):
        W = (i != j).astype(float)
    elif weighting == "quadratic":
        W = ((i - j) ** 2).astype(float)
    else:
        raise MetricError(f"unknown weighting {weighting!r}")
    denom = (W * E).sum()
    if denom == 0:
        raise MetricError("kappa undefined: a single class in both vectors")
    return MetricValue("Kappa", float(1.0 - (W * O).sum() / denom))


def mad(pred_classes, true_remaining_hours) -> MetricValue:
    """Mean |representative hours of the predicted class - true remaining hours|."""
    p = np.asarray(pred_classes, dtype=np.int64).ravel()
    h = np.asarray(true_remaining_hours, dtype=np.float64).ravel()
    if len(p) == 0:
        raise MetricError("MAD of an empty set")
    if p.shape != h.shape:
        raise MetricError("predictions and truth differ in length")
    reps = np.asarray(LOS_REPRESENTATIVE_HOURS, dtype=np.float64)
    return MetricValue("MAD", float(np.mean(np.abs(reps[p] - h))))


def brier(probs, labels) -> MetricValue:
    p, y = _binary(probs, labels)
    if ((p < 0) | (p > 1)).any():
        raise MetricError("probabilities must lie in [0, 1]")
    return MetricValue("Brier", float(np.mean((p - y) ** 2)) if len(p) else 0.0)


def calibration_curve(probs, labels, n_bins: int = 10) -> list[tuple[float, float, int]]:
    """(mean predicted, observed frequency, count) per non-empty equal-width bin."""
    p, y = _binary(probs, labels)
    if ((p < 0) | (p > 1)).any():
        raise MetricError("probabilities must lie in [0, 1]")
    b = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    out = []
    for k in range(n_bins):
        sel = b == k
        n = int(sel.sum())
        if n:
            out.append((float(p[sel].mean()), float(y[sel].mean()), n))
    return out


def _resample_indices(n: int, seed: int, b: int) -> np.ndarray:
    return np.random.default_rng([seed, b]).integers(0, n, n)


def bootstrap_ci(metric: Callable[..., float | MetricValue], samples: Sequence[np.ndarray], n_resamples: int = 1000,
                 seed: int = 0, level: float = 0.95) -> CI:
    """Percentile interval of ``metric`` over resamples of the aligned ``samples`` arrays.

    Resamples on which the metric is undefined (e.g. a single class) are
    skipped and counted.
    """
    if n_resamples < 100:
        raise MetricError("use at least 100 resamples")
    arrays = [np.asarray(a) for a in samples]
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise MetricError("samples are not aligned")
    values = []
    skipped = 0
    for b in range(n_resamples):
        idx = _resample_indices(n, seed, b)
        try:
            values.append(float(metric(*(a[idx] for a in arrays))))
        except MetricError:
            skipped += 1
    if not values:
        raise MetricError("every resample was degenerate")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return CI(float(lo), float(hi), level, n_resamples, skipped)


def with_ci(metric: Callable, samples: Sequence[np.ndarray], n_resamples: int = 1000, seed: int = 0,
            level: float = 0.95) -> MetricValue:
    point = metric(*samples)
    ci = bootstrap_ci(metric, samples, n_resamples, seed, level)
    return MetricValue(point.name, point.value, ci)


@dataclass
class SignificanceMatrix:
    """``wins[i][j]``: percent of resamples where model i scores strictly better than model j."""

    names: list[str]
    wins: np.ndarray
    ties: np.ndarray
    n_resamples: int
    n_skipped: int = 0
    metric: str = ""

    def win_rate(self, base: str, other: str) -> float:
        return float(self.wins[self.names.index(base), self.names.index(other)])

    def to_dict(self) -> dict:
        def cells(m):
            return [[None if i == j else float(m[i, j]) for j in range(len(self.names))]
                    for i in range(len(self.names))]
        return {"metric": self.metric, "models": self.names, "win_percent": cells(self.wins),
                "tie_percent": cells(self.ties), "win_percent_ties_split": cells(self.wins_ties_split()),
                "n_resamples": self.n_resamples, "n_skipped": self.n_skipped}

    def wins_ties_split(self) -> np.ndarray:
        """Win percentages with every tie credited half to each side."""
        return self.wins + self.ties / 2.0

    def to_csv(self) -> str:
        lines = ["base," + ",".join(self.names)]
        for i, a in enumerate(self.names):
            row = ["" if i == j else f"{self.wins[i, j]:.1f}" for j in range(len(self.names))]
            lines.append(a + "," + ",".join(row))
        return "\n".join(lines) + "\n"


def significance_matrix(predictions: Mapping[str, np.ndarray], labels: np.ndarray, metric: Callable,
                        n_resamples: int = 1000, seed: int = 0, higher_is_better: bool = True,
                        name: str | None = None) -> SignificanceMatrix:
    """Compare every pair of models on identical resamples of the shared test set."""
    names = list(predictions)
    if len(names) < 2:
        raise MetricError("need at least two models")
    y = np.asarray(labels)
    preds = [np.asarray(predictions[n]) for n in names]
    if any(len(p) != len(y) for p in preds):
        raise MetricError("prediction sets are not aligned with the labels")
    k = len(names)
    wins = np.zeros((k, k))
    ties = np.zeros((k, k))
    valid = 0
    skipped = 0
    for b in range(n_resamples):
        idx = _resample_indices(len(y), seed, b)
        try:
            scores = np.array([float(metric(p[idx], y[idx])) for p in preds])
        except MetricError:
            skipped += 1
            continue
        if not higher_is_better:
            scores = -scores
        valid += 1
        wins += scores[:, None] > scores[None, :]
        ties += scores[:, None] == scores[None, :]
    if valid == 0:
        raise MetricError("every resample was degenerate")
    np.fill_diagonal(wins, np.nan)
    np.fill_diagonal(ties, np.nan)
    name = name or getattr(metric, "__name__", "")
    return SignificanceMatrix(names, 100.0 * wins / valid, 100.0 * ties / valid, n_resamples, skipped, name)


@dataclass
class SliceResult:
    name: str
    n_samples: int
    n_episodes: int
    metrics: dict[str, float | None] = field(default_factory=dict)


def slice_keys(episodes, slicer: str) -> dict[str, list[str]]:
    """episode_id -> slice names (an episode may carry several cohort tags)."""
    out = {}
    for e in episodes:
        if slicer == "cohort_tag":
            out[e.episode_id] = list(e.cohort_tags)
        elif slicer == "los_bucket":
            out[e.episode_id] = [f"los_class_{los_class(e.length_hours)}"]
        else:
            raise MetricError(f"unknown slicer {slicer!r}")
    return out


def sliced_eval(episode_ids: Sequence[str], y_true: np.ndarray, y_pred: np.ndarray, episodes, slicer: str,
                metrics: Mapping[str, Callable]) -> dict[str, SliceResult]:
    """Evaluate ``metrics`` separately on every non-empty slice.

    Slices without samples are absent from the result; a metric undefined
    on a slice (e.g. one class only) is reported as ``None``.
    """
    keys = slice_keys(episodes, slicer)
    ids = np.asarray(episode_ids, dtype=object)
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    members: dict[str, list[int]] = {}
    for i, eid in enumerate(ids):
        for s in keys.get(eid, ()):
            members.setdefault(s, []).append(i)
    out = {}
    for s in sorted(members):
        idx = np.asarray(members[s])
        res = SliceResult(s, len(idx), len(set(ids[idx])))
        for mname, fn in metrics.items():
            try:
                res.metrics[mname] = float(fn(y_pred[idx], y_true[idx]))
            except MetricError:
                res.metrics[mname] = None
        out[s] = res
    return out
