"""Static SVG figures rendered from the same numbers written to the CSV reports.

Output is byte-stable: the SVG id salt is fixed and no date is embedded.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "phenoicu", "svg.fonttype": "path", "font.size": 8}


def _save(fig, path: str | Path) -> None:
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def calibration_plot(curve: Sequence[tuple[float, float, int]], path: str | Path, title: str = "") -> None:
    """Reliability diagram: mean predicted probability against observed frequency."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    if curve:
        m, o, _ = zip(*curve)
        ax.plot(m, o, marker="o", lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("mean predicted probability")
    ax.set_ylabel("observed frequency")
    ax.set_title(title)
    _save(fig, path)


def importance_bar(names: Sequence[str], values: Sequence[float], path: str | Path, top: int = 20) -> None:
    names = list(names)[:top][::-1]
    values = list(values)[:top][::-1]
    fig, ax = plt.subplots(figsize=(5, 0.25 * len(names) + 1))
    ax.barh(range(len(names)), values, color="#1f77b4")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlabel("mean |SHAP value|")
    _save(fig, path)


def beeswarm(names: Sequence[str], phi: np.ndarray, values: np.ndarray, path: str | Path, top: int = 20) -> None:
    """One row per feature; points are samples placed by SHAP value and coloured by feature value."""
    k = min(top, len(names))
    fig, ax = plt.subplots(figsize=(6, 0.3 * k + 1))
    rng = np.random.default_rng(0)
    for row, j in enumerate(range(k)[::-1]):
        v = values[:, j]
        span = v.max() - v.min()
        c = np.zeros_like(v) if span == 0 else (v - v.min()) / span
        jitter = rng.uniform(-0.3, 0.3, len(v))
        ax.scatter(phi[:, j], row + jitter, c=c, cmap="coolwarm", s=4, vmin=0, vmax=1)
    ax.set_yticks(range(k))
    ax.set_yticklabels(list(names)[:k][::-1])
    ax.axvline(0, color="0.5", lw=0.6)
    ax.set_xlabel("SHAP value")
    _save(fig, path)


def timeline_heatmap(hours: np.ndarray, names: Sequence[str], phi: np.ndarray, prediction: np.ndarray,
                     path: str | Path) -> None:
    """SHAP values per hour (columns) and feature (rows) with the prediction curve above."""
    fig, (top, ax) = plt.subplots(2, 1, figsize=(7, 0.25 * len(names) + 2), sharex=True,
                                  gridspec_kw={"height_ratios": [1, 3]})
    top.plot(hours, prediction, lw=1)
    top.set_ylabel("prediction")
    lim = float(np.abs(phi).max()) or 1.0
    ax.imshow(phi.T, aspect="auto", cmap="coolwarm", vmin=-lim, vmax=lim, interpolation="nearest",
              extent=(hours[0] - 0.5, hours[-1] + 0.5, len(names) - 0.5, -0.5))
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlabel("hour")
    _save(fig, path)


def force_plot(names: Sequence[str], phi: Sequence[float], base_value: float, path: str | Path) -> None:
    """Cumulative bar chart from the base value to the prediction for one timestep."""
    fig, ax = plt.subplots(figsize=(6, 0.3 * len(names) + 1))
    left = base_value
    for row, (n, p) in enumerate(zip(names, phi)):
        ax.barh(row, p, left=left, color="#d62728" if p > 0 else "#1f77b4")
        left += p
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.axvline(base_value, color="0.5", lw=0.6)
    ax.set_xlabel("model output")
    _save(fig, path)


def bar_table(labels: Sequence[str], series: dict[str, Sequence[float]], path: str | Path, ylabel: str) -> None:
    """Grouped bars, one group per label, used for slices and ablation deltas."""
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels) + 2), 3))
    width = 0.8 / max(1, len(series))
    x = np.arange(len(labels))
    for k, (name, vals) in enumerate(series.items()):
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(x + k * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(series) - 1) / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.legend()
    _save(fig, path)
