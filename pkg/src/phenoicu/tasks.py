"""Labels and prediction points for in-hospital mortality, decompensation and length of stay."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .cohort import Episode

MORTALITY_HOUR = 48
DECOMP_WINDOW_HOURS = 24
DEFAULT_OBS_START = 4
N_LOS_CLASSES = 10

# class -> [lower, upper) bound in days of remaining stay
LOS_BIN_EDGES_DAYS = (0, 1, 2, 3, 4, 5, 6, 7, 8, 14)


class Task(str, Enum):
    MORTALITY = "mortality"
    DECOMPENSATION = "decompensation"
    LOS = "los"


@dataclass(frozen=True)
class TaskLabels:
    task: Task
    rows: list[tuple[str, int, int]]  # (episode_id, hour, label)

    def __len__(self):
        return len(self.rows)

    def labels(self) -> list[int]:
        return [r[2] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode_id", "hour", "label"])
        w.writerows(self.rows)
        return buf.getvalue()


def mortality_label(e: Episode) -> tuple[int, int] | None:
    """``(48, died)`` for stays of at least 48 hours, else ``None``."""
    if e.length_hours < MORTALITY_HOUR:
        return None
    return MORTALITY_HOUR, int(e.died_in_hospital)


def decomp_label_at(e: Episode, hour: int) -> int:
    return int(e.died_in_hospital and e.death_hour is not None
               and e.death_hour - hour <= DECOMP_WINDOW_HOURS)


def decomp_labels(e: Episode, obs_start: int = DEFAULT_OBS_START) -> list[tuple[int, int]]:
    return [(h, decomp_label_at(e, h)) for h in range(obs_start, e.length_hours)]


def los_class(remaining_hours: float) -> int:
    """Bin remaining stay into the ten classes; bins are half-open in days."""
    if remaining_hours < 0:
        raise ValueError("remaining hours must be non-negative")
    days = remaining_hours / 24.0
    if days >= 14:
        return 9
    if days >= 8:
        return 8
    return int(days)


def los_labels(e: Episode, obs_start: int = DEFAULT_OBS_START) -> list[tuple[int, int]]:
    return [(h, los_class(e.length_hours - h)) for h in range(obs_start, e.length_hours)]


def build_labels(task: Task | str, episodes: Iterable[Episode], obs_start: int = DEFAULT_OBS_START
                 ) -> TaskLabels:
    task = Task(task)
    rows: list[tuple[str, int, int]] = []
    for e in episodes:
        if task is Task.MORTALITY:
            lab = mortality_label(e)
            if lab is not None:
                rows.append((e.episode_id, lab[0], lab[1]))
        elif task is Task.DECOMPENSATION:
            rows.extend((e.episode_id, h, y) for h, y in decomp_labels(e, obs_start))
        else:
            rows.extend((e.episode_id, h, y) for h, y in los_labels(e, obs_start))
    return TaskLabels(task, rows)


def feature_hour(task: Task | str, label_hour: int) -> int:
    """Row of the hourly grid whose features back a prediction at ``label_hour``.

    Mortality is predicted from the first 48 hours, so the last observed row
    is hour 47; hourly tasks use the row of the prediction hour itself.
    """
    return label_hour - 1 if Task(task) is Task.MORTALITY else label_hour


def remaining_hours(episodes: Sequence[Episode], labels: TaskLabels) -> list[int]:
    length = {e.episode_id: e.length_hours for e in episodes}
    return [length[eid] - h for eid, h, _ in labels.rows]
