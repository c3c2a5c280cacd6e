import numpy as np
import pytest

from phenoicu.cohort import GeneratorConfig, generate
from phenoicu.tasks import (Task, build_labels, decomp_label_at, decomp_labels, feature_hour, los_class, los_labels,
                            mortality_label)

from conftest import make_episode


def test_mortality_examples():
    assert mortality_label(make_episode(100)) == (48, 0)
    assert mortality_label(make_episode(120, died=True, death_hour=90)) == (48, 1)
    assert mortality_label(make_episode(30)) is None
    assert feature_hour(Task.MORTALITY, 48) == 47


def test_decompensation_examples():
    assert all(y == 0 for _, y in decomp_labels(make_episode(60)))
    e = make_episode(50, died=True, death_hour=50)
    assert decomp_label_at(e, 26) == 1
    assert decomp_label_at(e, 25) == 0  # 25 hours before death lies outside the window
    assert decomp_label_at(e, 20) == 0
    assert decomp_label_at(make_episode(12, died=True, death_hour=10), 0) == 1


def test_decompensation_starts_at_obs_start():
    rows = decomp_labels(make_episode(10), obs_start=4)
    assert [h for h, _ in rows] == list(range(4, 10))


@pytest.mark.parametrize("hours,cls", [(23, 0), (24, 1), (30, 1), (47, 1), (48, 2), (167, 6), (168, 7),
                                       (191, 7), (192, 8), (335, 8), (336, 9), (400, 9), (5000, 9)])
def test_los_boundaries(hours, cls):
    assert los_class(hours) == cls


def test_los_non_increasing():
    rows = los_labels(make_episode(500))
    classes = [c for _, c in rows]
    assert all(a >= b for a, b in zip(classes, classes[1:]))


def test_suffix_of_ones_for_generated_non_survivors():
    eps = generate(GeneratorConfig(n_patients=300, seed=2, mortality_rate=0.6, decomp_rate=0.3))
    dead = [e for e in eps if e.died_in_hospital and e.death_hour is not None]
    assert len(dead) > 50
    for e in dead:
        y = [lab for _, lab in decomp_labels(e, 0)]
        k = int(np.sum(y))
        assert y == [0] * (len(y) - k) + [1] * k
        assert k == e.length_hours - max(0, e.death_hour - 24)


def test_mortality_sum_equals_eligible_deaths(small_cohort):
    labels = build_labels(Task.MORTALITY, small_cohort)
    eligible = [e for e in small_cohort if e.length_hours >= 48]
    assert sum(labels.labels()) == sum(e.died_in_hospital for e in eligible)
    assert len(labels) == len(eligible)


def test_labels_csv():
    labels = build_labels("los", [make_episode(6, "E9")], obs_start=4)
    assert labels.to_csv() == "episode_id,hour,label\nE9,4,0\nE9,5,0\n"
