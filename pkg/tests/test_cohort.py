import io
import json

import numpy as np
import pytest
from scipy.stats import norm

from phenoicu.cohort import (CHANNEL_NAMES, CohortError, DEFAULT_LOS_WEIGHTS, GeneratorConfig, carriers_of,
                             dumps_episodes, generate, kfold_split, load_episodes, split, train_test_split)
from phenoicu.tasks import build_labels, los_class

from conftest import make_episode

EXPECTED_CHANNELS = (
    "capillary refill rate", "diastolic blood pressure", "fraction inspired oxygen",
    "glasgow coma scale eye opening", "glasgow coma scale motor response", "glasgow coma scale verbal response",
    "glasgow coma scale total", "glucose", "heart rate", "height", "mean blood pressure",
    "oxygen saturation", "respiratory rate", "systolic blood pressure", "temperature", "weight", "pH",
)


def test_channel_list_and_order():
    assert CHANNEL_NAMES == EXPECTED_CHANNELS


@pytest.fixture(scope="module")
def big_cohort():
    return generate(GeneratorConfig(n_patients=2000, seed=7))


def test_mortality_rate_near_target(big_cohort):
    died = np.mean([e.died_in_hospital for e in big_cohort])
    assert 0.11 <= died <= 0.15


def test_los_histogram_near_weights(big_cohort):
    counts = np.bincount([los_class(e.length_hours) for e in big_cohort], minlength=10)
    hist = counts / counts.sum()
    assert np.all(np.abs(hist - np.asarray(DEFAULT_LOS_WEIGHTS)) <= 0.03)


def test_decompensation_rate_near_target(big_cohort):
    y = np.asarray(build_labels("decompensation", big_cohort).labels())
    assert len(y) >= 100_000
    assert abs(y.mean() - 0.0201) <= 0.005


def test_los_shift_lengthens_carrier_stays(big_cohort):
    term = "HP:0100806"
    car = np.array([carriers_of(e, term) for e in big_cohort])
    length = np.array([e.length_hours for e in big_cohort])
    assert np.median(length[car]) > np.median(length[~car])


def test_planted_effect_raises_mortality(big_cohort):
    term = "HP:0100526"
    car = np.array([carriers_of(e, term) for e in big_cohort])
    died = np.array([e.died_in_hospital for e in big_cohort])
    p1, p0 = died[car].mean(), died[~car].mean()
    n1, n0 = car.sum(), (~car).sum()
    p = died.mean()
    z = (p1 - p0) / np.sqrt(p * (1 - p) * (1 / n1 + 1 / n0))
    assert p1 > p0 and norm.sf(z) < 0.01


def test_zero_mortality_rate():
    eps = generate(GeneratorConfig(n_patients=200, seed=1, mortality_rate=0.0))
    assert not any(e.died_in_hospital for e in eps)


def test_generation_is_deterministic():
    cfg = GeneratorConfig(n_patients=50, seed=11)
    assert dumps_episodes(generate(cfg)) == dumps_episodes(generate(cfg))
    assert dumps_episodes(generate(cfg)) != dumps_episodes(generate(GeneratorConfig(n_patients=50, seed=12)))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        GeneratorConfig(mortality_rate=1.5).validate()
    with pytest.raises(ValueError):
        GeneratorConfig(los_weights=(0.5,) * 10).validate()


def test_episode_invariants(small_cohort):
    for e in small_cohort:
        assert set(e.channels) == set(CHANNEL_NAMES)
        assert all(len(v) == e.length_hours for v in e.channels.values())
        assert all(0 <= n.hour < e.length_hours for n in e.notes)
        if e.death_hour is not None:
            assert e.died_in_hospital and e.death_hour <= e.length_hours


def test_round_trip(small_cohort):
    text = dumps_episodes(small_cohort)
    again = load_episodes(io.StringIO(text))
    assert again == small_cohort
    assert dumps_episodes(again) == text


def test_minimal_record():
    rec = {"patient_id": "p", "episode_id": "e", "length_hours": 2, "channels": {"heart rate": [80, None]},
           "died_in_hospital": False}
    (e,) = load_episodes([json.dumps(rec)])
    assert e.length_hours == 2 and e.channels["heart rate"] == [80, None]


def test_invariant_violation_reports_line():
    ok = {"patient_id": "p", "episode_id": "a", "length_hours": 2, "channels": {}, "died_in_hospital": False}
    bad = {"patient_id": "p", "episode_id": "b", "length_hours": 50, "channels": {}, "died_in_hospital": True,
           "death_hour": 100}
    with pytest.raises(CohortError) as err:
        load_episodes([json.dumps(ok), json.dumps(bad)])
    assert err.value.line == 2


def test_require_notes_filters_per_episode():
    with_note = make_episode(5, "a", notes=[(1, ["HP:0002615"])])
    without = make_episode(5, "b", patient_id="P1")
    text = dumps_episodes([with_note, without])
    assert [e.episode_id for e in load_episodes(io.StringIO(text), require_notes=True)] == ["a"]


def _patients(eps):
    return {e.patient_id for e in eps}


def test_kfold_of_eight_patients():
    eps = [make_episode(3, f"E{i}", patient_id=f"P{i}") for i in range(8)]
    folds = kfold_split(eps, 4, seed=0)
    assert [len(_patients(f)) for f in folds] == [2, 2, 2, 2]
    with pytest.raises(ValueError):
        kfold_split(eps, 9)


def test_kfold_partition_groups_patients(small_cohort):
    folds = kfold_split(small_cohort, 4, seed=5)
    ids = [e.episode_id for f in folds for e in f]
    assert sorted(ids) == sorted(e.episode_id for e in small_cohort)
    pats = [_patients(f) for f in folds]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not pats[i] & pats[j]
    sizes = [len(p) for p in pats]
    assert max(sizes) - min(sizes) <= 1


def test_train_test_sizes():
    eps = [make_episode(3, f"E{i}", patient_id=f"P{i:04d}") for i in range(2000)]
    train, test = train_test_split(eps, 0.85, seed=0)
    assert 299 <= len(_patients(test)) <= 301
    assert not _patients(train) & _patients(test)
    assert split(eps, "train_test", train_fraction=0.85, seed=0) == (train, test)
