import numpy as np
import pytest

from phenoicu.cohort import Episode, GeneratorConfig, Note, generate
from phenoicu.ontology import parse_obo

TOY_OBO = """\
format-version: 1.2

[Term]
id: HP:0000001
name: All

[Term]
id: HP:0000002
name: B
is_a: HP:0000001 ! All

[Term]
id: HP:0000003
name: C
is_a: HP:0000001 ! All

[Term]
id: HP:0000004
name: D
is_a: HP:0000002 ! B
is_a: HP:0000003 ! C

[Term]
id: HP:0000005
name: E
is_a: HP:0000004 ! D
"""


@pytest.fixture
def toy_ontology():
    return parse_obo(TOY_OBO)


def make_episode(length=10, episode_id="E1", patient_id="P1", notes=(), died=False, death_hour=None,
                 tags=(), channels=None):
    return Episode(patient_id=patient_id, episode_id=episode_id, length_hours=length,
                   channels=channels if channels is not None else {},
                   notes=[Note(h, f"{episode_id}_N{i}", list(terms)) for i, (h, terms) in enumerate(notes)],
                   died_in_hospital=died, death_hour=death_hour, cohort_tags=list(tags))


@pytest.fixture(scope="session")
def small_cohort():
    return generate(GeneratorConfig(n_patients=120, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria: one summary line each, filled in as the tests report
_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False, "details": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["ran"] = True
        entry["details"] = [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        extra = f" ({', '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}: {e['title']}{extra}")
