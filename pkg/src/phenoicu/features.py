"""Per-hour feature rows: imputed structured channels plus propagated phenotype indicators."""

from __future__ import annotations

import bisect
import csv
import hashlib
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotate import Annotation, Lexicon, PersistencyMap, match_lexicon
from .cohort import CHANNELS, ChannelSpec, Episode
from .ontology import Ontology, aggregate_to_parents
from .tasks import Task, TaskLabels, feature_hour

log = logging.getLogger(__name__)

_LEADING_INT = re.compile(r"^\s*(\d+)")


class FeatureError(ValueError):
    pass


def _categorical_code(value, spec: ChannelSpec) -> float | None:
    if value is None:
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool):
        return float(value)
    s = str(value).strip().lower()
    if spec.name == "capillary refill rate":
        if s.startswith("normal"):
            return 0.0
        if s.startswith("abnormal"):
            return 1.0
    m = _LEADING_INT.match(s)
    if m:
        return float(m.group(1))
    # benchmark spellings for intubated/unable-to-assess verbal scores
    if spec.name == "glasgow coma scale verbal response" and ("et/trach" in s or "no response" in s):
        return 1.0
    raise FeatureError(f"cannot interpret {value!r} for {spec.name}")


def structured_names(specs: Sequence[ChannelSpec] = CHANNELS, one_hot: bool = False) -> list[str]:
    names = []
    for spec in specs:
        if one_hot and spec.kind == "categorical":
            names.extend(f"{spec.name}={c}" for c in spec.categories)
        else:
            names.append(spec.name)
    return names


def impute_channels(e: Episode, specs: Sequence[ChannelSpec] = CHANNELS, one_hot: bool = False,
                    return_mask: bool = False):
    """Forward-fill each channel, seed leading gaps with the normal value.

    Returns ``(grid, n_clamped)`` or ``(grid, n_clamped, missing_mask)``;
    out-of-range values are clamped into the channel's plausible range and
    counted.
    """
    L = e.length_hours
    columns = []
    missing = np.zeros((L, len(specs)), dtype=bool)
    n_clamped = 0
    for j, spec in enumerate(specs):
        raw = e.channels.get(spec.name)
        col = np.full(L, np.nan)
        if raw is not None:
            for h, v in enumerate(raw):
                if v is None:
                    continue
                x = _categorical_code(v, spec) if spec.kind == "categorical" else float(v)
                if x is None or not np.isfinite(x):
                    continue
                if x < spec.low or x > spec.high:
                    n_clamped += 1
                    x = min(max(x, spec.low), spec.high)
                col[h] = x
        missing[:, j] = np.isnan(col)
        # forward fill: index of the last observation at or before each hour
        idx = np.where(~np.isnan(col), np.arange(L), -1)
        np.maximum.accumulate(idx, out=idx)
        filled = np.where(idx >= 0, col[np.maximum(idx, 0)], float(spec.normal_value))
        if spec.kind == "categorical":
            filled = np.rint(filled)
            if one_hot:
                columns.append((filled[:, None] == np.asarray(spec.categories, float)[None, :]).astype(float))
                continue
        columns.append(filled[:, None])
    if n_clamped:
        log.warning("%s: clamped %d out-of-range values", e.episode_id, n_clamped)
    grid = np.hstack(columns) if columns else np.zeros((L, 0))
    if return_mask:
        return grid, n_clamped, missing
    return grid, n_clamped


def _intervals(annotations: Iterable[Annotation], pmap: PersistencyMap, note_hours: Sequence[int],
               length_hours: int, enabled: bool) -> list[tuple[str, int, int]]:
    hours = sorted(set(note_hours))
    out = []
    for a in annotations:
        t = a.hour
        i = bisect.bisect_left(hours, t)
        if i == len(hours) or hours[i] != t:
            raise FeatureError(f"annotation at hour {t} does not coincide with a note hour")
        if not 0 <= t < length_hours:
            raise FeatureError(f"annotation hour {t} outside stay of {length_hours} hours")
        if not enabled:
            end = t + 1
        elif pmap.is_persistent(a.term):
            end = length_hours
        else:
            end = hours[i + 1] if i + 1 < len(hours) else length_hours
        out.append((a.term, t, end))
    return out


def propagate_phenotypes(annotations: Iterable[Annotation], pmap: PersistencyMap,
                         note_hours: Sequence[int], length_hours: int, enabled: bool = True
                         ) -> list[set[str]]:
    """Active terms per hour.

    Transient terms stay on until the next note, persistent ones until the end
    of the stay; with propagation disabled a term is on only at its note hour.
    """
    active: list[set[str]] = [set() for _ in range(length_hours)]
    for term, start, end in _intervals(annotations, pmap, note_hours, length_hours, enabled):
        for h in range(start, end):
            active[h].add(term)
    return active


@dataclass(frozen=True)
class FeatureConfig:
    phenotypes: bool = True
    propagation: bool = True
    aggregation_levels: int = 1
    aggregation_replace: bool = False
    one_hot: bool = False
    terms: tuple[str, ...] | None = None  # fixed phenotype columns, e.g. from a training schema

    def to_dict(self) -> dict:
        return {"phenotypes": self.phenotypes, "propagation": self.propagation,
                "aggregation_levels": self.aggregation_levels,
                "aggregation_replace": self.aggregation_replace, "one_hot": self.one_hot}


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    n_structured: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise FeatureError("duplicate feature names")

    @property
    def width(self) -> int:
        return len(self.names)

    @property
    def phenotype_terms(self) -> tuple[str, ...]:
        return self.names[self.n_structured:]

    @property
    def version(self) -> str:
        blob = json.dumps({"names": self.names, "n_structured": self.n_structured, "config": self.config},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps({"names": list(self.names), "n_structured": self.n_structured,
                           "config": self.config, "version": self.version}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        d = json.loads(text)
        schema = cls(tuple(d["names"]), int(d["n_structured"]), d.get("config", {}))
        if "version" in d and d["version"] != schema.version:
            raise FeatureError("schema version hash mismatch")
        return schema


@dataclass
class FeatureMatrix:
    schema: FeatureSchema
    episode_ids: np.ndarray  # per row
    hours: np.ndarray
    X: np.ndarray
    offsets: dict[str, tuple[int, int]]
    missing: np.ndarray | None = None

    def episode(self, episode_id: str) -> np.ndarray:
        a, b = self.offsets[episode_id]
        return self.X[a:b]

    def rows_for(self, labels: TaskLabels) -> np.ndarray:
        """Row indices backing each label row."""
        idx = np.empty(len(labels.rows), dtype=np.int64)
        for k, (eid, hour, _) in enumerate(labels.rows):
            a, b = self.offsets[eid]
            h = feature_hour(labels.task, hour)
            if not 0 <= h < b - a:
                raise FeatureError(f"{eid}: no feature row for hour {h}")
            idx[k] = a + h
        return idx

    def task_arrays(self, labels: TaskLabels) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rows_for(labels)
        return self.X[idx], np.asarray(labels.labels(), dtype=np.int64)


def annotations_from_notes(episodes: Iterable[Episode]) -> dict[str, list[Annotation]]:
    out = {}
    for e in episodes:
        anns = []
        for n in e.notes:
            for t in n.terms or ():
                anns.append(Annotation(hour=n.hour, term=t, note_id=n.note_id, episode_id=e.episode_id))
        out[e.episode_id] = anns
    return out


def annotations_from_lexicon(episodes: Iterable[Episode], lex: Lexicon) -> dict[str, list[Annotation]]:
    out = {}
    for e in episodes:
        anns = []
        for n in e.notes:
            for a in match_lexicon(lex, n.text or "", n.hour, n.note_id):
                anns.append(Annotation(a.hour, a.term, a.note_id, a.span, e.episode_id))
        out[e.episode_id] = anns
    return out


def group_annotations(annotations: Iterable[Annotation], episodes: Iterable[Episode]
                      ) -> dict[str, list[Annotation]]:
    """Attach loose annotation records to episodes via episode_id or note_id."""
    episodes = list(episodes)
    by_note = {n.note_id: e.episode_id for e in episodes for n in e.notes}
    out: dict[str, list[Annotation]] = {e.episode_id: [] for e in episodes}
    for a in annotations:
        eid = a.episode_id or by_note.get(a.note_id)
        if eid is None or eid not in out:
            raise FeatureError(f"annotation for note {a.note_id!r} matches no episode")
        out[eid].append(a)
    return out


def assemble(episodes: Sequence[Episode], ontology: Ontology | None,
             annotations: Mapping[str, Sequence[Annotation]] | None, pmap: PersistencyMap | None,
             cfg: FeatureConfig = FeatureConfig(), with_missing: bool = False) -> FeatureMatrix:
    """Build hourly feature rows for every episode, episode-major and hour-ascending.

    Structured columns come first; in phenotype mode they are followed by one
    binary column per term (propagated and aggregated), sorted by id.
    """
    n_struct = len(structured_names(one_hot=cfg.one_hot))
    per_episode = []
    expansion: dict[str, list[str]] = {}
    seen_terms: set[str] = set()
    for e in episodes:
        grid, _, miss = impute_channels(e, one_hot=cfg.one_hot, return_mask=True)
        spans: list[tuple[str, int, int]] = []
        if cfg.phenotypes:
            if annotations is None or e.episode_id not in annotations:
                raise FeatureError(f"no annotations provided for episode {e.episode_id}")
            anns = annotations[e.episode_id]
            for a in anns:
                if a.term not in ontology:
                    raise FeatureError(f"{e.episode_id}: term {a.term} not in ontology")
            note_hours = sorted({n.hour for n in e.notes} | {a.hour for a in anns if not e.notes})
            for term, start, end in _intervals(anns, pmap, note_hours, e.length_hours, cfg.propagation):
                if term not in expansion:
                    expansion[term] = aggregate_to_parents(ontology, [term], cfg.aggregation_levels,
                                                           replace=cfg.aggregation_replace)
                for t in expansion[term]:
                    spans.append((t, start, end))
                    seen_terms.add(t)
        per_episode.append((e, grid, miss, spans))

    terms = tuple(sorted(seen_terms)) if cfg.terms is None else tuple(cfg.terms)
    if not cfg.phenotypes:
        terms = ()
    col_of = {t: n_struct + i for i, t in enumerate(terms)}
    names = tuple(structured_names(one_hot=cfg.one_hot)) + terms
    schema = FeatureSchema(names, n_struct, cfg.to_dict())

    total = sum(e.length_hours for e in episodes)
    X = np.zeros((total, len(names)))
    missing = np.zeros((total, len(CHANNELS)), dtype=bool) if with_missing else None
    episode_ids = np.empty(total, dtype=object)
    hours = np.empty(total, dtype=np.int64)
    offsets = {}
    pos = 0
    for e, grid, miss, spans in per_episode:
        L = e.length_hours
        X[pos:pos + L, :n_struct] = grid
        for t, start, end in spans:
            col = col_of.get(t)
            if col is not None:
                X[pos + start:pos + end, col] = 1.0
        if missing is not None:
            missing[pos:pos + L] = miss
        episode_ids[pos:pos + L] = e.episode_id
        hours[pos:pos + L] = np.arange(L)
        offsets[e.episode_id] = (pos, pos + L)
        pos += L
    return FeatureMatrix(schema, episode_ids, hours, X, offsets, missing)


def export_matrix(fm: FeatureMatrix, path: str | Path, csv_dump: bool = False) -> None:
    """Write a columnar binary matrix, its schema sidecar and optionally a CSV dump."""
    from .models.container import write_container

    path = Path(path)
    arrays = {"X": np.asfortranarray(fm.X), "hours": fm.hours,
              "episode_ids": np.asarray(fm.episode_ids, dtype=str)}
    write_container(path, {"kind": "feature_matrix", "schema_version": fm.schema.version}, arrays)
    path.with_suffix(".schema.json").write_text(fm.schema.to_json(), encoding="utf-8")
    if csv_dump:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode_id", "hour", *fm.schema.names])
        for i in range(len(fm.X)):
            w.writerow([fm.episode_ids[i], int(fm.hours[i]), *(repr(float(v)) for v in fm.X[i])])
        path.with_suffix(".csv").write_text(buf.getvalue(), encoding="utf-8")


def read_matrix(path: str | Path) -> FeatureMatrix:
    from .models.container import read_container

    path = Path(path)
    header, arrays = read_container(path)
    schema = FeatureSchema.from_json(path.with_suffix(".schema.json").read_text(encoding="utf-8"))
    if header.get("schema_version") != schema.version:
        raise FeatureError("matrix and schema sidecar disagree")
    eids = arrays["episode_ids"].astype(object)
    offsets = {}
    for i, eid in enumerate(eids):
        a, _ = offsets.get(eid, (i, i))
        offsets[eid] = (a, i + 1)
    return FeatureMatrix(schema, eids, arrays["hours"], np.ascontiguousarray(arrays["X"]), offsets)
