"""Phenotype annotations: lexicon matching over note text and annotation file loading."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, TextIO

from .ontology import is_term_id

_WS = re.compile(r"\s+")


class AnnotationError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def normalize(text: str) -> str:
    return _WS.sub(" ", text.strip().lower())


@dataclass(frozen=True, order=True)
class Annotation:
    hour: int
    term: str
    note_id: str
    span: tuple[int, int] | None = None
    episode_id: str | None = None


class Persistency(str, Enum):
    PERSISTENT = "persistent"
    TRANSIENT = "transient"


class PersistencyMap(dict):
    """Term -> Persistency; unlisted terms are transient."""

    def __missing__(self, key):
        return Persistency.TRANSIENT

    def is_persistent(self, term: str) -> bool:
        return self[term] is Persistency.PERSISTENT


class Lexicon:
    """Normalized surface string -> term id."""

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]] = (), source: str = ""):
        self.entries: dict[str, str] = {}
        self.source = source
        items = entries.items() if isinstance(entries, Mapping) else entries
        for surface, term in items:
            key = normalize(surface)
            if not key:
                raise AnnotationError("empty lexicon surface form")
            if not is_term_id(term):
                raise AnnotationError(f"malformed term id {term!r} for {surface!r}")
            self.entries[key] = term
        self._pattern = self._compile()

    def _compile(self):
        if not self.entries:
            return None
        # longest surface first; ties by string so insertion order never matters
        keys = sorted(self.entries, key=lambda s: (-len(s), s))
        alts = "|".join(r"\s+".join(map(re.escape, k.split(" "))) for k in keys)
        return re.compile(rf"(?<![0-9a-z])(?:{alts})(?![0-9a-z])")

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, Lexicon) and self.entries == other.entries


def match_lexicon(lex: Lexicon, note_text: str, hour: int, note_id: str = "") -> list[Annotation]:
    """Longest-match-first, non-overlapping, left-to-right lexicon matches.

    Matching is case-insensitive, treats any whitespace run as a single
    space and only accepts matches bounded by non-alphanumerics.
    """
    if lex._pattern is None or not note_text:
        return []
    # str.lower can change length for a few code points; fall back to per-char lowering
    lowered = note_text.lower()
    if len(lowered) != len(note_text):
        lowered = "".join(c.lower() if len(c.lower()) == 1 else c for c in note_text)
    out = []
    for m in lex._pattern.finditer(lowered):
        term = lex.entries[normalize(m.group(0))]
        out.append(Annotation(hour=hour, term=term, note_id=note_id, span=(m.start(), m.end())))
    return out


def _read_tsv(source: str | Path | TextIO):
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from _read_tsv(fh)
        return
    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise AnnotationError(f"expected 2 tab-separated columns, got {len(cols)}", lineno)
        yield lineno, cols[0], cols[1].strip()


def load_lexicon(source: str | Path | TextIO) -> Lexicon:
    pairs = []
    for lineno, surface, term in _read_tsv(source):
        if not is_term_id(term):
            raise AnnotationError(f"malformed term id {term!r}", lineno)
        pairs.append((surface, term))
    return Lexicon(pairs, source=str(getattr(source, "name", source)))


def load_persistency(source: str | Path | TextIO) -> PersistencyMap:
    pmap = PersistencyMap()
    for lineno, term, kind in _read_tsv(source):
        if not is_term_id(term):
            raise AnnotationError(f"malformed term id {term!r}", lineno)
        try:
            pmap[term] = Persistency(kind.lower())
        except ValueError:
            raise AnnotationError(f"expected persistent|transient, got {kind!r}", lineno) from None
    return pmap


def bundled_lexicon() -> Lexicon:
    with resources.files("phenoicu.data").joinpath("lexicon.tsv").open(encoding="utf-8") as fh:
        return load_lexicon(fh)


def bundled_persistency() -> PersistencyMap:
    with resources.files("phenoicu.data").joinpath("persistency.tsv").open(encoding="utf-8") as fh:
        return load_persistency(fh)


def load_annotations(stream: TextIO | Iterable[str], max_hour: int | Mapping[str, int] | None = None
                     ) -> list[Annotation]:
    """Read annotation JSONL records ``{"term", "hour", "note_id"}``.

    ``max_hour`` bounds the hour either globally or per ``episode_id``;
    records may carry an optional ``episode_id`` and ``span``.
    """
    out = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise AnnotationError("record must be an object", lineno)
        for key in ("term", "hour", "note_id"):
            if key not in rec:
                raise AnnotationError(f"missing field {key!r}", lineno)
        term, hour = rec["term"], rec["hour"]
        if not isinstance(term, str) or not is_term_id(term):
            raise AnnotationError(f"malformed term id {term!r}", lineno)
        if not isinstance(hour, int) or isinstance(hour, bool) or hour < 0:
            raise AnnotationError(f"hour must be a non-negative integer, got {hour!r}", lineno)
        episode_id = rec.get("episode_id")
        limit = max_hour.get(episode_id) if isinstance(max_hour, Mapping) else max_hour
        if limit is not None and hour >= limit:
            raise AnnotationError(f"hour {hour} outside episode length {limit}", lineno)
        span = rec.get("span")
        out.append(Annotation(hour=hour, term=term, note_id=str(rec["note_id"]),
                              span=tuple(span) if span else None,
                              episode_id=None if episode_id is None else str(episode_id)))
    return out


def dump_annotations(annotations: Iterable[Annotation]) -> str:
    lines = []
    for a in annotations:
        rec = {"term": a.term, "hour": a.hour, "note_id": a.note_id}
        if a.episode_id is not None:
            rec["episode_id"] = a.episode_id
        if a.span is not None:
            rec["span"] = list(a.span)
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(ln + "\n" for ln in lines)
