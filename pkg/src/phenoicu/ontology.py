"""Phenotype ontology: OBO parsing, ancestor queries and upward aggregation.

Only the ``id``, ``name``, ``is_a`` and ``is_obsolete`` tags of ``[Term]``
stanzas are interpreted; everything else is kept aside and ignored.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, TextIO

TERM_ID_RE = re.compile(r"^HP:\d{7}$")


class OntologyError(ValueError):
    """Raised for malformed or inconsistent ontology input."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def is_term_id(value: str) -> bool:
    return bool(TERM_ID_RE.match(value))


@dataclass(frozen=True)
class Term:
    id: str
    name: str
    parents: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Ontology:
    terms: dict[str, Term]
    root: str
    _lines: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __contains__(self, term_id: str) -> bool:
        return term_id in self.terms

    def __len__(self) -> int:
        return len(self.terms)

    def name(self, term_id: str) -> str:
        return self._get(term_id).name

    def parents(self, term_id: str) -> list[str]:
        return sorted(self._get(term_id).parents)

    def _get(self, term_id: str) -> Term:
        try:
            return self.terms[term_id]
        except KeyError:
            raise KeyError(f"unknown term {term_id}") from None

    def ancestors(self, term_id: str) -> list[str]:
        return ancestors(self, term_id)

    def topological_order(self) -> list[str]:
        """Terms ordered parents-first; ties broken by id."""
        return _toposort(self.terms)


def _toposort(terms: dict[str, Term]) -> list[str]:
    children: dict[str, list[str]] = {t: [] for t in terms}
    indegree = {t: 0 for t in terms}
    for t in terms.values():
        for p in t.parents:
            children[p].append(t.id)
            indegree[t.id] += 1
    # Kahn's algorithm over a sorted frontier keeps the order deterministic
    ready = sorted(t for t, d in indegree.items() if d == 0)
    order = []
    while ready:
        t = ready.pop(0)
        order.append(t)
        for c in sorted(children[t]):
            indegree[c] -= 1
            if indegree[c] == 0:
                ready.append(c)
        ready.sort()
    if len(order) != len(terms):
        raise OntologyError("cycle detected")
    return order


def _find_cycle(terms: dict[str, Term]) -> list[str]:
    state: dict[str, int] = {}
    for start in sorted(terms):
        if start in state:
            continue
        stack = [(start, iter(sorted(terms[start].parents)))]
        path = [start]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                path.pop()
                continue
            if state.get(nxt) == 1:
                return path[path.index(nxt):] + [nxt]
            if nxt not in state:
                state[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(sorted(terms[nxt].parents))))
    return []


def parse_obo(source: str | TextIO | Iterable[str]) -> Ontology:
    """Parse ``[Term]`` stanzas of an OBO flat file.

    Raises :class:`OntologyError` (carrying a line number) on a malformed or
    duplicate id, a dangling ``is_a`` target, a cycle, or a missing root.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = (ln.rstrip("\r\n") for ln in source)

    raw: list[dict] = []
    current: dict | None = None
    in_term = False
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r").strip()
        if not line or line.startswith("!"):
            continue
        if line.startswith("[") and line.endswith("]"):
            in_term = line == "[Term]"
            current = {"line": lineno, "id": None, "name": "", "is_a": [], "obsolete": False} if in_term else None
            if in_term:
                raw.append(current)
            continue
        if not in_term or current is None:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise OntologyError(f"expected 'key: value', got {line!r}", lineno)
        key = key.strip()
        value = value.strip()
        if key == "id":
            if not is_term_id(value):
                raise OntologyError(f"malformed term id {value!r}", lineno)
            current["id"] = value
        elif key == "name":
            current["name"] = value
        elif key == "is_a":
            target = value.split(" !", 1)[0].strip()
            if not is_term_id(target):
                raise OntologyError(f"malformed is_a target {target!r}", lineno)
            current["is_a"].append((target, lineno))
        elif key == "is_obsolete":
            current["obsolete"] = value.lower() == "true"

    terms: dict[str, Term] = {}
    lines_of: dict[str, int] = {}
    for st in raw:
        if st["id"] is None:
            raise OntologyError("stanza without id", st["line"])
        if st["obsolete"]:
            continue
        if st["id"] in terms:
            raise OntologyError(f"duplicate id {st['id']}", st["line"])
        parents = set()
        for target, lineno in st["is_a"]:
            if target == st["id"]:
                raise OntologyError(f"self-edge on {target}", lineno)
            parents.add(target)
        terms[st["id"]] = Term(st["id"], st["name"], frozenset(parents))
        lines_of[st["id"]] = st["line"]

    # obsolete targets are dropped rather than treated as dangling
    obsolete = {st["id"] for st in raw if st["obsolete"]}
    for tid, term in list(terms.items()):
        for p in term.parents:
            if p not in terms and p not in obsolete:
                raise OntologyError(f"is_a target {p} of {tid} is not defined", lines_of[tid])
        if term.parents - terms.keys():
            terms[tid] = Term(tid, term.name, frozenset(term.parents & terms.keys()))

    cycle = _find_cycle(terms)
    if cycle:
        raise OntologyError("cycle detected: " + " -> ".join(cycle), lines_of[cycle[0]])
    if not terms:
        raise OntologyError("no terms found")

    roots = sorted(t for t, term in terms.items() if not term.parents)
    if len(roots) != 1:
        raise OntologyError(f"expected exactly one root, found {len(roots)}: {', '.join(roots[:5])}")
    return Ontology(terms=terms, root=roots[0], _lines=lines_of)


def load_obo(path: str | Path) -> Ontology:
    with open(path, encoding="utf-8") as fh:
        return parse_obo(fh)


def bundled_ontology() -> Ontology:
    """The ~60-term HPO subset shipped for tests and synthetic cohorts."""
    text = resources.files("phenoicu.data").joinpath("hpo_subset.obo").read_text(encoding="utf-8")
    return parse_obo(text)


def serialize_obo(onto: Ontology) -> str:
    out = ["format-version: 1.2", ""]
    for tid in sorted(onto.terms):
        term = onto.terms[tid]
        out.append("[Term]")
        out.append(f"id: {tid}")
        out.append(f"name: {term.name}")
        for p in sorted(term.parents):
            out.append(f"is_a: {p} ! {onto.terms[p].name}")
        out.append("")
    return "\n".join(out)


def ancestors(onto: Ontology, term_id: str) -> list[str]:
    """Transitive closure over ``is_a``, excluding ``term_id``, sorted."""
    seen: set[str] = set()
    queue = deque(onto._get(term_id).parents)
    while queue:
        t = queue.popleft()
        if t in seen:
            continue
        seen.add(t)
        queue.extend(onto.terms[t].parents)
    return sorted(seen)


def aggregate_to_parents(onto: Ontology, active: Iterable[str], levels: int = 1,
                         replace: bool = False) -> list[str]:
    """Add every ancestor within ``levels`` is_a hops of an active term.

    With ``replace=True`` the input terms that gained a parent are dropped and
    only the reached parents (plus terms without parents) are returned.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    active = set(active)
    for t in active:
        onto._get(t)
    reached: set[str] = set()
    frontier = set(active)
    for _ in range(levels):
        nxt = set()
        for t in frontier:
            nxt.update(onto.terms[t].parents)
        nxt -= reached
        reached |= nxt
        frontier = nxt
        if not frontier:
            break
    if replace and levels > 0:
        kept = {t for t in active if not onto.terms[t].parents}
        return sorted(kept | reached)
    return sorted(active | reached)
