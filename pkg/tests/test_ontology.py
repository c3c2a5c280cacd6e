import io

import pytest
from hypothesis import given, settings, strategies as st

from phenoicu.ontology import (OntologyError, aggregate_to_parents, ancestors, bundled_ontology, parse_obo,
                               serialize_obo)

from conftest import TOY_OBO

A, B, C, D, E = (f"HP:000000{i}" for i in range(1, 6))


def chain_obo():
    return ("[Term]\nid: HP:0000001\nname: A\n\n[Term]\nid: HP:0000002\nname: B\nis_a: HP:0000001\n\n"
            "[Term]\nid: HP:0000003\nname: C\nis_a: HP:0000002 ! B\n")


def test_minimal_stanza_is_single_root():
    o = parse_obo("[Term]\nid: HP:0000001\nname: All\n")
    assert len(o) == 1
    assert o.root == "HP:0000001"
    assert ancestors(o, "HP:0000001") == []


def test_is_a_comment_is_stripped(toy_ontology):
    assert toy_ontology.parents(B) == [A]
    assert toy_ontology.name(B) == "B"


def test_cycle_rejected_with_line_number():
    text = ("[Term]\nid: HP:0000001\nname: R\n\n[Term]\nid: HP:0000002\nname: X\nis_a: HP:0000003\n\n"
            "[Term]\nid: HP:0000003\nname: Y\nis_a: HP:0000002\n")
    with pytest.raises(OntologyError) as err:
        parse_obo(text)
    assert "cycle" in str(err.value)
    assert err.value.line is not None


@pytest.mark.parametrize("text", [
    "[Term]\nid: HP:12\nname: bad\n",
    "[Term]\nid: HP:0000001\nname: a\n\n[Term]\nid: HP:0000001\nname: b\n",
    "[Term]\nid: HP:0000001\nname: a\nis_a: HP:0000001\n",
    "[Term]\nid: HP:0000001\nname: a\nis_a: HP:0000009\n",
])
def test_malformed_inputs_rejected(text):
    with pytest.raises(OntologyError):
        parse_obo(text)


def test_obsolete_terms_and_unknown_keys_ignored():
    text = ("[Term]\nid: HP:0000001\nname: A\ndef: \"root\" []\nsynonym: \"x\" EXACT []\n\n"
            "[Term]\nid: HP:0000002\nname: gone\nis_obsolete: true\n\n[Typedef]\nid: part_of\nname: part of\n")
    o = parse_obo(text)
    assert len(o) == 1


def test_crlf_input():
    o = parse_obo(chain_obo().replace("\n", "\r\n"))
    assert ancestors(o, C) == [A, B]


def test_chain_and_diamond_ancestors(toy_ontology):
    o = parse_obo(chain_obo())
    assert ancestors(o, C) == [A, B]
    assert ancestors(toy_ontology, D) == [A, B, C]
    assert ancestors(toy_ontology, E) == [A, B, C, D]


def test_unknown_term_raises(toy_ontology):
    with pytest.raises(KeyError):
        ancestors(toy_ontology, "HP:0999999")
    with pytest.raises(KeyError):
        aggregate_to_parents(toy_ontology, ["HP:0999999"])


def test_aggregation_examples(toy_ontology):
    o = parse_obo(chain_obo())
    assert aggregate_to_parents(o, [C], levels=1) == [B, C]
    assert aggregate_to_parents(o, [C], levels=0) == [C]
    assert aggregate_to_parents(toy_ontology, [D], levels=2) == [A, B, C, D]


def test_replace_mode_drops_children(toy_ontology):
    assert aggregate_to_parents(toy_ontology, [E], levels=1, replace=True) == [D]


def test_round_trip(toy_ontology):
    again = parse_obo(serialize_obo(toy_ontology))
    assert again.terms == toy_ontology.terms
    assert again.root == toy_ontology.root


def test_bundled_ontology_is_acyclic_dag():
    o = bundled_ontology()
    order = o.topological_order()
    pos = {t: i for i, t in enumerate(order)}
    assert len(order) == len(o) >= 50
    for t in o.terms.values():
        for p in t.parents:
            assert pos[p] < pos[t.id]
    assert any(len(t.parents) > 1 for t in o.terms.values())
    assert o.name("HP:0012531") == "Pain"


def test_parse_accepts_stream(toy_ontology):
    assert parse_obo(io.StringIO(TOY_OBO)).terms == toy_ontology.terms


TERMS = sorted(bundled_ontology().terms)


@settings(max_examples=60, deadline=None)
@given(st.sets(st.sampled_from(TERMS), max_size=8), st.sets(st.sampled_from(TERMS), max_size=8),
       st.integers(0, 4))
def test_aggregation_superset_and_monotone(s, extra, levels):
    o = bundled_ontology()
    t = s | extra
    agg_s = set(aggregate_to_parents(o, s, levels))
    agg_t = set(aggregate_to_parents(o, t, levels))
    assert s <= agg_s
    assert agg_s <= agg_t
    anc_s = set().union(*(ancestors(o, x) for x in s)) if s else set()
    anc_t = set().union(*(ancestors(o, x) for x in t)) if t else set()
    assert anc_s <= anc_t
    assert aggregate_to_parents(o, s, levels) == sorted(agg_s)
