import io
import random

import pytest

from phenoicu.annotate import (AnnotationError, Lexicon, PersistencyMap, Persistency, bundled_lexicon,
                               bundled_persistency, dump_annotations, load_annotations, load_lexicon,
                               load_persistency, match_lexicon)
from phenoicu.ontology import bundled_ontology

HYPO = "HP:0002615"


def terms(anns):
    return [a.term for a in anns]


def test_direct_hit_and_case():
    lex = Lexicon({"hypotension": HYPO})
    assert terms(match_lexicon(lex, "persistent hypotension noted", 12)) == [HYPO]
    anns = match_lexicon(lex, "HYPOTENSION", 3, "n1")
    assert terms(anns) == [HYPO]
    assert anns[0].hour == 3 and anns[0].note_id == "n1"


def test_longest_match_wins():
    lex = Lexicon({"pain": "HP:0000001", "chest pain": "HP:0000002"})
    assert terms(match_lexicon(lex, "reports chest pain", 0)) == ["HP:0000002"]
    assert terms(match_lexicon(lex, "reports chest   PAIN and pain", 0)) == ["HP:0000002", "HP:0000001"]


def test_word_boundaries():
    lex = Lexicon({"pain": "HP:0000001"})
    assert match_lexicon(lex, "flew to Spain", 0) == []
    assert terms(match_lexicon(lex, "pain, painful", 0)) == ["HP:0000001"]


def test_spans_do_not_overlap_and_point_at_text():
    lex = bundled_lexicon()
    text = "Chest pain with low blood pressure; abdominal pain. Fever and hypotension."
    anns = match_lexicon(lex, text, 5)
    spans = [a.span for a in anns]
    assert spans == sorted(spans)
    for (a0, b0), (a1, _) in zip(spans, spans[1:]):
        assert b0 <= a1
    assert text[spans[0][0]:spans[0][1]].lower() == "chest pain"


def test_insertion_order_irrelevant():
    items = list(bundled_lexicon().entries.items())
    text = "pain, chest pain, sepsis, hypotension, lung cancer and fever; chf"
    ref = match_lexicon(Lexicon(items), text, 0)
    for seed in range(5):
        random.Random(seed).shuffle(items)
        assert match_lexicon(Lexicon(items), text, 0) == ref


def test_no_match_across_document_boundary():
    lex = Lexicon({"chest pain": "HP:0000002"})
    a = match_lexicon(lex, "chest", 0)
    b = match_lexicon(lex, "pain", 0)
    assert a == [] and b == []


def test_bundled_lexicon_terms_exist_in_ontology():
    onto = bundled_ontology()
    assert all(t in onto for t in bundled_lexicon().entries.values())


def test_load_annotations_examples():
    anns = load_annotations(io.StringIO('{"term":"HP:0002615","hour":12,"note_id":"n1"}\n'))
    assert len(anns) == 1 and anns[0].term == HYPO and anns[0].hour == 12
    assert load_annotations(io.StringIO("")) == []
    with pytest.raises(AnnotationError) as err:
        load_annotations(io.StringIO('{"term":"HP:12","hour":1,"note_id":"n"}\n'))
    assert err.value.line == 1


def test_load_annotations_errors_carry_line():
    text = '{"term":"HP:0002615","hour":1,"note_id":"a"}\n{"term":"HP:0002615","hour":-1,"note_id":"b"}\n'
    with pytest.raises(AnnotationError) as err:
        load_annotations(io.StringIO(text))
    assert err.value.line == 2
    with pytest.raises(AnnotationError):
        load_annotations(io.StringIO('{"term":"HP:0002615","hour":50,"note_id":"a"}\n'), max_hour=50)
    with pytest.raises(AnnotationError):
        load_annotations(io.StringIO("not json\n"))


def test_dump_load_round_trip():
    anns = load_annotations(io.StringIO(
        '{"term":"HP:0002615","hour":2,"note_id":"n","episode_id":"E","span":[0,4]}\n'))
    assert load_annotations(io.StringIO(dump_annotations(anns))) == anns


def test_persistency_default_transient():
    pm = PersistencyMap({"HP:0000819": Persistency.PERSISTENT})
    assert pm.is_persistent("HP:0000819")
    assert not pm.is_persistent("HP:0002615")
    assert pm["HP:0002615"] is Persistency.TRANSIENT


def test_tsv_loaders():
    pm = load_persistency(io.StringIO("HP:0000819\tpersistent\nHP:0002615\ttransient\n"))
    assert pm.is_persistent("HP:0000819")
    lex = load_lexicon(io.StringIO("# surface\tterm\nLow  Blood Pressure\tHP:0002615\n"))
    assert lex.entries == {"low blood pressure": HYPO}
    with pytest.raises(AnnotationError):
        load_persistency(io.StringIO("HP:0000819\tsometimes\n"))
    bundled = bundled_persistency()
    assert bundled.is_persistent("HP:0000819")
