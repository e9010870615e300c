import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from medadapt.corpus import (
    PUBMEDQA_OPTIONS, Dataset, McqRecord, Triplet, dataset_stats, dump_pubmedqa, exam_to_text, kg_to_text,
    load_pubmedqa, load_records, load_triplets, sample_subgraph, split, with_extra_context,
)
from medadapt.errors import DataParseError, TemplateError, ValidationError

from conftest import labeled, unlabeled, write_pubmedqa


def test_load_pqal_all_labeled(tmp_path):
    ds = load_pubmedqa(write_pubmedqa(tmp_path / "l.json", ["yes", "no", "maybe", "yes"]), "PQA-L")
    assert len(ds) == 4
    assert all(r.gold is not None for r in ds)
    assert [r.gold_label for r in ds] == ["yes", "no", "maybe", "yes"]
    assert ds[0].options == PUBMEDQA_OPTIONS


def test_load_pqau_has_no_gold(tmp_path):
    ds = load_pubmedqa(write_pubmedqa(tmp_path / "u.json", [None, None]), "PQA-U")
    assert all(r.gold is None and r.long_answer for r in ds)


def test_empty_file_is_parse_error(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    with pytest.raises(DataParseError):
        load_pubmedqa(p, "PQA-L")


def test_malformed_record_names_its_id(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"123": {"QUESTION": "q?"}}))
    with pytest.raises(DataParseError) as err:
        load_pubmedqa(p, "PQA-L")
    assert err.value.record_id == "123"


def test_bad_label_is_validation_error(tmp_path):
    p = write_pubmedqa(tmp_path / "bad.json", ["perhaps"])
    with pytest.raises(ValidationError):
        load_pubmedqa(p, "PQA-L")


def test_pqaa_without_maybe(tmp_path):
    ds = load_pubmedqa(write_pubmedqa(tmp_path / "a.json", ["yes"] * 9 + ["no"]), "PQA-A")
    assert dataset_stats(ds).label_proportions.get("maybe", 0.0) == 0.0


def test_record_invariants():
    with pytest.raises(ValidationError):
        McqRecord("x", "q", (), ())
    with pytest.raises(ValidationError):
        McqRecord("x", "q", (), (("A", "a"), ("A", "b")))
    with pytest.raises(ValidationError):
        McqRecord("x", "q", (), PUBMEDQA_OPTIONS, gold="D")
    with pytest.raises(ValidationError):
        McqRecord("x", "q", (), PUBMEDQA_OPTIONS, subset_tag="PQA-U")
    with pytest.raises(ValidationError):
        McqRecord("x", "q", (), PUBMEDQA_OPTIONS, gold="A", long_answer="la", subset_tag="PQA-U")
    # once pseudo-labeled, a PQA-U record may carry gold
    McqRecord("x", "q", (), PUBMEDQA_OPTIONS, gold="A", long_answer="la", subset_tag="PQA-U", pseudo_source="voc")


def test_duplicate_ids_rejected():
    with pytest.raises(ValidationError):
        Dataset([labeled("a", "yes"), labeled("a", "no")])


def test_jsonl_round_trip(tmp_path):
    ds = Dataset([labeled("a", "yes"), unlabeled("b"), labeled("c", "maybe")])
    ds.to_jsonl(tmp_path / "d.jsonl")
    assert load_records(tmp_path / "d.jsonl") == ds


def test_official_round_trip(tmp_path):
    src = write_pubmedqa(tmp_path / "l.json", ["yes", "maybe"])
    ds = load_pubmedqa(src, "PQA-L")
    dump_pubmedqa(ds, tmp_path / "again.json")
    assert load_pubmedqa(tmp_path / "again.json", "PQA-L") == ds


def test_stats_all_yes():
    ds = Dataset([labeled(str(i), "yes") for i in range(10)])
    assert dataset_stats(ds).label_proportions == {"yes": 1.0}


def test_stats_hand_computed_lengths():
    recs = [
        McqRecord("1", "one two three", ("a b", "c"), PUBMEDQA_OPTIONS, "A", "x y"),
        McqRecord("2", "one", ("a b c d",), PUBMEDQA_OPTIONS, "B", None),
        McqRecord("3", "one two", (), PUBMEDQA_OPTIONS, None, "x y z w"),
    ]
    rep = dataset_stats(Dataset(recs))
    assert rep.record_count == 3
    assert rep.avg_question_len == pytest.approx((3 + 1 + 2) / 3)
    assert rep.avg_context_len == pytest.approx((3 + 4 + 0) / 3)
    assert rep.avg_long_answer_len == pytest.approx((2 + 4) / 2)
    assert rep.label_proportions == {"yes": 0.5, "no": 0.5}
    assert rep.labeled_count == 2


def test_stats_empty_errors():
    with pytest.raises(ValidationError):
        dataset_stats(Dataset([]))


def test_stats_table_proportions(pqal_1000):
    rep = dataset_stats(pqal_1000)
    assert rep.record_count == 1000
    assert rep.label_proportions == pytest.approx({"yes": 0.552, "no": 0.338, "maybe": 0.110})


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["yes", "no", "maybe", None]), min_size=1, max_size=40))
def test_stats_proportions_sum_to_one(labels):
    recs = [labeled(str(i), l) if l else unlabeled(str(i)) for i, l in enumerate(labels)]
    props = dataset_stats(Dataset(recs)).label_proportions
    if any(labels):
        assert abs(sum(props.values()) - 1.0) <= 1e-9
    else:
        assert props == {}


def test_split_identity(pqal_1000):
    (only,) = split(pqal_1000, [1.0], seed=3)
    assert only == pqal_1000


def test_split_halves_stratified(pqal_1000):
    a, b = split(pqal_1000, [0.5, 0.5], seed=11)
    ca = Counter(r.gold_label for r in a)
    cb = Counter(r.gold_label for r in b)
    for label in ("yes", "no", "maybe"):
        assert abs(ca[label] - cb[label]) <= 1


def test_split_deterministic(pqal_1000):
    assert split(pqal_1000, [0.3, 0.7], 5) == split(pqal_1000, [0.3, 0.7], 5)


@pytest.mark.parametrize("fractions", [[0.5, 0.6], [0.0, 1.0], [], [-0.5, 1.5]])
def test_split_bad_fractions(pqal_1000, fractions):
    with pytest.raises(ValidationError):
        split(pqal_1000, fractions, 0)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.sampled_from(["yes", "no", "maybe", None]), min_size=1, max_size=60),
    st.lists(st.integers(1, 10), min_size=1, max_size=4),
    st.integers(0, 2**32),
)
def test_split_partition_law(labels, weights, seed):
    ds = Dataset([labeled(str(i), l) if l else unlabeled(str(i)) for i, l in enumerate(labels)])
    total = sum(weights)
    fractions = [w / total for w in weights[:-1]]
    fractions.append(1.0 - sum(fractions))
    parts = split(ds, fractions, seed)
    ids = [rid for p in parts for rid in p.ids]
    assert len(ids) == len(set(ids))
    assert set(ids) == set(ds.ids)


def _triplets(n):
    return [Triplet(f"s{i}", "relates to", f"o{i}") for i in range(n)]


def test_sample_subgraph_examples():
    trip = _triplets(100)
    assert sample_subgraph(trip, 0, 1) == []
    full = sample_subgraph(trip[:10], 10, 1)
    assert sorted(full, key=lambda t: t.subject) == sorted(trip[:10], key=lambda t: t.subject)
    assert sample_subgraph(trip, 5, 42) == sample_subgraph(trip, 5, 42)
    assert len(set(sample_subgraph(trip, 5, 42))) == 5
    with pytest.raises(ValidationError):
        sample_subgraph(trip, 101, 0)


def test_kg_to_text_examples():
    assert kg_to_text([Triplet("aspirin", "treats", "headache")], "{s} {p} {o}.") == ["aspirin treats headache."]
    assert kg_to_text([], "{s} {p} {o}.") == []
    assert len(kg_to_text(_triplets(7), "{o} is {p} of {s}")) == 7
    with pytest.raises(TemplateError):
        kg_to_text(_triplets(1), "{s} {p}")


def test_kg_to_text_does_not_resubstitute():
    # a value that looks like a slot stays literal
    assert kg_to_text([Triplet("{o}", "is", "x")], "{s} {p} {o}") == ["{o} is x"]


@given(st.lists(st.tuples(*[st.text(min_size=1, max_size=8)] * 3), max_size=30))
def test_kg_to_text_count(rows):
    assert len(kg_to_text([Triplet(*r) for r in rows], "{s}|{p}|{o}")) == len(rows)


def test_triplet_fields_non_empty():
    with pytest.raises(ValidationError):
        Triplet("a", "", "c")


def test_load_triplets_tsv_and_jsonl(tmp_path):
    (tmp_path / "t.tsv").write_text("aspirin\ttreats\theadache\n\nx\ty\tz\n")
    assert load_triplets(tmp_path / "t.tsv") == [Triplet("aspirin", "treats", "headache"), Triplet("x", "y", "z")]
    (tmp_path / "t.jsonl").write_text('{"subject": "a", "predicate": "b", "object": "c"}\n')
    assert load_triplets(tmp_path / "t.jsonl") == [Triplet("a", "b", "c")]
    (tmp_path / "bad.tsv").write_text("only\ttwo\n")
    with pytest.raises(DataParseError):
        load_triplets(tmp_path / "bad.tsv")


def test_exam_to_text():
    out = exam_to_text([{"question": "Q?", "answer": "A", "explanation": "E"}], "{question} {answer}: {explanation}")
    assert out == ["Q? A: E"]
    with pytest.raises(TemplateError):
        exam_to_text([], "{question}")


def test_with_extra_context_keeps_original():
    rec = labeled("a", "yes")
    out = with_extra_context(rec, "LONG ANSWER. x")
    assert out.contexts == rec.contexts + ("LONG ANSWER. x",)
