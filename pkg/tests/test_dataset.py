import json
import logging
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import allocation_optima
from helpers import cached_corpus
from conflict_rag.dataset import (
    IdCollision,
    MalformedLine,
    SplitMix64,
    allocate_strata,
    classify_source,
    load_jsonl,
    merge_refusals,
    normalize_record,
    normalize_timestamp,
    read_jsonl,
    stratified_split,
    stratum_key,
    write_jsonl,
    write_split,
)
from conflict_rag.schema import ConflictType, QueryRecord
from conflict_rag.synthetic import strip_annotations, synthetic_corpus

RAW = {
    "id": "#0001",
    "query": "When did the bridge open?",
    "retrieved_docs": [
        {"title": "A", "source": "reuters.com", "snippet": "It opened in 1932.",
         "timestamp": "March 5, 2023", "rank": 1},
        {"title": "B", "source": "nature.com", "snippet": "Opened  in 1932.", "timestamp": None},
        {"title": "A again", "source": "reuters.com", "snippet": "It opened in  1932.",
         "timestamp": "2023-03-05"},
    ],
    "conflict_type": "no conflict",
    "gold_answer": ["1932"],
    "crawl_batch": 7,
}


# -- reading -----------------------------------------------------------------

def test_read_three_lines(tmp_path, corpus):
    path = tmp_path / "x.jsonl"
    write_jsonl(path, corpus[:3])
    assert read_jsonl(path) == corpus[:3]


def test_blank_lines_skipped(tmp_path, corpus):
    path = tmp_path / "x.jsonl"
    lines = [json.dumps(r.to_dict()) for r in corpus[:2]]
    path.write_text(lines[0] + "\n\n   \n" + lines[1] + "\n", encoding="utf-8")
    loaded = load_jsonl(path)
    assert [r.id for r in loaded.records] == [corpus[0].id, corpus[1].id]
    assert loaded.line_numbers == [1, 4]


def test_truncated_line_names_line(tmp_path, corpus):
    path = tmp_path / "x.jsonl"
    good = json.dumps(corpus[0].to_dict())
    path.write_text(good + "\n" + good[:40] + "\n" + good + "\n", encoding="utf-8")
    with pytest.raises(MalformedLine) as err:
        load_jsonl(path, strict=True)
    assert err.value.line_no == 2
    assert ":2:" in str(err.value)
    lenient = load_jsonl(path)
    assert len(lenient.records) == 2
    assert [e.line_no for e in lenient.errors] == [2]


def test_violations_attached_not_fatal(tmp_path, corpus):
    bad = corpus[0].to_dict()
    bad["retrieved_docs"][0]["timestamp"] = "last week"
    path = tmp_path / "x.jsonl"
    write_jsonl(path, [bad])
    loaded = load_jsonl(path)
    assert len(loaded.records) == 1
    assert [v.rule for v in loaded.violations[1]] == ["timestamp not ISO-8601"]


# -- normalization -----------------------------------------------------------

@pytest.mark.parametrize("value, expected", [
    ("March 5, 2023", "2023-03-05"),
    ("2023-03-05T10:00:00Z", "2023-03-05"),
    ("2021", "2021"),
    ("2021-07", "2021-07"),
    ("July 2021", "2021-07"),
    (None, None),
    ("", None),
    (0, "1970-01-01"),
])
def test_timestamps(value, expected):
    assert normalize_timestamp(value)[0] == expected


def test_unparseable_timestamp_becomes_absent_with_note():
    iso, note = normalize_timestamp("sometime soon")
    assert iso is None and "unparseable" in note


def test_normalize_record():
    rec = normalize_record(RAW)
    assert [d.doc_id for d in rec.retrieved_docs] == ["d1", "d2"]
    assert rec.retrieved_docs[0].timestamp == "2023-03-05"
    assert rec.retrieved_docs[1].timestamp is None
    assert rec.retrieved_docs[0].extras == {"rank": 1}
    assert rec.conflict_type is ConflictType.NO_CONFLICT
    assert rec.gold_answer == "1932"
    assert rec.extras == {"crawl_batch": 7}
    assert rec.metadata["normalization_notes"] == ["dropped duplicate doc at position 3"]
    # one news and one academic source: the tie goes to news
    assert rec.metadata["domain"] == "news"


@pytest.mark.parametrize("source, category", [
    ("nature.com", "academic"),
    ("https://www.ncbi.nlm.nih.gov/pmc/articles/1", "academic"),
    ("cs.stanford.edu", "academic"),
    ("reuters.com", "news"),
    ("www.bbc.co.uk", "news"),
    ("en.wikipedia.org", "encyclopedic"),
    ("Britannica", "encyclopedic"),
    ("someblog.example.net", "other"),
    ("", "other"),
])
def test_domain_categories(source, category):
    assert classify_source(source) == category


def test_normalize_is_idempotent_on_raw():
    once = normalize_record(RAW)
    assert normalize_record(once.to_dict()) == once


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=538))
def test_normalize_is_identity_on_normalized(i):
    rec = cached_corpus()[i]
    assert normalize_record(rec.to_dict()) == rec


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a.", "b.", "c."]), min_size=1, max_size=6),
       st.lists(st.sampled_from(["reuters.com", "nature.com", "x.org"]), min_size=6, max_size=6))
def test_normalize_dedup_property(snippets, sources):
    raw = {"query": "q", "conflict_type": "No conflict",
           "retrieved_docs": [{"title": "", "source": s, "snippet": t}
                              for t, s in zip(snippets, sources)]}
    rec = normalize_record(raw)
    keys = [(d.snippet, d.source) for d in rec.retrieved_docs]
    assert len(keys) == len(set(keys)) == len(set(zip(snippets, sources)))
    assert normalize_record(rec.to_dict()) == rec


# -- refusal merge -----------------------------------------------------------

def test_merge_counts(corpus):
    conflicts = [r for r in corpus if not r.is_refusal]
    refusals = [r for r in corpus if r.is_refusal]
    assert (len(conflicts), len(refusals)) == (458, 81)
    merged = merge_refusals(conflicts, refusals)
    assert len(merged) == 539
    assert len({r.id for r in merged}) == 539
    assert all(r.metadata["provenance"] == "refusal" for r in merged[458:])


def test_merge_empty_refusals_is_identity(corpus):
    conflicts = [r for r in corpus if not r.is_refusal]
    assert merge_refusals(conflicts, []) == conflicts


def test_merge_id_collision(corpus):
    refusal = next(r for r in corpus if r.is_refusal)
    clash = QueryRecord.from_dict({**refusal.to_dict(), "id": corpus[0].id})
    with pytest.raises(IdCollision):
        merge_refusals([corpus[0]], [clash])


def test_merge_assigns_missing_ids(corpus):
    refusal = next(r for r in corpus if r.is_refusal)
    unnamed = QueryRecord.from_dict({k: v for k, v in refusal.to_dict().items() if k != "id"})
    merged = merge_refusals(corpus[:2], [unnamed])
    assert merged[-1].id == "#0003"


# -- split -------------------------------------------------------------------

def test_splitmix_reference_vector():
    g = SplitMix64(1234567)
    assert [g.next() for _ in range(5)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423,
        4593380528125082431, 16408922859458223821]


def _one_stratum(n):
    base = synthetic_corpus({ConflictType.NO_CONFLICT: n}, refusals=0)
    return base


@pytest.mark.parametrize("n, sizes", [(100, (80, 10, 10)), (10, (8, 1, 1))])
def test_single_stratum(n, sizes):
    res = stratified_split(_one_stratum(n), seed=42)
    assert (len(res.train), len(res.val), len(res.test)) == sizes


def test_small_stratum_goes_to_train(caplog):
    recs = synthetic_corpus({ConflictType.NO_CONFLICT: 20, ConflictType.MISINFORMATION: 2},
                            refusals=0)
    with caplog.at_level(logging.WARNING):
        res = stratified_split(recs, seed=1)
    assert res.manifest["small_strata"] == ["Conflict due to misinformation"]
    assert sum(r.conflict_type is ConflictType.MISINFORMATION for r in res.train) == 2
    assert "all assigned to train" in caplog.text


def test_bad_fractions():
    with pytest.raises(ValueError):
        stratified_split(_one_stratum(10), fractions=(0.5, 0.2, 0.2))


# frozen from oracles.allocation_optima (unique optimum)
EXPECTED_539 = {
    "Complementary information": [120, 15, 15],
    "Conflict due to misinformation": [10, 1, 2],
    "Conflict due to outdated information": [36, 5, 4],
    "Conflicting opinions or research outcomes": [72, 9, 9],
    "No conflict": [128, 16, 16],
    "refusal": [65, 8, 8],
}


def test_539_allocation(split):
    got = {k: [v["train"], v["val"], v["test"]] for k, v in split.manifest["per_stratum"].items()}
    assert got == EXPECTED_539
    assert split.manifest["sizes"] == {"train": 431, "val": 54, "test": 54}


def test_split_files_byte_identical(tmp_path, corpus):
    for name in ("a", "b"):
        write_split(stratified_split(corpus, seed=42), tmp_path / name)
    for f in ("train.jsonl", "val.jsonl", "test.jsonl", "split_manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_split_independent_of_input_order(corpus):
    a = stratified_split(corpus, seed=42)
    b = stratified_split(list(reversed(corpus)), seed=42)
    assert [r.id for r in a.test] == [r.id for r in b.test]


def test_split_works_on_unannotated_records(corpus):
    raw = [strip_annotations(r) for r in corpus if not r.is_refusal]
    res = stratified_split(raw, seed=3)
    assert len(res.train) + len(res.val) + len(res.test) == 458


_sizes = st.dictionaries(st.sampled_from([t.value for t in ConflictType] + ["refusal"]),
                         st.integers(min_value=3, max_value=60), min_size=1, max_size=6)
_fractions = st.sampled_from([(0.8, 0.1, 0.1), (0.7, 0.2, 0.1), (0.6, 0.2, 0.2), (0.5, 0.25, 0.25)])


@settings(max_examples=150, deadline=None)
@given(_sizes, _fractions)
def test_allocation_matches_oracle(sizes, fractions):
    fr = [Fraction(str(f)) for f in fractions]
    fr[-1] = 1 - fr[0] - fr[1]
    best, winners = allocation_optima(sizes, fr)
    got = allocate_strata(sizes, fr)
    assert got in winners
    if len(winners) == 1:
        assert got == winners[0]


@st.composite
def corpora(draw):
    mix = {t: draw(st.integers(min_value=0, max_value=40)) for t in ConflictType}
    return synthetic_corpus(mix, refusals=draw(st.integers(min_value=0, max_value=20)),
                            seed=draw(st.integers(min_value=0, max_value=5)))


@settings(max_examples=40, deadline=None)
@given(corpora(), st.integers(min_value=0, max_value=2**32), _fractions)
def test_partition_and_stratification(records, seed, fractions):
    res = stratified_split(records, fractions, seed)
    parts = res.parts()
    ids = Counter(r.id for p in parts.values() for r in p)
    assert ids == Counter(r.id for r in records)
    n = len(records)
    total = Counter(stratum_key(r) for r in records)
    small = set(res.manifest["small_strata"])
    for name, part in parts.items():
        size = len(part)
        counts = Counter(stratum_key(r) for r in part)
        for k in total:
            if k in small or size == 0:
                continue
            assert abs(Fraction(counts[k], size) - Fraction(total[k], n)) <= Fraction(1, size) + \
                Fraction(sum(total[s] for s in small), n)
        assert res.manifest["sizes"][name] == size
