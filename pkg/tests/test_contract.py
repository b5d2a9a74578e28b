import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contract_cases import BASE, CONFORMANT, MALFORMED, REFUSAL
from conflict_rag.contract import (
    END_SENTINEL,
    UnparseableOutput,
    VerdictEntry,
    emit_completion,
    emit_output,
    extract_citations,
    parse_completion,
    parse_output,
    sanitize,
    sanitize_with_diagnostics,
    validate_corpus,
)
from conflict_rag.schema import ABSTAIN_SENTINEL, ConflictType

TWO_DOC = """<think>
[
  {"doc_id": "d1", "verdict": "supports", "verdict_reason": "Names the capital.", "key_fact": "Paris is the capital.", "source_quality": "high"},
  {"doc_id": "d2", "verdict": "supports", "verdict_reason": "Same claim.", "key_fact": "Paris is the capital of France.", "source_quality": "high"}
]
Both documents give the same city.
No conflict — all agree
The sources agree, so the answer is direct.
</think>

Paris is the capital [d1][d2]."""


def codes(diags):
    return [d.code for d in diags]


# -- sanitize ----------------------------------------------------------------

def test_sanitize_cuts_at_sentinel():
    assert sanitize("X\n[[END-OF-ANSWER]]\ngarbage") == "X"


def test_sanitize_without_sentinel():
    text, diags = sanitize_with_diagnostics("X")
    assert text == "X"
    assert codes(diags) == ["missing-sentinel"]


def test_sanitize_trims_and_normalizes_newlines():
    assert sanitize("\n\nX\n\n[[END-OF-ANSWER]]") == "X"
    assert sanitize("A\r\nB\r\n[[END-OF-ANSWER]]\r\n") == "A\nB"


# -- parse_output ------------------------------------------------------------

def test_conformant_two_doc_completion():
    p = parse_output(TWO_DOC, 2)
    assert len(p.verdicts) == 2
    assert p.conflict_label is ConflictType.NO_CONFLICT
    assert p.conflict_reason == "all agree"
    assert p.citations == ("d1", "d2")
    assert p.diagnostics == ()
    assert not p.abstain


def test_abstention_marker():
    p = parse_output(sanitize(REFUSAL), 2)
    assert p.abstain
    assert p.final_answer == ABSTAIN_SENTINEL
    assert p.citations == ()
    assert p.diagnostics == ()


def test_hyphen_label_recovered_with_diagnostic():
    p = parse_output(TWO_DOC.replace("No conflict — all agree", "No conflict - all agree"), 2)
    assert p.conflict_label is ConflictType.NO_CONFLICT
    assert p.conflict_reason == "all agree"
    assert p.codes == ["label-wrong-dash"]


def test_en_dash_label_recovered():
    p = parse_output(TWO_DOC.replace("No conflict — all agree", "No conflict – all agree"), 2)
    assert p.conflict_label is ConflictType.NO_CONFLICT
    assert p.codes == ["label-wrong-dash"]


def test_no_think_block_is_unparseable():
    with pytest.raises(UnparseableOutput):
        parse_output("Paris is the capital [d1].", 1)
    _, parsed, diags = parse_completion("just prose", 1)
    assert parsed is None
    assert codes(diags) == ["missing-sentinel", "unparseable"]


def test_nested_think_open():
    text = TWO_DOC.replace("Both documents", "<think>\nBoth documents")
    assert "think-nested" in parse_output(text, 2).codes


def test_doc_id_range_in_array():
    text = TWO_DOC.replace('"doc_id": "d2"', '"doc_id": "d1-d2"')
    assert "doc-id-range" in parse_output(text, 2).codes


def test_missing_em_dash():
    bare = parse_output(TWO_DOC.replace("No conflict — all agree", "No conflict"), 2)
    assert bare.conflict_label is ConflictType.NO_CONFLICT
    assert bare.codes == ["label-missing-dash"]
    # without any separator the label cannot be told apart from prose
    fused = parse_output(TWO_DOC.replace("No conflict — all agree", "No conflict all agree"), 2)
    assert fused.conflict_label is None
    assert fused.codes == ["label-line-missing"]


def test_diagnostic_spans_are_byte_offsets():
    text = BASE.replace("[d2].\n[[END", "[d5].\n[[END")
    clean, _, diags = parse_completion(text, 3)
    (d,) = diags
    raw = clean.encode("utf-8")
    assert raw[d.span[0]:d.span[1]] == b"[d5]"
    assert d.to_dict("#0001") == {"record_id": "#0001", "tier": "strict",
                                  "code": "citation-out-of-bounds",
                                  "message": d.message, "span": list(d.span)}


def test_length_advisory_is_not_a_diagnostic():
    p = parse_output(TWO_DOC, 2)
    assert [a.code for a in p.advisories] == ["answer-length"]


# -- extract_citations -------------------------------------------------------

def test_extract_in_order_with_duplicates():
    assert extract_citations("A [d1]. B [d3][d1].", 3) == (["d1", "d3", "d1"], [])


def test_extract_out_of_bounds():
    cites, diags = extract_citations("A [d5].", 3)
    assert cites == ["d5"]
    assert codes(diags) == ["citation-out-of-bounds"]


def test_extract_uncited_sentence():
    cites, diags = extract_citations("A. B [d1].", 3)
    assert cites == ["d1"]
    assert codes(diags) == ["uncited-sentence"]
    assert "'A.'" in diags[0].message


def test_extract_on_abstention_skips_sentence_rule():
    assert extract_citations(ABSTAIN_SENTINEL, 3) == ([], [])


# -- validate_corpus ---------------------------------------------------------

def test_corpus_counts():
    report = validate_corpus([BASE, BASE, BASE, "no think here"], 3)
    assert (report.valid, report.unparseable, report.recoverable) == (3, 1, 0)


def test_empty_corpus():
    assert validate_corpus([], []).to_dict() == {
        "total": 0, "valid": 0, "recoverable": 0, "unparseable": 0, "diagnostics": {}}


def test_fixture_corpus_frequencies():
    report = validate_corpus([m[1] for m in MALFORMED], [m[2] for m in MALFORMED])
    assert report.recoverable == 20
    assert dict(report.diagnostics) == {m[3]: 1 for m in MALFORMED}


# -- fixture suite -----------------------------------------------------------

@pytest.mark.parametrize("name, text, n_docs, code", MALFORMED, ids=[m[0] for m in MALFORMED])
def test_malformed_fixture(name, text, n_docs, code):
    _, _, diags = parse_completion(text, n_docs)
    assert codes(diags) == [code]


@pytest.mark.parametrize("name, text, n_docs", CONFORMANT, ids=[c[0] for c in CONFORMANT])
def test_conformant_fixture(name, text, n_docs):
    _, parsed, diags = parse_completion(text, n_docs)
    assert parsed is not None and diags == []


def test_fixture_suite_is_fast():
    start = time.perf_counter()
    for _, text, n, _ in MALFORMED:
        parse_completion(text, n)
    for _, text, n in CONFORMANT:
        parse_completion(text, n)
    assert time.perf_counter() - start < 1.0


# -- properties --------------------------------------------------------------

_word = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)
_phrase = st.lists(_word, min_size=1, max_size=12).map(" ".join)
_sentence = _phrase.map(lambda s: s[0].upper() + s[1:])


@st.composite
def conformant(draw):
    n = draw(st.integers(min_value=1, max_value=6))
    abstain = draw(st.booleans())
    entries = []
    for i in range(1, n + 1):
        verdict = "irrelevant" if abstain else draw(
            st.sampled_from(["supports", "partially supports", "irrelevant"]))
        entries.append(VerdictEntry(
            f"d{i}", verdict, draw(_sentence) + ".",
            "" if verdict == "irrelevant" else draw(_sentence) + ".",
            draw(st.sampled_from(["high", "low"]))))
    label = draw(st.sampled_from(list(ConflictType))).value
    if abstain:
        answer = ABSTAIN_SENTINEL
    else:
        k = draw(st.integers(min_value=1, max_value=5))
        answer = " ".join(
            f"{draw(_sentence)} [d{draw(st.integers(1, n))}]." for _ in range(k))
    text = emit_completion(entries, label, draw(_phrase), draw(_sentence) + ".",
                           draw(_sentence) + ".", answer, sentinel=True)
    return text, n


@settings(max_examples=200, deadline=None)
@given(conformant())
def test_emitted_outputs_parse_clean_and_round_trip(case):
    text, n = case
    clean, parsed, diags = parse_completion(text, n)
    assert diags == []
    again = parse_output(emit_output(parsed), n)
    assert again.content() == parsed.content()
    assert again.diagnostics == ()


@settings(max_examples=200, deadline=None)
@given(conformant())
def test_citations_are_position_faithful(case):
    text, n = case
    parsed = parse_output(sanitize(text), n)
    rescan, _ = extract_citations(" ".join(f"[{c}]" for c in parsed.citations), n)
    assert tuple(rescan) == parsed.citations


@settings(max_examples=200, deadline=None)
@given(conformant(), st.booleans())
def test_abstention_exclusivity(case, add_cite):
    text, n = case
    if add_cite:
        text = text.replace(f"{ABSTAIN_SENTINEL}\n", f"{ABSTAIN_SENTINEL}\nSee [d1].\n")
    _, parsed, diags = parse_completion(text, n)
    flagged = "cited-while-abstaining" in codes(diags)
    assert flagged == (parsed.abstain and bool(parsed.citations))


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=400), st.integers(min_value=1, max_value=9))
def test_parser_never_raises_unexpectedly(text, n):
    try:
        parse_output(sanitize(text), n)
    except UnparseableOutput:
        pass


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=len(BASE) - 1), st.text(max_size=5))
def test_mutated_completions_never_crash(pos, junk):
    text = BASE[:pos] + junk + BASE[pos + 1:]
    parse_completion(text, 3)
    json.dumps([d.to_dict() for d in parse_completion(text, 3)[2]])


def test_sentinel_constant():
    assert END_SENTINEL == "[[END-OF-ANSWER]]"
