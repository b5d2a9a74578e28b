"""Deterministic synthetic corpora shaped like annotated CONFLICTS records.

The records are fully annotated (notes, conflict reason, think trace and
expected response) and pass ``validate_record``. They are test and demo
fixtures, not data.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import replace
from typing import Callable

from .contract import END_SENTINEL, VerdictEntry, compose_completion, render_think
from .dataset import majority_domain
from .schema import (
    ABSTAIN_SENTINEL,
    ConflictType,
    ExpectedResponse,
    PerDocNote,
    QueryRecord,
    RetrievedDoc,
)

# Conflict-type counts for a 539-record corpus: 458 labelled records plus 81 refusals.
DEFAULT_MIX = {
    ConflictType.NO_CONFLICT: 160,
    ConflictType.COMPLEMENTARY: 150,
    ConflictType.CONFLICTING_OPINIONS: 90,
    ConflictType.OUTDATED: 45,
    ConflictType.MISINFORMATION: 13,
}
DEFAULT_REFUSALS = 81

_CITIES = (
    "Lisbon", "Oslo", "Nairobi", "Lima", "Hanoi", "Quito", "Tallinn", "Accra", "Dakar",
    "Bergen", "Porto", "Cusco", "Kyoto", "Perth", "Leeds", "Graz", "Turin", "Malmo",
    "Ghent", "Bilbao", "Krakow", "Brno", "Cork", "Aarhus", "Tartu", "Split", "Pune",
    "Cebu", "Recife", "Rosario",
)
_PREFIXES = ("Aldor", "Brisk", "Calder", "Dunmore", "Elwyn", "Fenwick", "Garrow", "Halden",
             "Ivers", "Jarrow", "Kestrel", "Lowry", "Marlow", "Norcott", "Orwell", "Pemberton",
             "Quarry", "Rowan", "Stroud", "Thorne")
_KINDS = ("Institute", "Foundation", "Council", "Society", "Agency", "Trust", "Observatory",
          "Museum", "Academy", "Union")
_HIGH = ("nature.com", "reuters.com", "en.wikipedia.org", "bbc.com", "who.int")
_LOW = ("blog.example.net", "forum.example.org", "viralnews.example.com")


def _org(i: int) -> str:
    return f"{_PREFIXES[i % len(_PREFIXES)]} {_KINDS[(i // len(_PREFIXES)) % len(_KINDS)]}"


class _Builder:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.docs: list[RetrievedDoc] = []
        self.notes: list[PerDocNote] = []

    def add(self, snippet: str, verdict: str, quality: str, *, title: str, year: int,
            reason: str) -> str:
        doc_id = f"d{len(self.docs) + 1}"
        pool = _HIGH if quality == "high" else _LOW
        source = self.rng.choice(pool)
        taken = {(d.snippet, d.source) for d in self.docs}
        if (snippet, source) in taken:
            # keep docs distinct so the record survives deduplication unchanged
            free = [s for s in pool if (snippet, s) not in taken]
            if free:
                source = free[0]
            else:
                snippet = f"{snippet[:-1]} (copy {len(self.docs) + 1})."
        self.docs.append(RetrievedDoc(doc_id, title, source, snippet, f"{year}-0{self.rng.randint(1, 9)}-1{self.rng.randint(0, 9)}"))
        relevant = verdict != "irrelevant"
        self.notes.append(PerDocNote(doc_id, verdict, reason,
                                     snippet.rstrip(".") + "." if relevant else "",
                                     snippet if relevant else None, quality))
        return doc_id


def _record(idx: int, ctype: ConflictType | None, rng: random.Random) -> QueryRecord:
    org = _org(idx)
    city, alt = rng.sample(_CITIES, 2)
    old, new = sorted(rng.sample(range(2008, 2024), 2))
    b = _Builder(rng)
    query = f"Where is the {org} headquarters located?"
    gold = city
    title = f"{org} overview"

    if ctype is None:  # refusal: nothing on topic
        for _ in range(rng.randint(2, 4)):
            b.add(f"The {org} cafeteria changed its lunch menu in {rng.randint(2010, 2023)}.",
                  "irrelevant", rng.choice(("high", "low")), title=f"{org} news", year=old,
                  reason="The snippet is about the cafeteria and says nothing about the headquarters.")
        ctype, gold = ConflictType.NO_CONFLICT, None
        reason = "All documents discuss unrelated topics, so no claims about the headquarters can conflict."
        reasoning = "d1 and the remaining documents cover unrelated news only, so there is nothing to compare."
        bridge = ("No document states where the headquarters is. The evidence is insufficient, "
                  "so the answer must be a refusal.")
        answer, abstain = ABSTAIN_SENTINEL, True
    elif ctype is ConflictType.NO_CONFLICT:
        a = b.add(f"Reports consistently confirm that the {org} headquarters is located in {city}.",
                  "supports", "high", title=title, year=new,
                  reason="The snippet names the headquarters city directly.")
        c = b.add(f"Officials confirm that the {org} headquarters is located in {city}.",
                  "supports", "low", title=title, year=new,
                  reason="The snippet repeats the same city for the headquarters.")
        reason = f"{a} and {c} agree on the headquarters city with no divergence."
        reasoning = f"{a} and {c} report the same city, so there is agreement and no mechanism of divergence."
        bridge = f"Both documents name {city}. The answer follows directly from {a} and {c}."
        answer = (f"Reports consistently confirm that the {org} headquarters is located in {city} "
                  f"[{a}][{c}].")
        abstain = False
    elif ctype is ConflictType.COMPLEMENTARY:
        a = b.add(f"The {org} headquarters is located in {city}.", "supports", "high",
                  title=title, year=new, reason="The snippet gives the headquarters city.")
        c = b.add(f"Additionally, the {org} runs a regional office in {alt}.",
                  "partially supports", "low", title=f"{org} offices", year=new,
                  reason="The snippet adds a regional office but not the headquarters.")
        reason = f"{a} gives the headquarters while {c} adds a regional office; the facts complement each other."
        reasoning = f"{a} covers the headquarters and {c} covers a branch, a contextual-scope difference without contradiction."
        bridge = f"The headquarters city comes from {a}. The regional office from {c} completes the picture."
        answer = (f"The {org} headquarters is located in {city} [{a}]. "
                  f"Additionally, the {org} runs a regional office in {alt} [{c}].")
        abstain = False
    elif ctype is ConflictType.CONFLICTING_OPINIONS:
        a = b.add(f"Some planners argue the {org} headquarters should stay in {city}.",
                  "partially supports", "high", title=f"{org} debate", year=new,
                  reason="The snippet gives one opinion on the headquarters.")
        c = b.add(f"However, others argue the {org} headquarters should move to {alt}.",
                  "partially supports", "low", title=f"{org} debate", year=new,
                  reason="The snippet gives an opposing opinion on the headquarters.")
        gold = None
        reason = f"{a} and {c} hold opposing views on where the headquarters belongs."
        reasoning = f"{a} favours {city} while {c} favours {alt}, a methodological and value-based disagreement."
        bridge = "The documents state opinions rather than a settled fact. The answer presents both sides."
        answer = (f"Some planners argue the {org} headquarters should stay in {city} [{a}]. "
                  f"However, others argue the {org} headquarters should move to {alt} [{c}].")
        abstain = False
    elif ctype is ConflictType.OUTDATED:
        c = b.add(f"As of {new} the {org} headquarters is located in {city}.", "supports", "high",
                  title=title, year=new, reason="The newer snippet gives the current city.")
        a = b.add(f"In {old} the {org} headquarters was located in {alt}.",
                  "partially supports", "low", title=f"{org} history", year=old,
                  reason="The older snippet gives a former location.")
        reason = f"{a} reflects an older location while {c} reports the newer one."
        reasoning = f"{a} is from {old} and {c} is from {new}, so the divergence is temporal."
        bridge = f"The newer document {c} outranks the older {a}. The answer prefers the recent city."
        answer = (f"As of {new} the {org} headquarters is located in {city} [{c}]. "
                  f"In {old} the {org} headquarters was located in {alt} [{a}].")
        abstain = False
    else:
        a = b.add(f"The {org} headquarters is located in {city}.", "supports", "high",
                  title=title, year=new, reason="The snippet from a reliable outlet names the city.")
        c = b.add(f"A viral post makes the false claim that the {org} headquarters is located in {alt}.",
                  "partially supports", "low", title=f"{org} rumor", year=new,
                  reason="The snippet repeats a claim it labels false.")
        reason = f"{c} repeats a false claim that {a} contradicts with reliable reporting."
        reasoning = f"{a} is a reliable report and {c} is a viral post, so the divergence is one of factual accuracy."
        bridge = f"The reliable document {a} settles the city. The claim in {c} is false."
        answer = (f"The {org} headquarters is located in {city} [{a}]. "
                  f"A viral post makes the false claim that the {org} headquarters is located in {alt} [{c}].")
        abstain = False

    for _ in range(rng.randint(0, 2)):
        b.add(f"The {org} published an annual budget summary in {rng.randint(2010, 2023)}.",
              "irrelevant", "low", title=f"{org} budget", year=new,
              reason="The snippet is about the budget, not the headquarters.")

    entries = [VerdictEntry(n.doc_id, n.verdict, n.verdict_reason, n.key_fact, n.source_quality)
               for n in b.notes]
    think = render_think(entries, ctype.value, reason, reasoning, bridge)
    if abstain:
        response = ExpectedResponse(ABSTAIN_SENTINEL, (), True, bridge)
    else:
        cited = [n.doc_id for n in b.notes if f"[{n.doc_id}]" in answer]
        quality = {n.doc_id: n.source_quality for n in b.notes}
        response = ExpectedResponse(answer, tuple(sorted(cited, key=lambda d: quality[d] != "high")))
    return QueryRecord(query=query, retrieved_docs=tuple(b.docs), conflict_type=ctype,
                       id=f"#{idx:04d}", per_doc_notes=tuple(b.notes), conflict_reason=reason,
                       gold_answer=gold, expected_response=response, think=think,
                       metadata={"category": "synthetic",
                                 "domain": majority_domain(d.source for d in b.docs),
                                 **({"provenance": "refusal"} if abstain else {})})


def synthetic_corpus(mix: dict[ConflictType, int] | None = None, refusals: int = DEFAULT_REFUSALS,
                     seed: int = 0) -> list[QueryRecord]:
    """Labelled records in mix order, then refusals; ids ``#0001`` onward."""
    rng = random.Random(seed)
    mix = DEFAULT_MIX if mix is None else mix
    plan: list[ConflictType | None] = [t for t, n in mix.items() for _ in range(n)]
    plan += [None] * refusals
    return [_record(i, t, rng) for i, t in enumerate(plan, start=1)]


def gold_completion(record: QueryRecord, *, sentinel: bool = True) -> str:
    """The completion a perfect model would emit for ``record``."""
    er = record.expected_response
    answer = ABSTAIN_SENTINEL if er.abstain else er.answer
    text = compose_completion(record.think, answer)
    return text + f"\n{END_SENTINEL}" if sentinel else text


# -- perturbations used for the mixed golden run ----------------------------


def _swap_label(record: QueryRecord) -> str:
    others = [t for t in ConflictType if t is not record.conflict_type]
    wrong = others[len(record.id) % len(others)]
    return gold_completion(record).replace(f"\n{record.conflict_type.value} —",
                                           f"\n{wrong.value} —", 1)


def _hyphen_label(record: QueryRecord) -> str:
    return gold_completion(record).replace(f"\n{record.conflict_type.value} —",
                                           f"\n{record.conflict_type.value} -", 1)


def _abstain(record: QueryRecord) -> str:
    return compose_completion(record.think, ABSTAIN_SENTINEL) + f"\n{END_SENTINEL}"


def _answer_anyway(record: QueryRecord) -> str:
    claim = f"The {record.query.split('the ', 1)[1].split(' headquarters')[0]} headquarters is in Lisbon [d1]."
    return compose_completion(record.think, claim) + f"\n{END_SENTINEL}"


def _wrong_city(record: QueryRecord) -> str:
    # every city in the answer is replaced, so records without gold_answer change too
    er = record.expected_response
    answer = re.sub(r"\b(?:%s)\b" % "|".join(map(re.escape, _CITIES)), "Atlantis", er.answer)
    return compose_completion(record.think, answer) + f"\n{END_SENTINEL}"


def _drop_citations(record: QueryRecord) -> str:
    er = record.expected_response
    answer = re.sub(r" ?\[d\d+\]", "", er.answer)
    return compose_completion(record.think, answer) + f"\n{END_SENTINEL}"


def _no_think(record: QueryRecord) -> str:
    return record.expected_response.answer + f"\n{END_SENTINEL}"


def _flip_verdict(record: QueryRecord) -> str:
    text = gold_completion(record)
    return text.replace('"verdict": "supports"', '"verdict": "partially supports"', 1)


PERTURBATIONS: dict[str, Callable[[QueryRecord], str]] = {
    "gold": gold_completion,
    "swap_label": _swap_label,
    "hyphen_label": _hyphen_label,
    "abstain": _abstain,
    "answer_anyway": _answer_anyway,
    "wrong_city": _wrong_city,
    "drop_citations": _drop_citations,
    "no_think": _no_think,
    "flip_verdict": _flip_verdict,
}


def perturbation_plan(records: list[QueryRecord]) -> dict[str, str]:
    """Fixed, position-based assignment of a perturbation to every record id."""
    answerable = ["swap_label", "hyphen_label", "abstain", "wrong_city", "drop_citations",
                  "no_think", "flip_verdict", "gold", "gold"]
    plan = {}
    k = 0
    for i, r in enumerate(records):
        if r.expected_response.abstain:
            plan[r.id] = "answer_anyway" if i % 3 == 0 else "gold"
        else:
            plan[r.id] = answerable[k % len(answerable)]
            k += 1
    return plan


def mixed_completions(records: list[QueryRecord]) -> dict[str, str]:
    plan = perturbation_plan(records)
    return {r.id: PERTURBATIONS[plan[r.id]](r) for r in records}


def strip_annotations(record: QueryRecord) -> QueryRecord:
    """Back to the normalized (pre-annotation) shape."""
    return replace(record, per_doc_notes=None, conflict_reason=None,
                   expected_response=None, think=None)


_DOC_HEAD_RE = re.compile(r"^\[(d\d+)\] title=", re.MULTILINE)


def reference_annotator(annotated: list[QueryRecord]) -> Callable:
    """A completer that answers every annotation stage from finished records.

    Stage 1 returns the stored notes (one object in per-doc mode), stage 2 the
    stored conflict reason, stage 3 the gold completion. Usable wherever a
    gateway is expected.
    """
    by_id = {r.id: r for r in annotated}

    def complete(bundle) -> str:
        record = by_id[bundle.record_id]
        if bundle.mode == "stage1":
            notes = [n.to_dict() for n in record.per_doc_notes]
            if "doc_id" in bundle.placeholders_resolved:
                wanted = _DOC_HEAD_RE.search(bundle.user).group(1)
                return json.dumps(next(n for n in notes if n["doc_id"] == wanted))
            return json.dumps(notes, indent=1)
        if bundle.mode == "stage2":
            return json.dumps({"conflict_reason": record.conflict_reason})
        if bundle.mode == "stage3":
            return gold_completion(record)
        raise ValueError(f"not an annotation prompt: {bundle.mode}")

    return complete
