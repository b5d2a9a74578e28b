"""Domain types shared by the whole pipeline, plus record validation.

All types are frozen dataclasses. Lists are stored as tuples so records can be
shared between threads without copying. Fields that the JSONL schemas do not
define are kept in ``extras`` and written back out untouched.
"""

from __future__ import annotations

import datetime as _dt
import enum
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

ABSTAIN_SENTINEL = "CANNOT ANSWER, INSUFFICIENT EVIDENCE"

DOC_ID_RE = re.compile(r"^d[1-9][0-9]*$")
CITATION_RE = re.compile(r"\[d(\d+)\]")

VERDICTS = ("supports", "partially supports", "irrelevant")
SOURCE_QUALITIES = ("high", "low")
RELATIONS = ("entails", "contradicts", "neutral")


class SchemaError(ValueError):
    """A JSON object cannot be turned into a domain type at all."""


class ConflictType(str, enum.Enum):
    NO_CONFLICT = "No conflict"
    COMPLEMENTARY = "Complementary information"
    CONFLICTING_OPINIONS = "Conflicting opinions or research outcomes"
    OUTDATED = "Conflict due to outdated information"
    MISINFORMATION = "Conflict due to misinformation"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def from_label(cls, label: str) -> "ConflictType":
        """Canonical constructor: byte-exact match only."""
        for member in cls:
            if member.value == label:
                return member
        raise SchemaError(f"not a conflict type label: {label!r}")


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def word_count(text: str) -> int:
    return len(text.split())


def normalize_conflict_type(label: str) -> tuple[ConflictType, bool]:
    """Map case/whitespace variants onto a canonical label.

    Returns ``(label, normalized)`` where ``normalized`` is True when the input
    was not already byte-equal to the canonical text.
    """
    try:
        return ConflictType.from_label(label), False
    except SchemaError:
        pass
    key = normalize_ws(label).casefold()
    for member in ConflictType:
        if member.value.casefold() == key:
            return member, True
    raise SchemaError(f"not a conflict type label: {label!r}")


@dataclass(frozen=True)
class WordLimits:
    verdict_reason: int
    key_fact: int
    conflict_reason: int


# Annotation text is held to 60 words; the inference contract allows 80 for
# per-doc text.
ANNOTATION_LIMITS = WordLimits(verdict_reason=60, key_fact=60, conflict_reason=60)
INFERENCE_LIMITS = WordLimits(verdict_reason=80, key_fact=80, conflict_reason=60)


def _extras(data: Mapping[str, Any], known: Iterable[str]) -> dict[str, Any]:
    known = set(known)
    return {k: v for k, v in data.items() if k not in known}


@dataclass(frozen=True)
class RetrievedDoc:
    doc_id: str
    title: str
    source: str
    snippet: str
    timestamp: str | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    _KEYS = ("doc_id", "title", "source", "snippet", "timestamp")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RetrievedDoc":
        if not isinstance(data, Mapping):
            raise SchemaError("retrieved doc must be an object")
        return cls(
            doc_id=str(data.get("doc_id", "")),
            title=str(data.get("title") or ""),
            source=str(data.get("source") or ""),
            snippet=str(data.get("snippet") or ""),
            timestamp=data.get("timestamp"),
            extras=_extras(data, cls._KEYS),
        )

    def to_dict(self) -> dict[str, Any]:
        out = {
            "doc_id": self.doc_id,
            "title": self.title,
            "source": self.source,
            "snippet": self.snippet,
            "timestamp": self.timestamp,
        }
        out.update(self.extras)
        return out


@dataclass(frozen=True)
class PerDocNote:
    doc_id: str
    verdict: str
    verdict_reason: str = ""
    key_fact: str = ""
    quote: str | None = None
    source_quality: str = "low"
    extras: dict[str, Any] = field(default_factory=dict)

    _KEYS = ("doc_id", "verdict", "verdict_reason", "key_fact", "quote", "source_quality")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PerDocNote":
        if not isinstance(data, Mapping):
            raise SchemaError("per-doc note must be an object")
        # the think-trace array in older exports keys the doc as "id"
        doc_id = data.get("doc_id", data.get("id", ""))
        return cls(
            doc_id=str(doc_id),
            verdict=str(data.get("verdict", "")),
            verdict_reason=str(data.get("verdict_reason") or ""),
            key_fact=str(data.get("key_fact") or ""),
            quote=data.get("quote"),
            source_quality=str(data.get("source_quality", "")),
            extras=_extras(data, cls._KEYS + ("id",)),
        )

    def to_dict(self, *, with_quote: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "doc_id": self.doc_id,
            "verdict": self.verdict,
            "verdict_reason": self.verdict_reason,
            "key_fact": self.key_fact,
        }
        if with_quote and self.quote is not None:
            out["quote"] = self.quote
        out["source_quality"] = self.source_quality
        if with_quote:
            out.update(self.extras)
        return out


@dataclass(frozen=True)
class ExpectedResponse:
    answer: str
    evidence: tuple[str, ...] = ()
    abstain: bool = False
    abstain_reason: str = ""

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExpectedResponse":
        if not isinstance(data, Mapping):
            raise SchemaError("expected_response must be an object")
        evidence = data.get("evidence") or []
        if not isinstance(evidence, list):
            raise SchemaError("expected_response.evidence must be a list")
        return cls(
            answer=str(data.get("answer") or ""),
            evidence=tuple(str(e) for e in evidence),
            abstain=bool(data.get("abstain", False)),
            abstain_reason=str(data.get("abstain_reason") or ""),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "answer": self.answer,
            "evidence": list(self.evidence),
            "abstain": self.abstain,
            "abstain_reason": self.abstain_reason,
        }


@dataclass(frozen=True)
class JudgeVerdict:
    adherent: bool
    rationale: str = ""
    rationale_missing: bool = False


class EntailmentRelation(str, enum.Enum):
    ENTAILS = "entails"
    CONTRADICTS = "contradicts"
    NEUTRAL = "neutral"


@dataclass(frozen=True)
class QueryRecord:
    query: str
    retrieved_docs: tuple[RetrievedDoc, ...]
    conflict_type: ConflictType
    id: str | None = None
    per_doc_notes: tuple[PerDocNote, ...] | None = None
    conflict_reason: str | None = None
    gold_answer: str | None = None
    expected_response: ExpectedResponse | None = None
    think: str | None = None
    metadata: dict[str, Any] | None = None
    extras: dict[str, Any] = field(default_factory=dict)
    # set when the conflict label needed case/whitespace normalization on read
    label_normalized: bool = field(default=False, compare=False)

    _KEYS = (
        "id", "query", "retrieved_docs", "per_doc_notes", "conflict_type",
        "conflict_reason", "gold_answer", "expected_response", "think", "metadata",
    )

    @property
    def n_docs(self) -> int:
        return len(self.retrieved_docs)

    @property
    def is_refusal(self) -> bool:
        return bool(self.metadata) and self.metadata.get("provenance") == "refusal"

    def doc(self, doc_id: str) -> RetrievedDoc | None:
        for d in self.retrieved_docs:
            if d.doc_id == doc_id:
                return d
        return None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QueryRecord":
        if not isinstance(data, Mapping):
            raise SchemaError("record must be a JSON object")
        if "query" not in data:
            raise SchemaError("record has no 'query'")
        docs = data.get("retrieved_docs")
        if not isinstance(docs, list):
            raise SchemaError("'retrieved_docs' must be a list")
        if "conflict_type" not in data or not isinstance(data["conflict_type"], str):
            raise SchemaError("record has no string 'conflict_type'")
        label, normalized = normalize_conflict_type(data["conflict_type"])
        notes = data.get("per_doc_notes")
        if notes is not None and not isinstance(notes, list):
            raise SchemaError("'per_doc_notes' must be a list")
        er = data.get("expected_response")
        metadata = data.get("metadata")
        if metadata is not None and not isinstance(metadata, dict):
            raise SchemaError("'metadata' must be an object")
        return cls(
            id=None if data.get("id") is None else str(data["id"]),
            query=str(data["query"]),
            retrieved_docs=tuple(RetrievedDoc.from_dict(d) for d in docs),
            per_doc_notes=None if notes is None else tuple(PerDocNote.from_dict(n) for n in notes),
            conflict_type=label,
            conflict_reason=data.get("conflict_reason"),
            gold_answer=data.get("gold_answer"),
            expected_response=None if er is None else ExpectedResponse.from_dict(er),
            think=data.get("think"),
            metadata=None if metadata is None else dict(metadata),
            extras=_extras(data, cls._KEYS),
            label_normalized=normalized,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.id is not None:
            out["id"] = self.id
        out["query"] = self.query
        out["retrieved_docs"] = [d.to_dict() for d in self.retrieved_docs]
        if self.per_doc_notes is not None:
            out["per_doc_notes"] = [n.to_dict() for n in self.per_doc_notes]
        out["conflict_type"] = self.conflict_type.value
        if self.conflict_reason is not None:
            out["conflict_reason"] = self.conflict_reason
        if self.gold_answer is not None:
            out["gold_answer"] = self.gold_answer
        if self.expected_response is not None:
            out["expected_response"] = self.expected_response.to_dict()
        if self.think is not None:
            out["think"] = self.think
        if self.metadata is not None:
            out["metadata"] = self.metadata
        out.update(self.extras)
        return out


@dataclass(frozen=True)
class Violation:
    record_id: str | None
    field: str
    rule: str
    message: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id, "field": self.field, "rule": self.rule,
                "message": self.message}

    def __str__(self) -> str:
        rid = self.record_id or "<no id>"
        return f"{rid}: {self.field}: {self.rule}" + (f" ({self.message})" if self.message else "")


_ISO_DATE_RE = re.compile(r"^\d{4}(-\d{2}(-\d{2})?)?$")


def is_iso8601(value: str) -> bool:
    """True for ``YYYY``, ``YYYY-MM``, ``YYYY-MM-DD`` or a full ISO datetime."""
    if _ISO_DATE_RE.match(value):
        parts = [int(p) for p in value.split("-")]
        try:
            _dt.date(parts[0], parts[1] if len(parts) > 1 else 1, parts[2] if len(parts) > 2 else 1)
        except ValueError:
            return False
        return True
    candidate = value[:-1] + "+00:00" if value.endswith("Z") else value
    if "T" not in candidate:
        return False
    try:
        _dt.datetime.fromisoformat(candidate)
    except ValueError:
        return False
    return True


def is_citation_free(text: str) -> bool:
    return CITATION_RE.search(text) is None


def validate_record(record: QueryRecord, limits: WordLimits = ANNOTATION_LIMITS) -> list[Violation]:
    """Check every schema invariant; returns an empty list for a conformant record."""
    rid = record.id
    out: list[Violation] = []

    def flag(fld: str, rule: str, message: str = "") -> None:
        out.append(Violation(rid, fld, rule, message))

    ids = [d.doc_id for d in record.retrieved_docs]
    if not ids:
        flag("retrieved_docs", "retrieved_docs must be nonempty")
    for i, doc in enumerate(record.retrieved_docs):
        if not DOC_ID_RE.match(doc.doc_id):
            flag(f"retrieved_docs[{i}].doc_id", "doc_id must match d<positive integer>", doc.doc_id)
        if doc.timestamp is not None:
            if not isinstance(doc.timestamp, str):
                flag(f"retrieved_docs[{i}].timestamp", "timestamp must be a string or null")
            elif doc.timestamp == "":
                flag(f"retrieved_docs[{i}].timestamp", "timestamp must not be empty string",
                     "absence is null")
            elif not is_iso8601(doc.timestamp):
                flag(f"retrieved_docs[{i}].timestamp", "timestamp not ISO-8601", doc.timestamp)
    if len(set(ids)) != len(ids):
        flag("retrieved_docs", "doc_ids not unique")
    if ids and ids != [f"d{i}" for i in range(1, len(ids) + 1)]:
        flag("retrieved_docs", "doc_ids not contiguous", ",".join(ids))

    if record.per_doc_notes is not None:
        note_ids = [n.doc_id for n in record.per_doc_notes]
        if note_ids != ids:
            flag("per_doc_notes", "notes must cover every doc_id exactly once, in order",
                 ",".join(note_ids))
        for i, note in enumerate(record.per_doc_notes):
            where = f"per_doc_notes[{i}]"
            if note.verdict not in VERDICTS:
                flag(f"{where}.verdict", "verdict not in lexicon", note.verdict)
            if note.verdict == "irrelevant" and note.key_fact != "":
                flag(f"{where}.key_fact", "key_fact must be empty", "verdict is irrelevant")
            if note.source_quality not in SOURCE_QUALITIES:
                flag(f"{where}.source_quality", "source_quality must be high or low",
                     note.source_quality)
            if word_count(note.verdict_reason) > limits.verdict_reason:
                flag(f"{where}.verdict_reason", f"more than {limits.verdict_reason} words")
            if word_count(note.key_fact) > limits.key_fact:
                flag(f"{where}.key_fact", f"more than {limits.key_fact} words")
            if note.quote:
                doc = record.doc(note.doc_id)
                if doc is None or normalize_ws(note.quote) not in normalize_ws(doc.snippet):
                    flag(f"{where}.quote", "quote must be a verbatim span of the snippet")

    if record.conflict_reason is not None and word_count(record.conflict_reason) > limits.conflict_reason:
        flag("conflict_reason", f"more than {limits.conflict_reason} words")

    er = record.expected_response
    if er is not None:
        if er.abstain:
            if not is_citation_free(er.answer):
                flag("expected_response.answer", "abstaining answer must carry no citations")
            if er.evidence:
                flag("expected_response.evidence", "abstaining response must have empty evidence")
        else:
            if not er.evidence:
                flag("expected_response.evidence", "evidence must be nonempty when answering")
            for e in er.evidence:
                if e not in ids:
                    flag("expected_response.evidence", "evidence doc_id not in record", e)
    if record.is_refusal and (er is None or not er.abstain):
        flag("expected_response.abstain", "refusal record must abstain")

    if record.think is not None:
        out.extend(_think_divergence(record))
    return out


def _think_divergence(record: QueryRecord) -> list[Violation]:
    from .contract import UnparseableOutput, compose_completion, parse_output

    answer = record.expected_response.answer if record.expected_response else ""
    if record.expected_response and record.expected_response.abstain:
        answer = ABSTAIN_SENTINEL
    try:
        parsed = parse_output(compose_completion(record.think, answer), max(record.n_docs, 1))
    except UnparseableOutput as exc:
        return [Violation(record.id, "think", "think trace unparseable", str(exc))]
    out = []
    if parsed.conflict_label is not None and parsed.conflict_label != record.conflict_type:
        out.append(Violation(record.id, "think", "think label diverges from conflict_type",
                             parsed.conflict_label.value))
    if (record.conflict_reason is not None and parsed.conflict_label is not None
            and normalize_ws(parsed.conflict_reason) != normalize_ws(record.conflict_reason)):
        out.append(Violation(record.id, "conflict_reason",
                             "conflict_reason diverges from think label line"))
    return out
