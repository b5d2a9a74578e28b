"""Three-stage annotation that turns raw records into full training completions.

Each stage re-asks at most ``repair_budget`` times, appending the list of
broken rules to the prompt. A record that still fails goes to the review
queue with its full transcript.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .contract import (
    THINK_CLOSE,
    UnparseableOutput,
    parse_output,
    sanitize,
)
from .gateway import extract_json_object
from .prompts import (
    PromptBundle,
    build_annotation_prompt,
    build_repair_prompt,
    build_stage1_doc_prompt,
)
from .schema import (
    ABSTAIN_SENTINEL,
    ANNOTATION_LIMITS,
    SOURCE_QUALITIES,
    VERDICTS,
    ExpectedResponse,
    PerDocNote,
    QueryRecord,
    normalize_ws,
    validate_record,
    word_count,
)

log = logging.getLogger(__name__)

REPAIR_BUDGET = 2
_RANGE_RE = re.compile(r"\bd\d+ ?[–—-] ?d\d+\b")


class StageFailure(RuntimeError):
    def __init__(self, record_id: str | None, stage: int, violations: list[str],
                 transcript: list[dict[str, str]]):
        super().__init__(f"record {record_id}: stage {stage} failed: {'; '.join(violations)}")
        self.record_id = record_id
        self.stage = stage
        self.violations = violations
        self.transcript = transcript

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id, "stage": self.stage,
                "violations": self.violations, "transcript": self.transcript}


def _ask(complete, bundle: PromptBundle, check: Callable[[str], tuple[Any, list[str]]],
         stage: int, repair_budget: int) -> Any:
    """Call, check, and re-ask with the violation list until clean or out of budget."""
    transcript: list[dict[str, str]] = []
    current = bundle
    for _ in range(repair_budget + 1):
        reply = complete(current)
        transcript.append({"system": current.system, "user": current.user, "reply": reply})
        value, violations = check(reply)
        if not violations:
            return value
        current = build_repair_prompt(bundle, reply, violations)
    raise StageFailure(bundle.record_id, stage, violations, transcript)


def _completer(gateway):
    return gateway.chat_complete if hasattr(gateway, "chat_complete") else gateway


# ---------------------------------------------------------------------------
# stage 1


def _json_payload(reply: str, opener: str) -> Any:
    text = reply.strip()
    if text.startswith("```"):
        text = text.strip("`")
        text = text.split("\n", 1)[1] if "\n" in text else ""
    if opener == "{":
        return extract_json_object(text)
    start, end = text.find("["), text.rfind("]")
    if start == -1 or end < start:
        return None
    try:
        return json.loads(text[start:end + 1])
    except json.JSONDecodeError:
        return None


def note_violations(record: QueryRecord, note: PerDocNote) -> list[str]:
    out = []
    doc = record.doc(note.doc_id)
    where = note.doc_id
    if doc is None:
        return [f"{where}: unknown doc_id"]
    if note.verdict not in VERDICTS:
        out.append(f"{where}: verdict must be one of {', '.join(VERDICTS)}")
    if note.source_quality not in SOURCE_QUALITIES:
        out.append(f"{where}: source_quality must be high or low")
    if word_count(note.verdict_reason) > ANNOTATION_LIMITS.verdict_reason:
        out.append(f"{where}: verdict_reason exceeds {ANNOTATION_LIMITS.verdict_reason} words")
    if word_count(note.key_fact) > ANNOTATION_LIMITS.key_fact:
        out.append(f"{where}: key_fact exceeds {ANNOTATION_LIMITS.key_fact} words")
    if not note.verdict_reason.strip():
        out.append(f"{where}: verdict_reason is empty")
    if note.verdict == "irrelevant":
        if note.key_fact:
            out.append(f"{where}: key_fact must be empty when the verdict is irrelevant")
        if note.quote:
            out.append(f"{where}: quote must be empty when the verdict is irrelevant")
    elif note.verdict in VERDICTS:
        if not note.key_fact.strip():
            out.append(f"{where}: key_fact is empty")
        if not note.quote or not note.quote.strip():
            out.append(f"{where}: quote is empty")
        elif normalize_ws(note.quote) not in normalize_ws(doc.snippet):
            out.append(f"{where}: quote is not a verbatim span of the snippet")
    return out


def _to_note(obj: Any) -> PerDocNote | None:
    if not isinstance(obj, dict):
        return None
    note = PerDocNote.from_dict(obj)
    return replace(note, quote=note.quote or None, extras={})


def _check_notes(record: QueryRecord, payload: Any) -> tuple[list[PerDocNote], list[str]]:
    if not isinstance(payload, list):
        return [], ["reply must be a JSON array of note objects"]
    notes = [_to_note(o) for o in payload]
    if any(n is None for n in notes):
        return [], ["every array element must be a JSON object"]
    want = [d.doc_id for d in record.retrieved_docs]
    got = [n.doc_id for n in notes]
    if got != want:
        return [], [f"notes must cover {', '.join(want)} once each, in order; got {', '.join(got)}"]
    violations = [v for n in notes for v in note_violations(record, n)]
    return notes, violations


def run_stage1(record: QueryRecord, gateway, *, batched: bool = True,
               repair_budget: int = REPAIR_BUDGET) -> list[PerDocNote]:
    if not record.retrieved_docs:
        raise ValueError(f"record {record.id}: no documents to annotate")
    complete = _completer(gateway)
    if batched:
        bundle = build_annotation_prompt(record, 1)
        return _ask(complete, bundle,
                    lambda reply: _check_notes(record, _json_payload(reply, "[")),
                    1, repair_budget)

    notes = []
    for doc in record.retrieved_docs:
        def check(reply: str, doc=doc):
            note = _to_note(_json_payload(reply, "{"))
            if note is None:
                return None, ["reply must be one JSON object"]
            if note.doc_id != doc.doc_id:
                return None, [f"doc_id must be {doc.doc_id}"]
            return note, note_violations(record, note)
        notes.append(_ask(complete, build_stage1_doc_prompt(record, doc), check, 1, repair_budget))
    return notes


# ---------------------------------------------------------------------------
# stage 2


def reason_violations(reason: str) -> list[str]:
    out = []
    if not reason.strip():
        out.append("conflict_reason is empty")
    if word_count(reason) > ANNOTATION_LIMITS.conflict_reason:
        out.append(f"conflict_reason exceeds {ANNOTATION_LIMITS.conflict_reason} words")
    if "\n" in reason.strip():
        out.append("conflict_reason must be a single line")
    if "—" in reason:
        out.append("conflict_reason must not contain an em dash")
    if _RANGE_RE.search(reason):
        out.append("conflict_reason must not use doc id ranges")
    if re.search(r"\[d\d+\]", reason):
        out.append("conflict_reason must not contain bracketed citations")
    return out


def run_stage2(record: QueryRecord, notes: Sequence[PerDocNote], gateway, *,
               repair_budget: int = REPAIR_BUDGET) -> str:
    bundle = build_annotation_prompt(record, 2, {"notes": list(notes)})

    def check(reply: str):
        obj = _json_payload(reply, "{")
        if obj is None or not isinstance(obj.get("conflict_reason"), str):
            return None, ['reply must be a JSON object {"conflict_reason": "..."}']
        reason = normalize_ws(obj["conflict_reason"])
        return reason, reason_violations(obj["conflict_reason"])

    return _ask(_completer(gateway), bundle, check, 2, repair_budget)


# ---------------------------------------------------------------------------
# stage 3


def order_evidence(cited: Sequence[str], notes: Sequence[PerDocNote]) -> tuple[str, ...]:
    """Distinct cited docs, high-credibility first, otherwise in citation order."""
    quality = {n.doc_id: n.source_quality for n in notes}
    unique = list(dict.fromkeys(cited))
    return tuple(sorted(unique, key=lambda d: quality.get(d) != "high"))


def _stage3_check(record: QueryRecord, notes: Sequence[PerDocNote], reason: str, reply: str):
    text = sanitize(reply)
    try:
        parsed = parse_output(text, record.n_docs, limits=ANNOTATION_LIMITS)
    except UnparseableOutput as exc:
        return None, [f"output contract: {exc}"]
    violations = [f"{d.code}: {d.message}" for d in parsed.diagnostics]
    if parsed.conflict_label != record.conflict_type:
        violations.append(f"label line must start with {record.conflict_type.value!r}")
    if normalize_ws(parsed.conflict_reason) != normalize_ws(reason):
        violations.append("label line must carry the given conflict reason verbatim")
    want = [(n.doc_id, n.verdict, n.verdict_reason, n.key_fact, n.source_quality) for n in notes]
    got = [(v.doc_id, v.verdict, v.verdict_reason, v.key_fact, v.source_quality)
           for v in parsed.verdicts]
    if got != want:
        violations.append("verdict array must copy the per-document notes exactly")
    refuse = all(n.verdict == "irrelevant" for n in notes)
    if refuse and not parsed.abstain:
        violations.append(f"every document is irrelevant; the answer must be {ABSTAIN_SENTINEL}")
    if not refuse and parsed.abstain:
        violations.append("some document supports the query; do not abstain")
    usable = {n.doc_id for n in notes if n.verdict in ("supports", "partially supports")}
    bad = sorted(set(parsed.citations) - usable)
    if bad and not parsed.abstain:
        violations.append(f"citations to non-supporting documents: {', '.join(bad)}")
    if violations:
        return None, violations

    think = text[:text.index(THINK_CLOSE) + len(THINK_CLOSE)]
    if parsed.abstain:
        response = ExpectedResponse(ABSTAIN_SENTINEL, (), True, parsed.bridge)
    else:
        response = ExpectedResponse(parsed.final_answer,
                                    order_evidence(parsed.citations, notes), False, "")
    candidate = replace(record, per_doc_notes=tuple(notes), conflict_reason=reason,
                        think=think, expected_response=response)
    problems = [str(v) for v in validate_record(candidate)]
    return (None, problems) if problems else ((think, response), [])


def run_stage3(record: QueryRecord, notes: Sequence[PerDocNote], reason: str, gateway, *,
               repair_budget: int = REPAIR_BUDGET) -> tuple[str, ExpectedResponse]:
    bundle = build_annotation_prompt(record, 3, {"notes": list(notes), "conflict_reason": reason})
    return _ask(_completer(gateway), bundle,
                lambda reply: _stage3_check(record, notes, reason, reply), 3, repair_budget)


def annotate_record(record: QueryRecord, gateway, *, batched: bool = True,
                    repair_budget: int = REPAIR_BUDGET) -> QueryRecord:
    notes = run_stage1(record, gateway, batched=batched, repair_budget=repair_budget)
    reason = run_stage2(record, notes, gateway, repair_budget=repair_budget)
    think, response = run_stage3(record, notes, reason, gateway, repair_budget=repair_budget)
    return replace(record, per_doc_notes=tuple(notes), conflict_reason=reason,
                   think=think, expected_response=response)


# ---------------------------------------------------------------------------
# corpus runs with resume


def _state_name(record_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", record_id)
    return f"{safe}-{hashlib.sha256(record_id.encode('utf-8')).hexdigest()[:8]}.json"


@dataclass
class CorpusResult:
    annotated: list[QueryRecord]
    review_queue: list[dict[str, Any]]
    newly_processed: list[str] = field(default_factory=list)


class _State:
    """Resume manifest ``{record_id: completed_stage}`` plus per-record stage outputs."""

    def __init__(self, state_dir: str | Path):
        self.dir = Path(state_dir)
        (self.dir / "records").mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        self._lock = threading.Lock()
        self.manifest: dict[str, Any] = {}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def load(self, rid: str) -> dict[str, Any]:
        path = self.dir / "records" / _state_name(rid)
        return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}

    def save(self, rid: str, stage: int | str, data: dict[str, Any]) -> None:
        path = self.dir / "records" / _state_name(rid)
        _atomic_write(path, json.dumps(data, ensure_ascii=False, sort_keys=True, indent=1) + "\n")
        with self._lock:
            self.manifest[rid] = stage
            _atomic_write(self.manifest_path,
                          json.dumps(self.manifest, sort_keys=True, indent=1) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{threading.get_ident()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_corpus(records: Sequence[QueryRecord], gateway, state_dir: str | Path, *,
               concurrency: int = 4, batched: bool = True,
               repair_budget: int = REPAIR_BUDGET, max_records: int | None = None,
               retry_failed: bool = False) -> CorpusResult:
    """Annotate every record, resuming from ``state_dir``.

    Stages already recorded in the state directory are not re-run. Records
    that exhausted their repair budget stay failed unless ``retry_failed``.
    ``max_records`` caps how many unfinished records this call touches, which
    is how an interrupted run is simulated.
    """
    ids = [r.id for r in records]
    if None in ids or len(set(ids)) != len(ids):
        raise ValueError("run_corpus needs unique, non-null record ids")
    state = _State(state_dir)

    def finished(rid: str) -> bool:
        done = state.manifest.get(rid)
        return done == 3 or (isinstance(done, str) and done.startswith("failed") and not retry_failed)

    pending = [r for r in records if not finished(r.id)]
    if max_records is not None:
        pending = pending[:max_records]

    def work(record: QueryRecord) -> None:
        data = state.load(record.id)
        stage = state.manifest.get(record.id, 0)
        if not isinstance(stage, int):
            stage, data = 0, {}
        try:
            if stage < 1:
                notes = run_stage1(record, gateway, batched=batched, repair_budget=repair_budget)
                data["per_doc_notes"] = [n.to_dict() for n in notes]
                state.save(record.id, 1, data)
            notes = [PerDocNote.from_dict(n) for n in data["per_doc_notes"]]
            if stage < 2:
                data["conflict_reason"] = run_stage2(record, notes, gateway,
                                                     repair_budget=repair_budget)
                state.save(record.id, 2, data)
            if stage < 3:
                think, response = run_stage3(record, notes, data["conflict_reason"], gateway,
                                             repair_budget=repair_budget)
                data["think"] = think
                data["expected_response"] = response.to_dict()
                state.save(record.id, 3, data)
        except StageFailure as exc:
            log.warning("%s", exc)
            data["failure"] = exc.to_dict()
            state.save(record.id, f"failed:stage{exc.stage}", data)

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        list(pool.map(work, pending))

    annotated, queue = [], []
    for record in records:
        done = state.manifest.get(record.id)
        data = state.load(record.id)
        if done == 3:
            annotated.append(replace(
                record,
                per_doc_notes=tuple(PerDocNote.from_dict(n) for n in data["per_doc_notes"]),
                conflict_reason=data["conflict_reason"],
                think=data["think"],
                expected_response=ExpectedResponse.from_dict(data["expected_response"])))
        elif isinstance(done, str) and "failure" in data:
            queue.append(data["failure"])
    return CorpusResult(annotated, queue, [r.id for r in pending])


def write_corpus_outputs(result: CorpusResult, out_dir: str | Path) -> None:
    from .dataset import write_jsonl

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "annotated.jsonl", result.annotated)
    write_jsonl(out / "review_queue.jsonl", result.review_queue)

