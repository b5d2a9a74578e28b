"""Deterministic rendering of every prompt the pipeline sends.

Templates are UTF-8 files under ``templates/``. A placeholder is
``{identifier}``; ``{{`` and ``}}`` render as literal braces. Any other brace
is left alone, so JSON examples inside a template need no escaping.
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .schema import ConflictType, PerDocNote, QueryRecord, RetrievedDoc

MODES = ("stage1", "stage2", "stage3", "oracle", "end_to_end",
         "judge_behavior", "judge_entailment", "judge_recall")

NOTES_NOT_PROVIDED = "(not provided)"
NO_TIMESTAMP = "(none)"

# Expected behaviour per conflict type, as used by the behavior judge.
BEHAVIOR_RUBRICS = {
    ConflictType.NO_CONFLICT:
        "Return a unified and concise answer that synthesizes all content accurately.",
    ConflictType.COMPLEMENTARY:
        "Integrate all valid details to produce a richer, more comprehensive response.",
    ConflictType.CONFLICTING_OPINIONS:
        "Present each viewpoint clearly, describe the nature of the disagreement, and avoid "
        "choosing a side unless supported by strong evidence.",
    ConflictType.OUTDATED:
        "Prioritize newer, verified information while explicitly noting that certain sources "
        "are outdated.",
    ConflictType.MISINFORMATION:
        "Reject or correct the misinformation, provide verified facts, and briefly explain why "
        "the misinformation is inaccurate.",
}

_TOKEN_RE = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}")


class TemplateError(ValueError):
    pass


class MissingField(TemplateError):
    pass


class MissingPriorStage(ValueError):
    pass


class UnknownConflictType(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    name: str
    text: str

    @functools.cached_property
    def placeholders(self) -> frozenset[str]:
        return frozenset(m.group(1) for m in _TOKEN_RE.finditer(self.text) if m.group(1))

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def render(self, values: Mapping[str, str] | None = None) -> str:
        values = dict(values or {})
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"{self.name}: unresolved placeholders {sorted(missing)}")
        extra = values.keys() - self.placeholders
        if extra:
            raise TemplateError(f"{self.name}: no placeholder for {sorted(extra)}")

        def sub(m: re.Match) -> str:
            if m.group(1):
                return str(values[m.group(1)])
            return m.group(0)[0]

        return _TOKEN_RE.sub(sub, self.text)


TEMPLATE_NAMES = (
    "oracle_system", "oracle_user", "e2e_system", "e2e_user",
    "judge_behavior_system", "judge_behavior_user",
    "judge_entailment_system", "judge_entailment_user",
    "judge_recall_system", "judge_recall_user",
    "stage1_system", "stage1_user", "stage1_doc_user",
    "stage2_system", "stage2_user",
    "stage3_system", "stage3_user", "stage3_policy_answer", "stage3_policy_refuse",
    "repair_user",
)


@functools.lru_cache(maxsize=None)
def load_template(name: str) -> Template:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    path = resources.files("conflict_rag").joinpath("templates", f"{name}.txt")
    return Template(name, path.read_text(encoding="utf-8"))


def template_checksums() -> dict[str, str]:
    return {name: load_template(name).checksum for name in TEMPLATE_NAMES}


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    mode: str
    placeholders_resolved: tuple[str, ...] = ()
    record_id: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}")

    def digest(self) -> str:
        """Hash of the message content; record id and bookkeeping are excluded."""
        payload = json.dumps([self.system, self.user], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id, "mode": self.mode,
                "system": self.system, "user": self.user}


def _bundle(system_name: str, user_name: str, mode: str, values: Mapping[str, str],
            record_id: str | None = None, *, user_suffix: str = "") -> PromptBundle:
    system_t, user_t = load_template(system_name), load_template(user_name)
    orphans = values.keys() - system_t.placeholders - user_t.placeholders
    if orphans:
        raise TemplateError(f"{system_name}/{user_name}: no placeholder for {sorted(orphans)}")
    sys_vals = {k: values[k] for k in system_t.placeholders if k in values}
    user_vals = {k: values[k] for k in user_t.placeholders if k in values}
    resolved = tuple(sorted(system_t.placeholders | user_t.placeholders))
    return PromptBundle(system_t.render(sys_vals), user_t.render(user_vals) + user_suffix,
                        mode, resolved, record_id)


# ---------------------------------------------------------------------------
# serialization of record parts


def serialize_doc(doc: RetrievedDoc) -> str:
    ts = doc.timestamp if doc.timestamp else NO_TIMESTAMP
    return (f"[{doc.doc_id}] title={doc.title}\nsource={doc.source}\n"
            f"timestamp={ts}\nsnippet={doc.snippet}")


def serialize_docs(docs: Iterable[RetrievedDoc]) -> str:
    return "\n\n".join(serialize_doc(d) for d in docs)


def serialize_notes(notes: Iterable[PerDocNote]) -> str:
    rows = [json.dumps(n.to_dict(with_quote=True), ensure_ascii=False) for n in notes]
    return "[\n" + ",\n".join("  " + r for r in rows) + "\n]"


def _label(value: ConflictType | str) -> ConflictType:
    if isinstance(value, ConflictType):
        return value
    try:
        return ConflictType.from_label(value)
    except (ValueError, KeyError) as exc:
        raise UnknownConflictType(f"unknown conflict type {value!r}") from exc


# ---------------------------------------------------------------------------
# inference


def build_inference_prompt(record: QueryRecord, mode: str, *,
                           include_notes: bool = False) -> PromptBundle:
    """Render the oracle or end-to-end inference prompt for one record.

    With ``include_notes`` false the notes slot carries an explicit
    ``(not provided)`` marker instead of gold notes.
    """
    if mode == "e2e":
        mode = "end_to_end"
    if mode not in ("oracle", "end_to_end"):
        raise ValueError(f"inference mode must be oracle or end_to_end, got {mode!r}")
    if not record.retrieved_docs:
        raise MissingField(f"record {record.id}: no retrieved_docs")
    if include_notes and record.per_doc_notes is None:
        raise MissingField(f"record {record.id}: notes requested but per_doc_notes is absent")
    values = {
        "query": record.query,
        "retrieved_docs": serialize_docs(record.retrieved_docs),
        "per_doc_notes": serialize_notes(record.per_doc_notes) if include_notes else NOTES_NOT_PROVIDED,
    }
    prefix = "e2e"
    if mode == "oracle":
        if record.conflict_type is None:
            raise MissingField(f"record {record.id}: oracle mode needs conflict_type")
        values["conflict_type"] = record.conflict_type.value
        prefix = "oracle"
    return _bundle(f"{prefix}_system", f"{prefix}_user", mode, values, record.id)


# ---------------------------------------------------------------------------
# annotation


def all_irrelevant(notes: Sequence[PerDocNote]) -> bool:
    return all(n.verdict == "irrelevant" for n in notes)


def build_stage1_doc_prompt(record: QueryRecord, doc: RetrievedDoc) -> PromptBundle:
    """Per-document variant of the stage-1 prompt."""
    values = {"query": record.query, "document": serialize_doc(doc), "doc_id": doc.doc_id}
    return _bundle("stage1_system", "stage1_doc_user", "stage1", values, record.id)


def build_annotation_prompt(record: QueryRecord, stage: int,
                            prior: Mapping[str, Any] | None = None) -> PromptBundle:
    """Render the stage 1, 2 or 3 annotation prompt.

    ``prior`` holds earlier stage outputs: ``notes`` (list of PerDocNote) for
    stages 2 and 3, plus ``conflict_reason`` for stage 3.
    """
    prior = dict(prior or {})
    if stage == 1:
        values = {"query": record.query, "n_docs": str(record.n_docs),
                  "retrieved_docs": serialize_docs(record.retrieved_docs)}
        return _bundle("stage1_system", "stage1_user", "stage1", values, record.id)
    notes = prior.get("notes")
    if not notes:
        raise MissingPriorStage(f"stage {stage} needs stage-1 notes")
    if stage == 2:
        values = {"query": record.query, "conflict_type": record.conflict_type.value,
                  "per_doc_notes": serialize_notes(notes)}
        return _bundle("stage2_system", "stage2_user", "stage2", values, record.id)
    if stage == 3:
        reason = prior.get("conflict_reason")
        if reason is None:
            raise MissingPriorStage("stage 3 needs the stage-2 conflict reason")
        policy = "stage3_policy_refuse" if all_irrelevant(notes) else "stage3_policy_answer"
        values = {
            "query": record.query,
            "retrieved_docs": serialize_docs(record.retrieved_docs),
            "per_doc_notes": serialize_notes(notes),
            "conflict_type": record.conflict_type.value,
            "conflict_reason": reason,
            "answer_policy": load_template(policy).render().rstrip("\n"),
            "behavior": BEHAVIOR_RUBRICS[record.conflict_type],
        }
        return _bundle("stage3_system", "stage3_user", "stage3", values, record.id)
    raise ValueError(f"stage must be 1, 2 or 3, got {stage!r}")


def build_repair_prompt(bundle: PromptBundle, previous_reply: str,
                        violations: Sequence[str]) -> PromptBundle:
    """Re-ask: the original prompt plus the rejected reply and what was wrong with it."""
    listed = "\n".join(f"- {v}" for v in violations)
    suffix = load_template("repair_user").render(
        {"previous_reply": previous_reply, "violations": listed})
    return PromptBundle(bundle.system, bundle.user + suffix, bundle.mode,
                        bundle.placeholders_resolved, bundle.record_id)


# ---------------------------------------------------------------------------
# judges

_JUDGE_INPUTS = {
    "behavior": ("query", "answer", "conflict_type"),
    "entailment": ("premise", "hypothesis"),
    "recall": ("gold", "candidate"),
}


def build_judge_prompt(kind: str, inputs: Mapping[str, Any]) -> PromptBundle:
    if kind not in _JUDGE_INPUTS:
        raise ValueError(f"unknown judge kind {kind!r}")
    missing = [k for k in _JUDGE_INPUTS[kind] if inputs.get(k) is None]
    if missing:
        raise MissingField(f"{kind} judge needs {missing}")
    values = {k: str(inputs[k]) for k in _JUDGE_INPUTS[kind]}
    if kind == "behavior":
        label = _label(inputs["conflict_type"])
        values["conflict_type"] = label.value
        values["BEHAVIOR_RUBRIC"] = inputs.get("rubric") or BEHAVIOR_RUBRICS[label]
    return _bundle(f"judge_{kind}_system", f"judge_{kind}_user", f"judge_{kind}", values,
                   inputs.get("record_id"))


def export_bundles_jsonl(path: str | Path, bundles: Iterable[PromptBundle]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b in bundles:
            fh.write(json.dumps(b.to_dict(), ensure_ascii=False) + "\n")
