"""Parser for the text-mode output contract.

A conformant completion looks like::

    <think>
    [ {"doc_id": "d1", "verdict": ..., ...}, ... ]
    conflict reasoning that clusters the docs
    <ConflictType> — <concise conflict_reason>
    bridge from the evidence to the answer
    </think>

    Final answer with inline citations [d1][d2].
    [[END-OF-ANSWER]]

Parsing is lenient: every contract breach becomes a :class:`Diagnostic` and
the parser recovers what it can. An output with no diagnostics passes the
strict tier. Only an output where no think block can be delimited at all
raises :class:`UnparseableOutput`.

Diagnostic spans are UTF-8 byte offsets into the sanitized text.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .schema import (
    ABSTAIN_SENTINEL,
    DOC_ID_RE,
    INFERENCE_LIMITS,
    SOURCE_QUALITIES,
    VERDICTS,
    ConflictType,
    WordLimits,
    normalize_ws,
    word_count,
)

END_SENTINEL = "[[END-OF-ANSWER]]"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
EM_DASH = "—"
EN_DASH = "–"

# tier of a diagnostic: "strict" = the output fails the strict contract but the
# element was recovered; "lenient" = even best-effort recovery lost the element;
# "advisory" = recorded for inspection, not a contract failure.
STRICT, LENIENT, ADVISORY = "strict", "lenient", "advisory"

_RANGE_RE = re.compile(r"\bd\d+ ?[–—-] ?d\d+\b")
_CITE_RE = re.compile(r"\[d(\d+)\]")
_SENTENCE_END_RE = re.compile(r"[.!?]+(?:[ \t]*\[[^\]\n]*\])*(?=\s|$)")
_LABEL_PREFIX_RE = re.compile(
    r"^(?:\(?[A-Da-d]\)\s*|[-*•]\s+|(?:label|conflict[ _]?type)\s*:\s*)", re.IGNORECASE
)
_DOC_TOKEN_RE = re.compile(r"\bd\d+\b")
_TRAILING_COMMA_RE = re.compile(r",(\s*[\]}])")


class UnparseableOutput(ValueError):
    """No think block can be delimited in the completion."""


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    span: tuple[int, int]
    tier: str = STRICT

    def to_dict(self, record_id: str | None = None) -> dict[str, Any]:
        return {
            "record_id": record_id,
            "tier": self.tier,
            "code": self.code,
            "message": self.message,
            "span": list(self.span),
        }


class _Sink:
    """Collects diagnostics, converting character offsets to byte offsets."""

    def __init__(self, text: str):
        self.text = text
        self.diagnostics: list[Diagnostic] = []
        self.advisories: list[Diagnostic] = []

    def byte_offset(self, i: int) -> int:
        return len(self.text[:i].encode("utf-8", "surrogatepass"))

    def add(self, code: str, message: str, start: int, end: int, tier: str = STRICT) -> None:
        span = (self.byte_offset(start), self.byte_offset(end))
        diag = Diagnostic(code, message, span, tier)
        (self.advisories if tier == ADVISORY else self.diagnostics).append(diag)


# ---------------------------------------------------------------------------
# sanitizing


def sanitize_with_diagnostics(raw: str) -> tuple[str, list[Diagnostic]]:
    """Cut the completion at the end-of-answer sentinel and trim blank lines."""
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    cut = None
    missing = None
    pos = 0
    for line in text.split("\n"):
        if line.strip() == END_SENTINEL:
            cut = pos
            break
        pos += len(line) + 1
    if cut is None:
        idx = text.find(END_SENTINEL)
        if idx >= 0:
            cut = idx
            missing = ("sentinel-inline", "end-of-answer sentinel is not on its own line")
        else:
            missing = ("missing-sentinel", "no [[END-OF-ANSWER]] sentinel line")
    if cut is not None:
        text = text[:cut]
    lines = text.split("\n")
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    clean = "\n".join(lines)
    diags = []
    if missing:
        sink = _Sink(clean)
        sink.add(missing[0], missing[1], len(clean), len(clean))
        diags = sink.diagnostics
    return clean, diags


def sanitize(raw: str) -> str:
    return sanitize_with_diagnostics(raw)[0]


# ---------------------------------------------------------------------------
# sentences and citations


def split_sentences(text: str, base: int = 0) -> list[tuple[int, int, str]]:
    """Split on terminal punctuation followed by whitespace.

    Bracketed citations directly after the punctuation stay with the sentence
    they close. Returns ``(start, end, sentence)`` with offsets into ``text``
    shifted by ``base``.
    """
    out = []
    start = 0
    for m in _SENTENCE_END_RE.finditer(text):
        end = m.end()
        chunk = text[start:end]
        if chunk.strip():
            lead = len(chunk) - len(chunk.lstrip())
            out.append((base + start + lead, base + end, chunk.strip()))
        start = end
    tail = text[start:]
    if tail.strip():
        lead = len(tail) - len(tail.lstrip())
        out.append((base + start + lead, base + start + len(tail.rstrip()), tail.strip()))
    return out


def strip_citations(text: str) -> str:
    return normalize_ws(_CITE_RE.sub(" ", text)).replace(" .", ".")


def _scan_citations(sink: _Sink, text: str, base: int, n_docs: int,
                    abstaining: bool) -> list[str]:
    cites = []
    for m in _CITE_RE.finditer(text):
        num = int(m.group(1))
        cites.append(f"d{num}")
        if not 1 <= num <= n_docs:
            sink.add("citation-out-of-bounds", f"[d{m.group(1)}] is outside d1..d{n_docs}",
                     base + m.start(), base + m.end())
    if not abstaining:
        for start, end, sentence in split_sentences(text, base):
            if not _CITE_RE.search(sentence):
                sink.add("uncited-sentence", f"sentence without citation: {sentence[:60]!r}",
                         start, end)
    return cites


def extract_citations(answer: str, n_docs: int) -> tuple[list[str], list[Diagnostic]]:
    """Every ``[dX]`` in order, duplicates kept, plus bound/coverage diagnostics.

    Pass the sentinel-free answer of an answering output; the uncited-sentence
    rule is skipped when the answer is the abstention sentinel.
    """
    sink = _Sink(answer)
    abstaining = answer.split("\n", 1)[0] == ABSTAIN_SENTINEL
    cites = _scan_citations(sink, answer, 0, n_docs, abstaining)
    return cites, sink.diagnostics


# ---------------------------------------------------------------------------
# parsed output


@dataclass(frozen=True)
class VerdictEntry:
    doc_id: str
    verdict: str
    verdict_reason: str = ""
    key_fact: str = ""
    source_quality: str = ""

    def to_dict(self) -> dict[str, str]:
        return {
            "doc_id": self.doc_id,
            "verdict": self.verdict,
            "verdict_reason": self.verdict_reason,
            "key_fact": self.key_fact,
            "source_quality": self.source_quality,
        }


@dataclass(frozen=True)
class ParsedOutput:
    think: str
    verdicts: tuple[VerdictEntry, ...]
    verdict_array_found: bool
    conflict_label: ConflictType | None
    raw_label: str | None
    conflict_reason: str
    conflict_reasoning: str
    bridge: str
    final_answer: str
    abstain: bool
    citations: tuple[str, ...]
    diagnostics: tuple[Diagnostic, ...] = ()
    advisories: tuple[Diagnostic, ...] = ()

    @property
    def valid(self) -> bool:
        """Passes the strict tier."""
        return not self.diagnostics

    @property
    def codes(self) -> list[str]:
        return [d.code for d in self.diagnostics]

    def content(self) -> tuple:
        """Everything except diagnostics, for semantic comparisons."""
        return (self.verdicts, self.conflict_label, self.raw_label, self.conflict_reason,
                self.conflict_reasoning, self.bridge, self.final_answer, self.abstain,
                self.citations)


def _line_bounds(text: str, i: int) -> tuple[int, int]:
    start = text.rfind("\n", 0, i) + 1
    end = text.find("\n", i)
    return start, len(text) if end < 0 else end


def _scan_string(text: str, i: int) -> int:
    """``text[i]`` is an opening quote; return index after the closing quote."""
    i += 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\\":
            i += 2
            continue
        if c == '"':
            return i + 1
        if c == "\n":
            return i
        i += 1
    return n


def _scan_object(text: str, i: int) -> int | None:
    """``text[i] == '{'``; return index after the balancing brace or None."""
    depth = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == '"':
            i = _scan_string(text, i)
            continue
        if c in "{[":
            depth += 1
        elif c in "}]":
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return None


def _scan_array(text: str, start: int) -> tuple[list[tuple[int, int]], int, bool]:
    """Tokenize a verdict array starting at ``text[start] == '['``.

    Returns the object spans and the end index. The flag says whether a closing
    bracket was seen.
    """
    objects = []
    i = start + 1
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace() or c == ",":
            i += 1
        elif c == "{":
            end = _scan_object(text, i)
            if end is None:
                return objects, n, False
            objects.append((i, end))
            i = end
        elif c == "]":
            return objects, i + 1, True
        else:
            return objects, i, False
    return objects, n, False


def _loads(text: str) -> Any:
    try:
        return json.loads(text)
    except (ValueError, RecursionError):
        return None


def _match_label_line(line: str) -> tuple[ConflictType, str, str, bool] | None:
    """Return (label, separator kind, reason, prefix_stripped) for a lexicon label line."""
    stripped = line.strip()
    body = _LABEL_PREFIX_RE.sub("", stripped, count=1)
    prefixed = body != stripped
    flat = normalize_ws(body)
    folded = flat.casefold()
    for member in sorted(ConflictType, key=lambda m: -len(m.value)):
        key = member.value.casefold()
        if not folded.startswith(key):
            continue
        rest = flat[len(key):]
        if rest and not (rest[0].isspace() or rest[0] in (EM_DASH, EN_DASH, "-", ":")):
            continue
        rest = rest.lstrip()
        if rest.startswith(EM_DASH):
            return member, "em", rest[1:].strip(), prefixed
        if rest.startswith(EN_DASH):
            return member, "en", rest[1:].strip(), prefixed
        if rest.startswith("-"):
            return member, "hyphen", rest.lstrip("-").strip(), prefixed
        if rest.startswith(":"):
            return member, "none", rest[1:].strip(), prefixed
        if not rest:
            return member, "none", "", prefixed
        return None
    return None


def parse_output(sanitized: str, n_docs: int, *, limits: WordLimits = INFERENCE_LIMITS) -> ParsedOutput:
    """Decompose a sanitized completion into its contract parts."""
    text = sanitized
    sink = _Sink(text)

    fence = text.find("```")
    if fence >= 0:
        sink.add("markdown-fence", "markdown fences are not allowed", fence, fence + 3)

    # --- think block -----------------------------------------------------
    opens = [m.start() for m in re.finditer(re.escape(THINK_OPEN), text)]
    closes = [m.start() for m in re.finditer(re.escape(THINK_CLOSE), text)]
    if not opens:
        if not closes:
            raise UnparseableOutput("no <think> block")
        open_at = None
        close_at = closes[0]
        block_start = 0
        sink.add("think-open-missing", "no <think> line before </think>", 0, 0)
    else:
        open_at = opens[0]
        after = [c for c in closes if c > open_at]
        if not after:
            raise UnparseableOutput("<think> is never closed")
        close_at = after[0]
        block_start = open_at + len(THINK_OPEN)
        if text[:open_at].strip():
            sink.add("text-before-think", "text before <think>", 0, open_at)
        line_end = _line_bounds(text, open_at)[1]
        if text[block_start:line_end].strip():
            sink.add("think-open-not-own-line", "<think> must be alone on its line",
                     open_at, line_end)
        nested = [o for o in opens if open_at < o < close_at]
        for o in nested:
            sink.add("think-nested", "<think> repeated inside the think block", o, o + len(THINK_OPEN))
        later = [o for o in opens if o > close_at]
        if later:
            sink.add("think-open-multiple", "<think> appears again after the think block",
                     later[0], later[0] + len(THINK_OPEN))
    extra_closes = [c for c in closes if c > close_at]
    if extra_closes:
        sink.add("think-close-multiple", "</think> appears more than once",
                 extra_closes[0], extra_closes[0] + len(THINK_CLOSE))
    last_close = extra_closes[-1] if extra_closes else close_at

    close_line_start, close_line_end = _line_bounds(text, close_at)
    close_inline = bool(text[close_line_start:close_at].strip())
    answer_inline = bool(text[close_at + len(THINK_CLOSE):close_line_end].strip())
    if close_inline or answer_inline:
        sink.add("think-close-not-own-line", "</think> must be alone on its line",
                 close_line_start, close_line_end)

    block = text[block_start:close_at]

    # --- answer region -----------------------------------------------------
    ans_region_start = last_close + len(THINK_CLOSE)
    region = text[ans_region_start:]
    nl = region.find("\n")
    first_line = region if nl < 0 else region[:nl]
    answer_start: int | None = None
    if first_line.strip():
        answer_start = ans_region_start + len(first_line) - len(first_line.lstrip())
    else:
        pos = ans_region_start + (len(region) if nl < 0 else nl + 1)
        blanks = 0
        while pos < len(text):
            ls, le = _line_bounds(text, pos)
            if text[ls:le].strip():
                answer_start = ls
                break
            blanks += 1
            pos = le + 1
        if answer_start is not None and not extra_closes:
            if blanks == 0:
                sink.add("blank-line-missing", "one blank line must follow </think>",
                         answer_start, answer_start)
            elif blanks > 1:
                sink.add("blank-line-extra", "exactly one blank line must follow </think>",
                         ans_region_start, answer_start)
    if answer_start is None:
        final_answer = ""
        sink.add("answer-missing", "no final answer after </think>", len(text), len(text), LENIENT)
        answer_start = len(text)
    else:
        final_answer = text[answer_start:].rstrip()

    # --- verdict array -------------------------------------------------------
    verdicts: list[VerdictEntry] = []
    array_found = False
    arr_match = re.search(r"\[\s*\{", block)
    rest_start = 0
    if arr_match is None:
        sink.add("verdict-array-missing", "no JSON verdict array in the think block",
                 block_start, block_start, LENIENT)
    else:
        a0 = arr_match.start()
        if block[:a0].strip():
            sink.add("verdict-array-not-first", "text before the verdict array",
                     block_start, block_start + a0)
        objects, a1, closed = _scan_array(block, a0)
        rest_start = a1
        raw_array = block[a0:a1]
        data = _loads(raw_array) if closed else None
        if data is None and closed:
            fixed = _loads(_TRAILING_COMMA_RE.sub(r"\1", raw_array))
            if fixed is not None:
                data = fixed
                sink.add("verdict-array-trailing-comma", "trailing comma in the verdict array",
                         block_start + a0, block_start + a1)
        if isinstance(data, list):
            items = data
            array_found = True
        else:
            items = []
            lost = 0
            for s, e in objects:
                obj = _loads(block[s:e])
                if obj is None:
                    obj = _loads(_TRAILING_COMMA_RE.sub(r"\1", block[s:e]))
                if obj is None:
                    lost += 1
                else:
                    items.append(obj)
            array_found = bool(items)
            tier = LENIENT if (lost or not objects) else STRICT
            sink.add("verdict-array-invalid-json", "verdict array is not valid JSON",
                     block_start + a0, block_start + a1, tier)
        verdicts = _check_entries(sink, items, n_docs, limits, block_start + a0, block_start + a1)

    # --- label line, reasoning, bridge ------------------------------------
    rest = block[rest_start:]
    rest_base = block_start + rest_start
    label_hits = []
    pos = 0
    for line in rest.split("\n"):
        hit = _match_label_line(line)
        if hit is not None:
            label_hits.append((pos, pos + len(line), hit))
        pos += len(line) + 1

    conflict_label: ConflictType | None = None
    raw_label: str | None = None
    conflict_reason = ""
    label_span: tuple[int, int] | None = None
    if label_hits:
        ls, le, (member, sep, reason, prefixed) = label_hits[0]
        label_span = (ls, le)
        conflict_label = member
        conflict_reason = reason
        head = _LABEL_PREFIX_RE.sub("", rest[ls:le].strip(), count=1)
        raw_label = head[:len(member.value)]
        if raw_label != member.value:
            raw_label = normalize_ws(head)[:len(member.value)]
        if raw_label != member.value:
            sink.add("label-normalized", f"label {raw_label!r} mapped to {member.value!r}",
                     rest_base + ls, rest_base + le)
        if prefixed:
            sink.add("label-prefix", "label line carries a leading marker",
                     rest_base + ls, rest_base + le)
        if sep in ("en", "hyphen"):
            sink.add("label-wrong-dash", f"label line uses {'an en dash' if sep == 'en' else 'a hyphen'}"
                     " instead of an em dash", rest_base + ls, rest_base + le)
        elif sep == "none":
            sink.add("label-missing-dash", "label line has no em dash separator",
                     rest_base + ls, rest_base + le)
        if len(label_hits) > 1:
            s2, e2, _ = label_hits[1]
            sink.add("label-line-multiple", "more than one label line", rest_base + s2, rest_base + e2)
    else:
        pos = 0
        for line in rest.split("\n"):
            sep = f" {EM_DASH} "
            if sep in line:
                head, _, tail = line.strip().partition(sep)
                if head and word_count(head) <= 8 and not _DOC_TOKEN_RE.search(head):
                    label_span = (pos, pos + len(line))
                    raw_label = head.strip()
                    conflict_reason = tail.strip()
                    sink.add("label-out-of-lexicon", f"label {raw_label!r} is not a conflict type",
                             rest_base + pos, rest_base + pos + len(line))
                    break
            pos += len(line) + 1
        if label_span is None:
            sink.add("label-line-missing", "no '<ConflictType> — <reason>' line",
                     block_start + len(block), block_start + len(block), LENIENT)

    if label_span is not None:
        reasoning = rest[:label_span[0]].strip()
        bridge = rest[label_span[1]:].strip()
        if reasoning.startswith(","):
            reasoning = reasoning[1:].strip()
        if not reasoning:
            sink.add("conflict-reasoning-missing", "no conflict reasoning before the label line",
                     rest_base + label_span[0], rest_base + label_span[0])
        if not bridge:
            sink.add("bridge-missing", "no reasoning after the label line",
                     rest_base + label_span[1], rest_base + label_span[1])
        if word_count(conflict_reason) > limits.conflict_reason:
            sink.add("conflict-reason-too-long",
                     f"conflict_reason exceeds {limits.conflict_reason} words",
                     rest_base + label_span[0], rest_base + label_span[1])
    else:
        reasoning = rest.strip().lstrip(",").strip()
        bridge = ""

    # --- doc-id ranges anywhere in prose or answer -------------------------
    prose_spans = [(rest_base, block_start + len(block))]
    if arr_match is None:
        prose_spans = [(block_start, block_start + len(block))]
    prose_spans.append((answer_start, len(text)))
    for s, e in prose_spans:
        for m in _RANGE_RE.finditer(text, s, e):
            sink.add("doc-id-range", f"doc-id range {m.group(0)!r}", m.start(), m.end())

    # --- final answer --------------------------------------------------------
    abstain = final_answer.split("\n", 1)[0] == ABSTAIN_SENTINEL
    citations = _scan_citations(sink, final_answer, answer_start, n_docs, abstain)
    if abstain and citations:
        sink.add("cited-while-abstaining", "abstaining answer carries citations",
                 answer_start, answer_start + len(final_answer))
    if not abstain and final_answer:
        if "cannot answer" in final_answer.casefold():
            sink.add("abstain-near-miss", "refusal phrasing that is not the exact sentinel line",
                     answer_start, answer_start + len(final_answer))
        n_sent = len(split_sentences(final_answer))
        if not 2 <= n_sent <= 5:
            sink.add("answer-length", f"answer has {n_sent} sentences (expected 2-5)",
                     answer_start, answer_start + len(final_answer), ADVISORY)

    return ParsedOutput(
        think=block,
        verdicts=tuple(verdicts),
        verdict_array_found=array_found,
        conflict_label=conflict_label,
        raw_label=raw_label,
        conflict_reason=conflict_reason,
        conflict_reasoning=reasoning,
        bridge=bridge,
        final_answer=final_answer,
        abstain=abstain,
        citations=tuple(citations),
        diagnostics=tuple(sink.diagnostics),
        advisories=tuple(sink.advisories),
    )


_ENTRY_FIELDS = ("doc_id", "verdict", "verdict_reason", "key_fact", "source_quality")


def _check_entries(sink: _Sink, items: list, n_docs: int, limits: WordLimits,
                   start: int, end: int) -> list[VerdictEntry]:
    entries = []
    for k, item in enumerate(items):
        if not isinstance(item, dict):
            sink.add("verdict-field-missing", f"array element {k} is not an object", start, end)
            continue
        item = dict(item)
        if "doc_id" not in item and "id" in item:
            item["doc_id"] = item.pop("id")
            sink.add("doc-id-key-alias", f"element {k} uses 'id' instead of 'doc_id'",
                     start, end, ADVISORY)
        missing = [f for f in _ENTRY_FIELDS if f not in item]
        if missing:
            sink.add("verdict-field-missing", f"element {k} lacks {', '.join(missing)}", start, end)
        vals = {f: item.get(f) for f in _ENTRY_FIELDS}
        for f, v in vals.items():
            if v is None:
                vals[f] = ""
            elif not isinstance(v, str):
                vals[f] = json.dumps(v) if not isinstance(v, (int, float)) else str(v)
        verdict = vals["verdict"]
        if verdict not in VERDICTS:
            folded = normalize_ws(verdict).casefold()
            if folded in VERDICTS:
                sink.add("verdict-invalid", f"verdict {verdict!r} is not exact", start, end)
                verdict = folded
            else:
                sink.add("verdict-invalid", f"verdict {verdict!r} not in lexicon", start, end, LENIENT)
        if vals["source_quality"] not in SOURCE_QUALITIES and "source_quality" not in missing:
            sink.add("source-quality-invalid", f"source_quality {vals['source_quality']!r}", start, end)
        if verdict == "irrelevant" and vals["key_fact"] != "":
            sink.add("key-fact-not-empty", f"{vals['doc_id']}: irrelevant verdict with a key_fact",
                     start, end)
        for f in ("verdict_reason", "key_fact"):
            if word_count(vals[f]) > getattr(limits, f):
                sink.add("word-limit-exceeded", f"{vals['doc_id']}: {f} over {getattr(limits, f)} words",
                         start, end)
        entries.append(VerdictEntry(vals["doc_id"], verdict, vals["verdict_reason"],
                                    vals["key_fact"], vals["source_quality"]))

    seen: list[int] = []
    for e in entries:
        if _RANGE_RE.fullmatch(e.doc_id.strip()):
            sink.add("doc-id-range", f"doc-id range {e.doc_id!r} in the array", start, end)
        elif not DOC_ID_RE.match(e.doc_id) or int(e.doc_id[1:]) > n_docs:
            sink.add("doc-id-fabricated", f"doc_id {e.doc_id!r} is not one of d1..d{n_docs}", start, end)
        else:
            seen.append(int(e.doc_id[1:]))
    dups = sorted(k for k, c in Counter(seen).items() if c > 1)
    if dups:
        sink.add("doc-id-duplicate", "repeated doc_ids " + ",".join(f"d{k}" for k in dups), start, end)
    missing_ids = sorted(set(range(1, n_docs + 1)) - set(seen))
    if missing_ids and entries:
        sink.add("doc-id-missing", "skipped doc_ids " + ",".join(f"d{k}" for k in missing_ids), start, end)
    unique = list(dict.fromkeys(seen))
    if unique != sorted(unique):
        sink.add("doc-id-out-of-order", "doc_ids are not in d1..dN order", start, end)
    return entries


# ---------------------------------------------------------------------------
# emitting


def render_verdict_array(entries: Iterable[VerdictEntry | dict]) -> str:
    rows = [e.to_dict() if isinstance(e, VerdictEntry) else e for e in entries]
    return "[\n" + ",\n".join("  " + json.dumps(r, ensure_ascii=False) for r in rows) + "\n]"


def render_think(entries: Iterable[VerdictEntry | dict], label: str, reason: str,
                 reasoning: str, bridge: str) -> str:
    return (f"{THINK_OPEN}\n{render_verdict_array(entries)}\n{reasoning}\n"
            f"{label} {EM_DASH} {reason}\n{bridge}\n{THINK_CLOSE}")


def compose_completion(think: str, answer: str) -> str:
    return think.rstrip("\n") + "\n\n" + answer


def emit_completion(entries: Iterable[VerdictEntry | dict], label: str, reason: str,
                    reasoning: str, bridge: str, answer: str, *, sentinel: bool = False) -> str:
    out = compose_completion(render_think(entries, label, reason, reasoning, bridge), answer)
    return out + f"\n{END_SENTINEL}" if sentinel else out


def emit_output(parsed: ParsedOutput) -> str:
    label = parsed.conflict_label.value if parsed.conflict_label else (parsed.raw_label or "")
    return emit_completion(parsed.verdicts, label, parsed.conflict_reason,
                           parsed.conflict_reasoning, parsed.bridge, parsed.final_answer)


# ---------------------------------------------------------------------------
# corpus-level structural report


@dataclass
class StructuralReport:
    total: int = 0
    valid: int = 0
    recoverable: int = 0
    unparseable: int = 0
    diagnostics: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "valid": self.valid,
            "recoverable": self.recoverable,
            "unparseable": self.unparseable,
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }


def parse_completion(raw: str, n_docs: int, *, limits: WordLimits = INFERENCE_LIMITS
                     ) -> tuple[str, ParsedOutput | None, list[Diagnostic]]:
    """Sanitize then parse. Returns (sanitized, parsed or None, all diagnostics)."""
    clean, diags = sanitize_with_diagnostics(raw)
    try:
        parsed = parse_output(clean, n_docs, limits=limits)
    except UnparseableOutput as exc:
        sink = _Sink(clean)
        sink.add("unparseable", str(exc), 0, len(clean), LENIENT)
        return clean, None, diags + sink.diagnostics
    return clean, parsed, diags + list(parsed.diagnostics)


def validate_corpus(completions: Sequence[str], n_docs: Sequence[int] | int) -> StructuralReport:
    if isinstance(n_docs, int):
        n_docs = [n_docs] * len(completions)
    if len(n_docs) != len(completions):
        raise ValueError("one n_docs value is needed per completion")
    report = StructuralReport()
    for raw, n in zip(completions, n_docs):
        report.total += 1
        _, parsed, diags = parse_completion(raw, n)
        if parsed is None:
            report.unparseable += 1
        elif diags:
            report.recoverable += 1
        else:
            report.valid += 1
        report.diagnostics.update(d.code for d in diags if d.code != "unparseable")
    return report
