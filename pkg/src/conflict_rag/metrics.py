"""CATS scoring: four headline metrics plus the diagnostic ones reported beside them."""

from __future__ import annotations

import csv
import io
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .contract import (
    THINK_CLOSE,
    Diagnostic,
    ParsedOutput,
    parse_completion,
    split_sentences,
    strip_citations,
)
from .gateway import JudgeParseError
from .schema import ABSTAIN_SENTINEL, EntailmentRelation, QueryRecord

_CITE_RE = re.compile(r"\[d(\d+)\]")


class InconsistentItemSets(ValueError):
    pass


class EmptyInput(ValueError):
    pass


# ---------------------------------------------------------------------------
# items


@dataclass(frozen=True)
class EvalItem:
    record: QueryRecord
    raw: str
    sanitized: str
    parsed: ParsedOutput | None
    diagnostics: tuple[Diagnostic, ...] = ()

    @property
    def record_id(self) -> str:
        return self.record.id or ""

    @property
    def answer(self) -> str:
        """Final answer; for unparseable outputs, the text after the last close tag."""
        if self.parsed is not None:
            return self.parsed.final_answer
        cut = self.sanitized.rfind(THINK_CLOSE)
        tail = self.sanitized[cut + len(THINK_CLOSE):] if cut != -1 else self.sanitized
        return tail.strip()

    @property
    def predicted_abstain(self) -> bool:
        if self.parsed is not None:
            return self.parsed.abstain
        return self.answer.split("\n", 1)[0] == ABSTAIN_SENTINEL

    @property
    def gold_answerable(self) -> bool:
        er = self.record.expected_response
        return not (self.record.is_refusal or (er is not None and er.abstain))

    @property
    def conflict_type(self) -> str:
        return self.record.conflict_type.value


def make_item(record: QueryRecord, raw: str) -> EvalItem:
    sanitized, parsed, diags = parse_completion(raw, record.n_docs)
    return EvalItem(record, raw, sanitized, parsed, tuple(diags))


def make_items(records: Sequence[QueryRecord], completions: Mapping[str, str]) -> list[EvalItem]:
    missing = [r.id for r in records if r.id not in completions]
    if missing:
        raise InconsistentItemSets(f"no completion for record ids {missing}")
    return [make_item(r, completions[r.id]) for r in records]


# ---------------------------------------------------------------------------
# per-metric results


@dataclass
class MetricResult:
    """A metric value with the counts behind it.

    ``numerator``/``support`` give the ratio for ratio metrics; ``per_type``
    holds the same pair per conflict type. ``excluded`` tallies why items
    in scope were left out of the support count.
    """

    name: str
    value: float | None
    item_ids: frozenset[str]
    numerator: float = 0.0
    support: int = 0
    per_type: dict[str, tuple[float, int]] = field(default_factory=dict)
    excluded: Counter = field(default_factory=Counter)
    extra: dict[str, Any] = field(default_factory=dict)


def _ids(items: Iterable[EvalItem]) -> frozenset[str]:
    return frozenset(i.record_id for i in items)


def _ratio(name: str, items: Sequence[EvalItem], hits: dict[str, bool],
           excluded: Counter, **extra) -> MetricResult:
    per_type: dict[str, list] = {}
    for it in items:
        if it.record_id in hits:
            cell = per_type.setdefault(it.conflict_type, [0, 0])
            cell[0] += int(hits[it.record_id])
            cell[1] += 1
    num = sum(int(v) for v in hits.values())
    den = len(hits)
    return MetricResult(name, num / den if den else None, _ids(items), float(num), den,
                        {k: (float(v[0]), v[1]) for k, v in sorted(per_type.items())},
                        excluded, dict(extra))


# F1-GR ----------------------------------------------------------------------


def _class_f1(pred: Sequence[bool], gold: Sequence[bool]) -> float | None:
    gold_pos = sum(gold)
    if gold_pos == 0:
        return None
    tp = sum(1 for p, g in zip(pred, gold) if p and g)
    pred_pos = sum(pred)
    precision = tp / pred_pos if pred_pos else (1.0 if gold_pos == 0 else 0.0)
    recall = tp / gold_pos
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_gr_components(pairs: Sequence[tuple[bool, bool]]) -> tuple[float | None, float | None]:
    """(F1 of the refuse class, F1 of the answer class); None for a class with no gold members."""
    pred_refuse = [p for p, _ in pairs]
    gold_refuse = [not g for _, g in pairs]
    f_ref = _class_f1(pred_refuse, gold_refuse)
    f_ans = _class_f1([not p for p in pred_refuse], [not g for g in gold_refuse])
    return f_ref, f_ans


def compute_f1_gr(pairs: Sequence[tuple[bool, bool]]) -> float:
    """Mean of refuse-class and answer-class F1.

    ``pairs`` holds ``(predicted_abstain, gold_answerable)``.
    """
    if not pairs:
        raise EmptyInput("F1-GR needs at least one item")
    parts = [f for f in f1_gr_components(pairs) if f is not None]
    return sum(parts) / len(parts)


def f1_gr_result(items: Sequence[EvalItem]) -> MetricResult:
    pairs = [(i.predicted_abstain, i.gold_answerable) for i in items]
    value = compute_f1_gr(pairs) if pairs else None
    f_ref, f_ans = f1_gr_components(pairs) if pairs else (None, None)
    return MetricResult("f1_gr", value, _ids(items), support=len(pairs),
                        extra={"f1_refuse": f_ref, "f1_answer": f_ans})


# Answer correctness ------------------------------------------------------------


def answer_target(record: QueryRecord) -> tuple[str | None, bool]:
    """Gold target and whether it fell back to the expected response."""
    if record.gold_answer and record.gold_answer.strip():
        return record.gold_answer, False
    er = record.expected_response
    if er is not None and not er.abstain and er.answer.strip():
        return er.answer, True
    return None, False


def answer_correctness_result(items: Sequence[EvalItem], judge) -> MetricResult:
    hits: dict[str, bool] = {}
    excluded: Counter = Counter()
    fallback = []
    for it in items:
        if not it.gold_answerable:
            excluded["gold-unanswerable"] += 1
            continue
        target, used_fallback = answer_target(it.record)
        if target is None:
            excluded["no-target"] += 1
            continue
        if used_fallback:
            fallback.append(it.record_id)
        if it.predicted_abstain:
            hits[it.record_id] = False
            continue
        try:
            hits[it.record_id] = judge.answer_match(target, it.answer).adherent
        except JudgeParseError:
            excluded["judge-parse-failure"] += 1
    return _ratio("answer_correctness", items, hits, excluded,
                  target_fallback_ids=sorted(fallback))


def compute_answer_correctness(items: Sequence[EvalItem], judge) -> float:
    if not items:
        raise EmptyInput("answer correctness needs at least one item")
    return answer_correctness_result(items, judge).value


# Grounded citation -------------------------------------------------------------


def statement_citations(sentence: str, n_docs: int) -> list[str]:
    """Distinct in-bounds doc ids cited in a sentence, first-mention order."""
    out: list[str] = []
    for num in _cite_numbers(sentence):
        doc = f"d{num}"
        if 1 <= num <= n_docs and doc not in out:
            out.append(doc)
    return out


def _cite_numbers(sentence: str) -> list[int]:
    return [int(m) for m in _CITE_RE.findall(sentence)]


def grounded_citation_events(record: QueryRecord, answer: str, judge
                             ) -> tuple[list[int], list[int], int]:
    """Recall events per statement, precision events per citation, judge failures."""
    snippets = {d.doc_id: d.snippet for d in record.retrieved_docs}
    memo: dict[tuple[str, ...], bool] = {}
    recall_events: list[int] = []
    precision_events: list[int] = []
    failures = 0

    for _, _, sentence in split_sentences(answer):
        hypothesis = strip_citations(sentence).strip()
        if not any(ch.isalnum() for ch in hypothesis):
            continue
        cited = statement_citations(sentence, record.n_docs)
        out_of_bounds = sum(1 for n in _cite_numbers(sentence) if not 1 <= n <= record.n_docs)
        memo.clear()

        def entails(docs: tuple[str, ...]) -> bool:
            if not docs:
                return False
            if docs not in memo:
                premise = " ".join(snippets[d] for d in docs)
                memo[docs] = judge.entailment(premise, hypothesis) is EntailmentRelation.ENTAILS
            return memo[docs]

        try:
            if not cited:
                s_recall, s_prec = 0, []
            else:
                whole = entails(tuple(cited))
                s_recall = int(whole)
                s_prec = []
                for d in cited:
                    rest = tuple(x for x in cited if x != d)
                    s_prec.append(int(entails((d,)) or (whole and not entails(rest))))
        except JudgeParseError:
            failures += 1
            continue
        recall_events.append(s_recall)
        precision_events.extend(s_prec)
        precision_events.extend([0] * out_of_bounds)
    return recall_events, precision_events, failures


def _harmonic(a: float, b: float) -> float:
    return 0.0 if a == 0 or b == 0 else 2 * a * b / (a + b)


def grounded_citation_result(items: Sequence[EvalItem], judge) -> MetricResult:
    recall_all: list[int] = []
    precision_all: list[int] = []
    excluded: Counter = Counter()
    for it in items:
        if it.predicted_abstain:
            excluded["abstained"] += 1
            continue
        r, p, failures = grounded_citation_events(it.record, it.answer, judge)
        if failures:
            excluded["judge-parse-failure"] += failures
        recall_all.extend(r)
        precision_all.extend(p)
    if not recall_all:
        return MetricResult("grounded_citation", None, _ids(items), excluded=excluded)
    recall = sum(recall_all) / len(recall_all)
    precision = sum(precision_all) / len(precision_all) if precision_all else 0.0
    return MetricResult("grounded_citation", _harmonic(precision, recall), _ids(items),
                        support=len(recall_all), excluded=excluded,
                        extra={"citation_recall": recall, "citation_precision": precision,
                               "statements": len(recall_all), "citations": len(precision_all)})


def compute_grounded_citation(items: Sequence[EvalItem], judge) -> float:
    if not items:
        raise EmptyInput("grounded citation needs at least one item")
    value = grounded_citation_result(items, judge).value
    return 0.0 if value is None else value


# Behavioral adherence -----------------------------------------------------------


def behavioral_adherence_result(items: Sequence[EvalItem], judge) -> MetricResult:
    hits: dict[str, bool] = {}
    excluded: Counter = Counter()
    for it in items:
        if it.predicted_abstain:
            excluded["abstained"] += 1
            continue
        try:
            hits[it.record_id] = judge.behavior(it.record.query, it.answer,
                                                it.record.conflict_type).adherent
        except JudgeParseError:
            excluded["judge-parse-failure"] += 1
    return _ratio("behavioral_adherence", items, hits, excluded)


def compute_behavioral_adherence(items: Sequence[EvalItem], judge) -> float:
    if not items:
        raise EmptyInput("behavioral adherence needs at least one item")
    return behavioral_adherence_result(items, judge).value


# Table-3 metrics ----------------------------------------------------------------


def doc_verdict_result(items: Sequence[EvalItem]) -> MetricResult:
    num = 0
    den = 0
    per_type: dict[str, list[int]] = {}
    excluded: Counter = Counter()
    for it in items:
        notes = it.record.per_doc_notes
        if not notes:
            excluded["no-gold-notes"] += 1
            continue
        if it.parsed is None or not it.parsed.verdict_array_found:
            excluded["no-valid-think"] += 1
            continue
        gold = {n.doc_id: n.verdict for n in notes}
        cell = per_type.setdefault(it.conflict_type, [0, 0])
        for entry in it.parsed.verdicts:
            if entry.doc_id not in gold:
                continue
            ok = int(entry.verdict == gold[entry.doc_id])
            num += ok
            den += 1
            cell[0] += ok
            cell[1] += 1
    return MetricResult("doc_verdict_accuracy", num / den if den else None, _ids(items),
                        float(num), den,
                        {k: (float(a), b) for k, (a, b) in sorted(per_type.items()) if b},
                        excluded)


def compute_doc_verdict_accuracy(items: Sequence[EvalItem]) -> tuple[float | None, int]:
    r = doc_verdict_result(items)
    return r.value, r.support


def conflict_prediction_result(items: Sequence[EvalItem]) -> MetricResult:
    hits: dict[str, bool] = {}
    excluded: Counter = Counter()
    for it in items:
        if it.parsed is None:
            excluded["unparseable"] += 1
        elif it.parsed.conflict_label is None:
            excluded["label-out-of-lexicon"] += 1
        else:
            hits[it.record_id] = it.parsed.conflict_label == it.record.conflict_type
    return _ratio("conflict_prediction_accuracy", items, hits, excluded)


def compute_conflict_prediction_accuracy(items: Sequence[EvalItem]) -> tuple[float | None, int]:
    r = conflict_prediction_result(items)
    return r.value, r.support


def count_abstentions(items: Sequence[EvalItem]) -> tuple[int, int]:
    return (sum(1 for i in items if i.predicted_abstain),
            sum(1 for i in items if not i.gold_answerable))


# ---------------------------------------------------------------------------
# report

REPORT_HEADER = {
    "f1_gr": "mean of refuse-class F1 and answer-class F1; a class without gold members is "
             "omitted; empty precision denominator counts as 1 only when the class has no gold "
             "members",
    "answer_correctness": "gold-unanswerable items excluded; abstaining on an answerable item "
                          "counts as incorrect; target is gold_answer, else the expected "
                          "response answer (flagged)",
    "grounded_citation": "harmonic mean of statement-level citation recall and citation-level "
                         "precision over non-abstaining outputs; uncited statements are recall "
                         "failures",
    "behavioral_adherence": "non-abstaining outputs only; judge parse failures excluded",
    "doc_verdict_accuracy": "exact verdict match over doc entries inside parsed think blocks",
    "conflict_prediction_accuracy": "exact label match over outputs with an in-lexicon label",
    "abstain_count": "outputs whose answer is exactly the abstention sentinel, versus gold "
                     "refusals",
}

RATIO_METRICS = ("answer_correctness", "behavioral_adherence",
                 "doc_verdict_accuracy", "conflict_prediction_accuracy")


@dataclass
class CatsReport:
    model: str
    mode: str
    run_type: str
    n_items: int
    f1_gr: float | None
    answer_correctness: float | None
    grounded_citation: float | None
    behavioral_adherence: float | None
    doc_verdict_accuracy: float | None
    doc_verdict_support: int
    abstain_count: int
    abstain_expected: int
    conflict_prediction_accuracy: float | None
    conflict_prediction_support: int
    per_type: dict[str, dict[str, dict[str, float]]]
    exclusions: dict[str, dict[str, int]]
    details: dict[str, Any]
    manifest: dict[str, Any] = field(default_factory=dict)

    def rates(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in (
            "f1_gr", "answer_correctness", "grounded_citation", "behavioral_adherence",
            "doc_verdict_accuracy", "conflict_prediction_accuracy")}

    def to_dict(self) -> dict[str, Any]:
        return {
            "header": REPORT_HEADER,
            "model": self.model,
            "mode": self.mode,
            "type": self.run_type,
            "n_items": self.n_items,
            "metrics": self.rates() | {
                "doc_verdict_support": self.doc_verdict_support,
                "abstain_count": self.abstain_count,
                "abstain_expected": self.abstain_expected,
                "conflict_prediction_support": self.conflict_prediction_support,
            },
            "per_type": self.per_type,
            "exclusions": self.exclusions,
            "details": self.details,
            "manifest": self.manifest,
        }


def aggregate_report(results: Mapping[str, MetricResult], abstentions: tuple[int, int],
                     manifest: Mapping[str, Any] | None = None) -> CatsReport:
    """Assemble per-metric results computed over one item set."""
    manifest = dict(manifest or {})
    id_sets = {r.item_ids for r in results.values()}
    if len(id_sets) > 1:
        names = {name: len(r.item_ids) for name, r in results.items()}
        raise InconsistentItemSets(f"metrics were computed on different item sets: {names}")
    n_items = len(next(iter(id_sets))) if id_sets else 0

    def val(name):
        return results[name].value if name in results else None

    def sup(name):
        return results[name].support if name in results else 0

    per_type: dict[str, dict[str, dict[str, float]]] = {}
    for name in RATIO_METRICS:
        if name not in results:
            continue
        for ctype, (num, den) in results[name].per_type.items():
            per_type.setdefault(ctype, {})[name] = {
                "value": num / den if den else None, "numerator": num, "support": den}
    per_type = {k: per_type[k] for k in sorted(per_type)}
    exclusions = {name: dict(sorted(r.excluded.items()))
                  for name, r in sorted(results.items()) if r.excluded}
    details = {name: r.extra for name, r in sorted(results.items()) if r.extra}
    return CatsReport(
        model=str(manifest.get("model", "unknown")),
        mode=str(manifest.get("mode", "unknown")),
        run_type=str(manifest.get("type", "unknown")),
        n_items=n_items,
        f1_gr=val("f1_gr"),
        answer_correctness=val("answer_correctness"),
        grounded_citation=val("grounded_citation"),
        behavioral_adherence=val("behavioral_adherence"),
        doc_verdict_accuracy=val("doc_verdict_accuracy"),
        doc_verdict_support=sup("doc_verdict_accuracy"),
        abstain_count=abstentions[0],
        abstain_expected=abstentions[1],
        conflict_prediction_accuracy=val("conflict_prediction_accuracy"),
        conflict_prediction_support=sup("conflict_prediction_accuracy"),
        per_type=per_type,
        exclusions=exclusions,
        details=details,
        manifest=manifest,
    )


def judge_requests(items: Sequence[EvalItem]) -> list[tuple[str, dict[str, Any]]]:
    """Every judge call ``evaluate`` will make, for concurrent prefetching."""
    reqs: list[tuple[str, dict[str, Any]]] = []
    for it in items:
        if it.predicted_abstain:
            continue
        answer = it.answer
        if answer.strip():
            reqs.append(("behavior", {"query": it.record.query, "answer": answer,
                                      "conflict_type": it.conflict_type}))
            target, _ = answer_target(it.record)
            if it.gold_answerable and target:
                reqs.append(("recall", {"gold": target, "candidate": answer}))
        snippets = {d.doc_id: d.snippet for d in it.record.retrieved_docs}
        for _, _, sentence in split_sentences(answer):
            hyp = strip_citations(sentence).strip()
            cited = statement_citations(sentence, it.record.n_docs)
            if not hyp or not cited:
                continue
            groups = {tuple(cited)} | {(d,) for d in cited}
            groups |= {tuple(x for x in cited if x != d) for d in cited}
            for g in sorted(g for g in groups if g):
                reqs.append(("entailment", {"premise": " ".join(snippets[d] for d in g),
                                            "hypothesis": hyp}))
    return reqs


def evaluate(items: Sequence[EvalItem], judge,
             manifest: Mapping[str, Any] | None = None) -> CatsReport:
    if not items:
        raise EmptyInput("nothing to evaluate")
    if hasattr(judge, "prefetch"):
        judge.prefetch(judge_requests(items))
    results = {
        "f1_gr": f1_gr_result(items),
        "answer_correctness": answer_correctness_result(items, judge),
        "grounded_citation": grounded_citation_result(items, judge),
        "behavioral_adherence": behavioral_adherence_result(items, judge),
        "doc_verdict_accuracy": doc_verdict_result(items),
        "conflict_prediction_accuracy": conflict_prediction_result(items),
    }
    unparseable = sum(1 for i in items if i.parsed is None)
    report = aggregate_report(results, count_abstentions(items), manifest)
    report.exclusions["unparseable_outputs"] = {"count": unparseable}
    return report


# ---------------------------------------------------------------------------
# table views

TABLE2_COLUMNS = ("Model", "Mode", "Type", "F1-GR", "Answer Correctness",
                  "Grounded Citation", "Behavioral Adherence")
TABLE3_COLUMNS = ("Model", "Mode", "Type", "Doc-Verdicts Accuracy", "Abstain count",
                  "Conflict Prediction Accuracy")


def _fmt3(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def _fmt_pct(v: float | None, support: int) -> str:
    return "n/a" if v is None else f"{v * 100:.2f}% (support: {support})"


def table2_rows(reports: Sequence[CatsReport]) -> list[list[str]]:
    return [[r.model, r.mode, r.run_type, _fmt3(r.f1_gr), _fmt3(r.answer_correctness),
             _fmt3(r.grounded_citation), _fmt3(r.behavioral_adherence)] for r in reports]


def table3_rows(reports: Sequence[CatsReport]) -> list[list[str]]:
    return [[r.model, r.mode, r.run_type,
             _fmt_pct(r.doc_verdict_accuracy, r.doc_verdict_support),
             f"{r.abstain_count} (actual={r.abstain_expected})",
             _fmt_pct(r.conflict_prediction_accuracy, r.conflict_prediction_support)]
            for r in reports]


def to_csv(columns: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def to_text(columns: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(columns, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def report_json(reports: Sequence[CatsReport]) -> str:
    payload = [r.to_dict() for r in reports]
    return json.dumps(payload if len(payload) > 1 else payload[0],
                      indent=2, sort_keys=True, ensure_ascii=False) + "\n"
