"""Run the three-stage annotator offline, then interrupt it and resume.

A scripted completer stands in for the chat endpoint. Its first stage-2 reply
for one record is too long, which sends a repair prompt back; one other
record never produces valid notes and ends up in the review queue.

Run: python demos/04_annotation_pipeline.py
"""

import json
import tempfile
import logging
from pathlib import Path

from conflict_rag.annotate import run_corpus, write_corpus_outputs
from conflict_rag.gateway import ScriptedCompleter
from conflict_rag.synthetic import reference_annotator, strip_annotations, synthetic_corpus

logging.basicConfig(level=logging.WARNING, format="log: %(message)s")
corpus = synthetic_corpus()
sample = corpus[:12]
raw = [strip_annotations(r) for r in sample]
reference = reference_annotator(corpus)
chatty, hopeless = sample[9].id, sample[7].id
already_long = set()


def endpoint(bundle):
    if bundle.record_id == hopeless and bundle.mode == "stage1":
        return "I could not read these documents."
    if bundle.record_id == chatty and bundle.mode == "stage2" and chatty not in already_long:
        already_long.add(chatty)
        return json.dumps({"conflict_reason": " ".join(["very"] * 70) + " long"})
    return reference(bundle)


with tempfile.TemporaryDirectory() as tmp:
    state = Path(tmp) / "state"
    first = run_corpus(raw, ScriptedCompleter(endpoint), state, max_records=5)
    print(f"interrupted run: {len(first.newly_processed)} records touched, "
          f"{len(first.annotated)} finished")

    completer = ScriptedCompleter(endpoint)
    second = run_corpus(raw, completer, state)
    print(f"resumed run:     {len(second.newly_processed)} records touched, "
          f"{len(second.annotated)} finished, {len(second.review_queue)} queued for review")

    repairs = [b for b in completer.calls if "It broke these rules" in b.user and b.record_id == chatty]
    print(f"\n{chatty} needed {len(repairs)} repair prompt(s); final reason:")
    print(" ", next(r for r in second.annotated if r.id == chatty).conflict_reason)

    failure = second.review_queue[0]
    print(f"\n{failure['record_id']} failed at stage {failure['stage']} after "
          f"{len(failure['transcript'])} attempts:")
    for v in failure["violations"]:
        print("  -", v)

    same = all(a == b for a, b in zip(second.annotated, [r for r in sample if r.id != hopeless]))
    print("\nAnnotations match the reference records:", same)
    write_corpus_outputs(second, Path(tmp) / "out")
    print("Wrote:", sorted(p.name for p in (Path(tmp) / "out").iterdir()))
