"""Split the synthetic corpus by conflict type, then render prompts for one test record.

Run: python demos/02_split_and_prompts.py
"""

from collections import Counter

from conflict_rag.dataset import stratified_split, stratum_key
from conflict_rag.prompts import build_annotation_prompt, build_inference_prompt
from conflict_rag.synthetic import synthetic_corpus

corpus = synthetic_corpus()
split = stratified_split(corpus, (0.8, 0.1, 0.1), seed=42)

print(f"{len(corpus)} records -> train {len(split.train)}, val {len(split.val)}, test {len(split.test)}")
print(f"\n{'stratum':44s} {'train':>5s} {'val':>4s} {'test':>4s}")
counts = {name: Counter(stratum_key(r) for r in rows) for name, rows in split.parts().items()}
for key in sorted(Counter(stratum_key(r) for r in corpus)):
    print(f"{key:44s} {counts['train'][key]:5d} {counts['val'][key]:4d} {counts['test'][key]:4d}")

# Same seed, same split: ids come back in the same order.
again = stratified_split(corpus, (0.8, 0.1, 0.1), seed=42)
print("\nDeterministic:", [r.id for r in again.test] == [r.id for r in split.test])

record = split.test[0]
oracle = build_inference_prompt(record, "oracle")
e2e = build_inference_prompt(record, "end_to_end")
print(f"\nOracle prompt: {len(oracle.system)} + {len(oracle.user)} chars, "
      f"label given: {record.conflict_type.value!r}")
print("End-to-end prompt mentions the label tag:", "CONFLICT_LABEL" in e2e.user)
print("Prompt digests differ:", oracle.digest()[:12], e2e.digest()[:12])

stage2 = build_annotation_prompt(record, 2, {"notes": list(record.per_doc_notes)})
print("\nStage-2 annotation prompt, user turn:\n")
print(stage2.user)
