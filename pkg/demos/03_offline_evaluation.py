"""Score a batch of imperfect completions with the offline judge.

The synthetic test split is paired with completions that carry known faults,
such as swapped labels or dropped citations. The tables show how far the
faults move each metric.

Run: python demos/03_offline_evaluation.py
"""

from collections import Counter

from conflict_rag.dataset import stratified_split
from conflict_rag.gateway import MockJudge
from conflict_rag.metrics import (
    TABLE2_COLUMNS,
    TABLE3_COLUMNS,
    evaluate,
    make_items,
    table2_rows,
    table3_rows,
    to_text,
)
from conflict_rag.synthetic import (
    gold_completion,
    mixed_completions,
    perturbation_plan,
    synthetic_corpus,
)

test = stratified_split(synthetic_corpus(), seed=42).test
plan = perturbation_plan(test)
print("Faults injected:", dict(sorted(Counter(plan.values()).items())))

judge = MockJudge()
perfect = evaluate(make_items(test, {r.id: gold_completion(r) for r in test}), judge,
                   {"model": "reference", "mode": "oracle", "type": "gold"})
noisy = evaluate(make_items(test, mixed_completions(test)), judge,
                 {"model": "faulty", "mode": "oracle", "type": "mixed"})

print()
print(to_text(TABLE2_COLUMNS, table2_rows([perfect, noisy])))
print(to_text(TABLE3_COLUMNS, table3_rows([perfect, noisy])))

print("Answer correctness by conflict type (faulty run):")
for ctype, metrics in sorted(noisy.per_type.items()):
    ac = metrics["answer_correctness"]
    print(f"  {ctype:42s} {ac['numerator']:4.0f} / {ac['support']:<3d} = {ac['value']:.3f}")
print("\nExcluded from metrics:", noisy.exclusions)
