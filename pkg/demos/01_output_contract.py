"""Walk one model completion through the sanitizer and the parser.

Run: python demos/01_output_contract.py
"""

from conflict_rag.contract import extract_citations, parse_completion, sanitize
from conflict_rag.synthetic import gold_completion, synthetic_corpus

record = next(r for r in synthetic_corpus() if r.conflict_type.value.startswith("Conflicting"))
raw = gold_completion(record) + "\nthe model kept talking after the sentinel"

print("Query:", record.query)
print("Documents:", ", ".join(d.doc_id for d in record.retrieved_docs))

# Everything after the sentinel line is dropped before parsing.
clean = sanitize(raw)
print("\nSanitized completion ends with:", repr(clean[-80:]))

_, parsed, diags = parse_completion(raw, record.n_docs)
print("\nParsed label:  ", parsed.conflict_label.value)
print("Reason:        ", parsed.conflict_reason)
print("Verdicts:      ", [(v.doc_id, v.verdict) for v in parsed.verdicts])
print("Final answer:  ", parsed.final_answer)
print("Citations:     ", parsed.citations)
print("Diagnostics:   ", diags or "none")

# A hand-damaged copy: hyphen instead of the label separator, and a citation to a
# document that was never retrieved.
broken = raw.replace(" — ", " - ", 1).replace("[d1]", f"[d{record.n_docs + 3}]", 1)
_, parsed, diags = parse_completion(broken, record.n_docs)
print("\nAfter damage the label is still recovered:", parsed.conflict_label.value)
for d in diags:
    print(f"  {d.tier:8s} {d.code:24s} bytes {d.span[0]}-{d.span[1]}  {d.message}")

cites, cite_diags = extract_citations("Dates differ [d1]. Nobody agrees.", n_docs=2)
print("\nCitation scan on a two-sentence answer:", cites, [d.code for d in cite_diags])
