"""JSONL reading and writing, record normalization, refusal merging, splitting."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence
from urllib.parse import urlparse

import networkx as nx
from dateutil import parser as date_parser

from .schema import (
    QueryRecord,
    SchemaError,
    Violation,
    is_iso8601,
    normalize_conflict_type,
    normalize_ws,
    validate_record,
)

log = logging.getLogger(__name__)


class MalformedLine(ValueError):
    def __init__(self, path: str | Path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: malformed line: {reason}")
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason


class IdCollision(ValueError):
    pass


# ---------------------------------------------------------------------------
# JSONL


def iter_json_lines(path: str | Path, *, strict: bool = False,
                    errors: list[MalformedLine] | None = None) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_no, object)`` for each non-blank line.

    Malformed lines raise in strict mode; otherwise they are appended to
    ``errors`` and skipped.
    """
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                err = MalformedLine(path, line_no, exc.msg)
            else:
                if isinstance(obj, dict):
                    yield line_no, obj
                    continue
                err = MalformedLine(path, line_no, "not a JSON object")
            if strict:
                raise err
            log.warning("%s", err)
            if errors is not None:
                errors.append(err)


@dataclass
class LoadedRecords:
    records: list[QueryRecord] = field(default_factory=list)
    line_numbers: list[int] = field(default_factory=list)
    violations: dict[int, list[Violation]] = field(default_factory=dict)
    errors: list[MalformedLine] = field(default_factory=list)


def load_jsonl(path: str | Path, *, strict: bool = False) -> LoadedRecords:
    """Read records along with their violations and the lines that were skipped."""
    out = LoadedRecords()
    for line_no, obj in iter_json_lines(path, strict=strict, errors=out.errors):
        try:
            record = QueryRecord.from_dict(obj)
        except SchemaError as exc:
            err = MalformedLine(path, line_no, str(exc))
            if strict:
                raise err from exc
            log.warning("%s", err)
            out.errors.append(err)
            continue
        out.records.append(record)
        out.line_numbers.append(line_no)
        found = validate_record(record)
        if found:
            out.violations[line_no] = found
    return out


def read_jsonl(path: str | Path, *, strict: bool = False) -> list[QueryRecord]:
    return load_jsonl(path, strict=strict).records


def write_jsonl(path: str | Path, rows: Iterable[QueryRecord | Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            obj = row.to_dict() if isinstance(row, QueryRecord) else row
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# normalization

# labels seen in raw CONFLICTS exports, folded to lower case
RAW_LABEL_ALIASES = {
    "no conflict": "No conflict",
    "complementary": "Complementary information",
    "complementary information": "Complementary information",
    "conflicting opinions": "Conflicting opinions or research outcomes",
    "conflicting opinions or research outcomes": "Conflicting opinions or research outcomes",
    "conflicting research outcomes": "Conflicting opinions or research outcomes",
    "outdated information": "Conflict due to outdated information",
    "outdated": "Conflict due to outdated information",
    "freshness": "Conflict due to outdated information",
    "temporal": "Conflict due to outdated information",
    "conflict due to outdated information": "Conflict due to outdated information",
    "misinformation": "Conflict due to misinformation",
    "conflict due to misinformation": "Conflict due to misinformation",
}

DOMAIN_CATEGORIES = ("news", "academic", "encyclopedic", "other")

_DOMAIN_TABLE = {
    "news": (
        "reuters.com", "bbc.com", "bbc.co.uk", "apnews.com", "nytimes.com", "wsj.com",
        "theguardian.com", "cnn.com", "washingtonpost.com", "bloomberg.com", "npr.org",
        "foxnews.com", "nbcnews.com", "cbsnews.com", "abcnews.go.com", "aljazeera.com",
        "forbes.com", "usatoday.com", "time.com", "economist.com", "ft.com", "latimes.com",
        "independent.co.uk", "telegraph.co.uk", "cnbc.com", "politico.com", "axios.com",
        "news.yahoo.com", "theatlantic.com", "newsweek.com", "hindustantimes.com",
        "timesofindia.indiatimes.com", "thehindu.com",
    ),
    "academic": (
        "nature.com", "science.org", "sciencedirect.com", "springer.com", "wiley.com",
        "ncbi.nlm.nih.gov", "pubmed.ncbi.nlm.nih.gov", "arxiv.org", "jstor.org",
        "researchgate.net", "plos.org", "thelancet.com", "nejm.org", "bmj.com", "cell.com",
        "frontiersin.org", "mdpi.com", "acm.org", "ieee.org", "tandfonline.com",
        "sagepub.com", "oup.com", "cambridge.org", "semanticscholar.org",
    ),
    "encyclopedic": (
        "wikipedia.org", "britannica.com", "encyclopedia.com", "wikidata.org",
        "worldhistory.org", "merriam-webster.com", "dictionary.com", "infoplease.com",
        "newworldencyclopedia.org", "scholarpedia.org",
    ),
}
_ACADEMIC_SUFFIXES = (".edu", ".ac.uk", ".ac.in", ".ac.jp", ".edu.au")
_NAME_TABLE = {
    "reuters": "news", "bbc": "news", "associated press": "news", "the new york times": "news",
    "the guardian": "news", "cnn": "news", "nature": "academic", "science": "academic",
    "pubmed": "academic", "arxiv": "academic", "wikipedia": "encyclopedic",
    "britannica": "encyclopedic", "encyclopaedia britannica": "encyclopedic",
}


def source_host(source: str) -> str:
    s = source.strip().lower()
    if "://" in s:
        s = urlparse(s).netloc
    s = s.split("/", 1)[0].split(":", 1)[0]
    return s[4:] if s.startswith("www.") else s


def classify_source(source: str) -> str:
    """Map a source domain or publisher name onto news/academic/encyclopedic/other."""
    if not source:
        return "other"
    if source.strip().lower() in _NAME_TABLE:
        return _NAME_TABLE[source.strip().lower()]
    host = source_host(source)
    for category, hosts in _DOMAIN_TABLE.items():
        for h in hosts:
            if host == h or host.endswith("." + h):
                return category
    if host.endswith(_ACADEMIC_SUFFIXES):
        return "academic"
    return "other"


def majority_domain(sources: Iterable[str]) -> str:
    """Most frequent category; ties go to news, then academic, then encyclopedic."""
    counts = Counter(classify_source(s) for s in sources)
    if not counts:
        return "other"
    top = max(counts.values())
    return next(c for c in DOMAIN_CATEGORIES if counts[c] == top)


def normalize_timestamp(value: Any) -> tuple[str | None, str | None]:
    """Return ``(iso_or_None, note_or_None)``.

    Date precision is kept: a year-only input becomes ``YYYY``, a month becomes
    ``YYYY-MM``. Times are dropped; publication dates only need the day.
    """
    if value is None:
        return None, None
    if isinstance(value, bool):
        return None, f"unparseable timestamp {value!r}"
    if isinstance(value, (int, float)):
        if math.isfinite(value) and 0 <= value < 4e10:
            return _dt.datetime.fromtimestamp(value, _dt.timezone.utc).date().isoformat(), None
        return None, f"unparseable timestamp {value!r}"
    text = str(value).strip()
    if not text:
        return None, None
    if is_iso8601(text):
        return text[:10] if "T" in text else text, None
    try:
        a = date_parser.parse(text, default=_dt.datetime(1, 1, 1))
        b = date_parser.parse(text, default=_dt.datetime(2, 2, 2))
    except (ValueError, OverflowError):
        return None, f"unparseable timestamp {text!r}"
    if a.year != b.year:
        return None, f"timestamp without a year {text!r}"
    if a.month != b.month:
        return f"{a.year:04d}", None
    if a.day != b.day:
        return f"{a.year:04d}-{a.month:02d}", None
    return a.date().isoformat(), None


_A2_DOC_KEYS = ("doc_id", "title", "source", "snippet", "timestamp")
_DROPPED_DOC_KEYS = ("doc_id",)


def _resolve_label(label: Any) -> str:
    if not isinstance(label, str):
        raise SchemaError(f"conflict_type must be a string, got {label!r}")
    alias = RAW_LABEL_ALIASES.get(normalize_ws(label).casefold())
    if alias is not None:
        return alias
    return normalize_conflict_type(label)[0].value


def normalize_record(raw: Mapping[str, Any], *, record_id: str | None = None) -> QueryRecord:
    """Turn a raw CONFLICTS-style object into the normalized record layout."""
    if "query" not in raw:
        raise SchemaError("record has no 'query'")
    docs_in = raw.get("retrieved_docs") or []
    if not isinstance(docs_in, list):
        raise SchemaError("'retrieved_docs' must be a list")
    metadata = dict(raw.get("metadata") or {})
    notes = list(metadata.get("normalization_notes", []))

    docs: list[dict[str, Any]] = []
    seen: set[tuple[str, str]] = set()
    for i, d in enumerate(docs_in, start=1):
        if not isinstance(d, Mapping):
            raise SchemaError(f"retrieved doc {i} is not an object")
        source = d.get("source") or (source_host(d["source_url"]) if d.get("source_url") else "")
        snippet = str(d.get("snippet") or "")
        key = (normalize_ws(snippet), normalize_ws(str(source)))
        if key in seen:
            notes.append(f"dropped duplicate doc at position {i}")
            continue
        seen.add(key)
        ts, ts_note = normalize_timestamp(d.get("timestamp"))
        if ts_note:
            notes.append(f"doc at position {i}: {ts_note}")
        doc = {
            "doc_id": f"d{len(docs) + 1}",
            "title": str(d.get("title") or ""),
            "source": str(source),
            "snippet": snippet,
            "timestamp": ts,
        }
        for k, v in d.items():
            if k not in _A2_DOC_KEYS:
                doc[k] = v
        docs.append(doc)

    out: dict[str, Any] = {}
    rid = raw.get("id", record_id)
    if rid is not None:
        out["id"] = str(rid)
    out["query"] = raw["query"]
    out["retrieved_docs"] = docs
    out["conflict_type"] = _resolve_label(raw.get("conflict_type"))
    gold = raw.get("gold_answer")
    if isinstance(gold, list):
        gold = "; ".join(str(g) for g in gold)
    if gold is not None and str(gold).strip():
        out["gold_answer"] = str(gold)

    metadata.setdefault("category", raw.get("category") or "conflicts")
    if docs:
        metadata["domain"] = majority_domain(d["source"] for d in docs)
    else:
        metadata.setdefault("domain", "other")
    if notes:
        metadata["normalization_notes"] = notes
    out["metadata"] = metadata

    for k, v in raw.items():
        if k not in out and k not in ("id", "gold_answer", "metadata", "category"):
            out[k] = v
    return QueryRecord.from_dict(out)


def format_record_id(n: int) -> str:
    return f"#{n:04d}"


def merge_refusals(records: Sequence[QueryRecord],
                   refusal_records: Sequence[QueryRecord]) -> list[QueryRecord]:
    """Concatenate conflict and refusal records with globally unique ids.

    Refusal records are tagged ``metadata.provenance = "refusal"``. Records
    without an id get the next free ``#NNNN`` id.
    """
    from dataclasses import replace

    seen: dict[str, str] = {}
    for origin, group in (("conflicts", records), ("refusal", refusal_records)):
        for r in group:
            if r.id is None:
                continue
            if r.id in seen:
                raise IdCollision(f"id {r.id!r} appears in {seen[r.id]} and {origin} records")
            seen[r.id] = origin
    for r in refusal_records:
        if r.expected_response is None or not r.expected_response.abstain:
            raise ValueError(f"refusal record {r.id!r} must have expected_response.abstain = true")

    numeric = [int(i[1:]) for i in seen if i.startswith("#") and i[1:].isdigit()]
    next_id = max(numeric, default=0) + 1
    merged = []
    for origin, group in (("conflicts", records), ("refusal", refusal_records)):
        for r in group:
            rid = r.id
            if rid is None:
                while format_record_id(next_id) in seen:
                    next_id += 1
                rid = format_record_id(next_id)
                seen[rid] = origin
                next_id += 1
            if origin == "refusal":
                meta = dict(r.metadata or {})
                meta["provenance"] = "refusal"
                r = replace(r, metadata=meta)
            merged.append(replace(r, id=rid) if rid != r.id else r)
    return merged


# ---------------------------------------------------------------------------
# splitting

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator; portable and fully specified.

    state <- state + 0x9E3779B97F4A7C15 (mod 2^64), then the output is the
    standard xor-shift-multiply finalizer of the new state.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        limit = ((1 << 64) // n) * n
        while True:
            r = self.next()
            if r < limit:
                return r % n

    def shuffle(self, items: list) -> None:
        """Fisher-Yates from the last index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


SPLIT_NAMES = ("train", "val", "test")
# remainder tie-break: test first, then val, then train
_SPLIT_PREFERENCE = {"test": 2, "val": 1, "train": 0}


def stratum_key(record: QueryRecord) -> str:
    return "refusal" if record.is_refusal else record.conflict_type.value


def _largest_remainder(total: int, fractions: Sequence[Fraction]) -> list[int]:
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(fractions)),
                   key=lambda s: (-(quotas[s] - counts[s]), -_SPLIT_PREFERENCE[SPLIT_NAMES[s]]))
    for s in order[:left]:
        counts[s] += 1
    return counts


def allocate_strata(sizes: Mapping[str, int], fractions: Sequence[Fraction]) -> dict[str, list[int]]:
    """Integer split counts per stratum.

    Split totals come from largest-remainder rounding of the whole corpus.
    Each cell is then the floor or ceiling of its proportional share, chosen by
    min-cost flow so that rows and columns both add up. The chosen set of
    rounded-up cells maximizes the summed fractional parts first and then
    ``sum((preference + 1) * (n_strata - row))``, so among equal remainders the
    extra record goes to test before val before train, and to strata that sort
    earlier. Costs are exact integers, so the result does not depend on float
    rounding or solver internals whenever that optimum is unique.
    """
    keys = sorted(sizes)
    n_rows = len(keys)
    total = sum(sizes.values())
    col_totals = _largest_remainder(total, fractions)
    floors = {k: [math.floor(sizes[k] * f) for f in fractions] for k in keys}
    g = nx.DiGraph()
    row_need = {k: sizes[k] - sum(floors[k]) for k in keys}
    col_need = [col_totals[s] - sum(floors[k][s] for k in keys) for s in range(len(fractions))]
    g.add_node("src", demand=-sum(row_need.values()))
    g.add_node("sink", demand=sum(col_need))
    for k in keys:
        g.add_edge("src", ("row", k), capacity=row_need[k], weight=0)
    for s in range(len(fractions)):
        g.add_edge(("col", s), "sink", capacity=col_need[s], weight=0)
    denom = math.lcm(*(f.denominator for f in fractions))
    tie_span = len(fractions) * n_rows * (len(fractions)) * n_rows + 1
    for r, k in enumerate(keys):
        for s, f in enumerate(fractions):
            frac = sizes[k] * f - floors[k][s]
            if frac == 0:
                continue  # exact share, cell is fixed
            secondary = (_SPLIT_PREFERENCE[SPLIT_NAMES[s]] + 1) * (n_rows - r)
            cost = -int(frac * denom) * tie_span - secondary
            g.add_edge(("row", k), ("col", s), capacity=1, weight=cost)
    flow = nx.min_cost_flow(g)
    return {k: [floors[k][s] + flow[("row", k)].get(("col", s), 0) for s in range(len(fractions))]
            for k in keys}


@dataclass
class SplitResult:
    train: list[QueryRecord]
    val: list[QueryRecord]
    test: list[QueryRecord]
    manifest: dict[str, Any]

    def parts(self) -> dict[str, list[QueryRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def stratified_split(records: Sequence[QueryRecord],
                     fractions: Sequence[float] = (0.8, 0.1, 0.1),
                     seed: int = 42) -> SplitResult:
    if len(fractions) != 3:
        raise ValueError("three fractions are needed (train, val, test)")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    fracs = [Fraction(str(f)) for f in fractions]
    fracs[-1] = 1 - fracs[0] - fracs[1]

    strata: dict[str, list[QueryRecord]] = defaultdict(list)
    for r in records:
        strata[stratum_key(r)].append(r)

    rng = SplitMix64(seed)
    parts: dict[str, list[QueryRecord]] = {name: [] for name in SPLIT_NAMES}
    small = {k: v for k, v in strata.items() if len(v) < len(SPLIT_NAMES)}
    for k in sorted(small):
        log.warning("stratum %r has %d records; all assigned to train", k, len(small[k]))
    counts = allocate_strata({k: len(v) for k, v in strata.items() if k not in small}, fracs)
    for k in small:
        counts[k] = [len(small[k]), 0, 0]

    per_stratum = {}
    for k in sorted(strata):
        group = sorted(strata[k], key=lambda r: r.id or "")
        rng.shuffle(group)
        n_train, n_val, _ = counts[k]
        parts["train"].extend(group[:n_train])
        parts["val"].extend(group[n_train:n_train + n_val])
        parts["test"].extend(group[n_train + n_val:])
        per_stratum[k] = dict(zip(SPLIT_NAMES, counts[k]))

    manifest = {
        "seed": seed,
        "fractions": list(fractions),
        "generator": "splitmix64/fisher-yates",
        "sizes": {name: len(parts[name]) for name in SPLIT_NAMES},
        "per_stratum": per_stratum,
        "small_strata": sorted(small),
    }
    return SplitResult(parts["train"], parts["val"], parts["test"], manifest)


def write_split(result: SplitResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in result.parts().items():
        write_jsonl(out / f"{name}.jsonl", rows)
    with open(out / "split_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
