"""Conflict-aware RAG tooling: the output contract and the CATS evaluation suite."""

from .schema import (
    ABSTAIN_SENTINEL,
    ConflictType,
    EntailmentRelation,
    ExpectedResponse,
    JudgeVerdict,
    PerDocNote,
    QueryRecord,
    RetrievedDoc,
    SchemaError,
    Violation,
    validate_record,
)
from .contract import (
    Diagnostic,
    ParsedOutput,
    UnparseableOutput,
    extract_citations,
    parse_output,
    sanitize,
)

__version__ = "0.1.0"
