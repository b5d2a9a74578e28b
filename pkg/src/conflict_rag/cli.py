"""Pipeline entry point: ``python -m conflict_rag <subcommand>``.

Exit codes: 0 success, 2 operational failure (bad input, missing files,
credentials, alignment errors). Errors are also written to stderr as one
JSON object per line. Option values resolve as flag, then ``--config`` file,
then ``CONFLICT_RAG_<OPTION>`` environment variable, then default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

from . import annotate as annotate_mod
from .contract import sanitize
from .dataset import (
    IdCollision,
    MalformedLine,
    format_record_id,
    iter_json_lines,
    load_jsonl,
    normalize_record,
    read_jsonl,
    stratified_split,
    write_jsonl,
    write_split,
)
from .gateway import EndpointConfig, Gateway, GatewayError, LiveJudge, MockJudge
from .metrics import (
    TABLE2_COLUMNS,
    TABLE3_COLUMNS,
    CatsReport,
    InconsistentItemSets,
    evaluate,
    make_items,
    report_json,
    table2_rows,
    table3_rows,
    to_csv,
    to_text,
)
from .prompts import (
    build_annotation_prompt,
    build_inference_prompt,
    export_bundles_jsonl,
    template_checksums,
)
from .schema import SchemaError, validate_record

log = logging.getLogger("conflict_rag")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


_DEFAULTS: dict[str, Any] = {
    "seed": 42,
    "fractions": "0.8,0.1,0.1",
    "mode": "oracle",
    "judge": "mock",
    "concurrency": 4,
    "repair_budget": annotate_mod.REPAIR_BUDGET,
    "model": "unknown",
    "run_type": "unknown",
}


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    config: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot read config {args.config}: {exc}") from exc
    for key, value in vars(args).items():
        if value is not None or key in ("func", "config"):
            continue
        env = os.environ.get(f"CONFLICT_RAG_{key.upper()}")
        if key in config:
            setattr(args, key, config[key])
        elif env is not None:
            setattr(args, key, env)
        elif key in _DEFAULTS:
            setattr(args, key, _DEFAULTS[key])
    return args


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise CliError("usage", f"missing required option(s): {', '.join(missing)}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("io", f"input file not found: {path}")
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_normalize(args) -> int:
    _require(args, "input", "out")
    src = _existing(args.input)
    errors: list[MalformedLine] = []
    records = []
    try:
        for n, (line_no, obj) in enumerate(
                iter_json_lines(src, strict=args.strict, errors=errors), start=1):
            try:
                records.append(normalize_record(obj, record_id=format_record_id(n)))
            except SchemaError as exc:
                err = MalformedLine(src, line_no, str(exc))
                if args.strict:
                    raise err from exc
                log.warning("%s", err)
                errors.append(err)
    except MalformedLine as exc:
        raise CliError("malformed-line", str(exc)) from exc
    write_jsonl(args.out, records)
    violations = Counter(v.rule for r in records for v in validate_record(r))
    notes = sum(len((r.metadata or {}).get("normalization_notes", [])) for r in records)
    print(f"normalized {len(records)} records; {len(errors)} malformed lines skipped; "
          f"{notes} normalization notes")
    for rule, count in sorted(violations.items()):
        print(f"  {count:5d}  {rule}")
    return 0


def _endpoint(args, model_default: str | None = None) -> EndpointConfig:
    if getattr(args, "endpoint_config", None):
        try:
            cfg = EndpointConfig.from_file(_existing(args.endpoint_config))
        except (ValueError, TypeError) as exc:
            raise CliError("config", f"bad endpoint config: {exc}") from exc
    else:
        cfg = EndpointConfig(model_name=model_default) if model_default else EndpointConfig()
    return cfg


def cmd_annotate(args) -> int:
    _require(args, "input", "out_dir")
    records = read_jsonl(_existing(args.input))
    from .gateway import DEFAULT_ANNOTATOR_MODEL
    cfg = _endpoint(args, DEFAULT_ANNOTATOR_MODEL)
    cfg.token()
    state_dir = args.state_dir or str(Path(args.out_dir) / "state")
    with Gateway(cfg) as gw:
        result = annotate_mod.run_corpus(records, gw, state_dir,
                                         concurrency=int(args.concurrency),
                                         batched=not args.per_doc,
                                         repair_budget=int(args.repair_budget))
    annotate_mod.write_corpus_outputs(result, args.out_dir)
    print(f"annotated {len(result.annotated)} records; {len(result.review_queue)} queued "
          f"for review; {len(result.newly_processed)} processed this run")
    return 0


def cmd_split(args) -> int:
    _require(args, "input", "out_dir")
    records = read_jsonl(_existing(args.input))
    try:
        fractions = tuple(float(x) for x in str(args.fractions).split(","))
        result = stratified_split(records, fractions, int(args.seed))
    except ValueError as exc:
        raise CliError("usage", str(exc)) from exc
    write_split(result, args.out_dir)
    sizes = result.manifest["sizes"]
    print(f"train {sizes['train']}  val {sizes['val']}  test {sizes['test']}")
    return 0


def cmd_prompts(args) -> int:
    _require(args, "input", "out")
    records = read_jsonl(_existing(args.input))
    mode = args.mode
    bundles = []
    for r in records:
        if mode in ("oracle", "e2e", "end_to_end"):
            bundles.append(build_inference_prompt(r, mode, include_notes=not args.exclude_notes))
        elif mode in ("stage1", "stage2", "stage3"):
            prior = {"notes": list(r.per_doc_notes or []), "conflict_reason": r.conflict_reason}
            bundles.append(build_annotation_prompt(r, int(mode[-1]), prior))
        else:
            raise CliError("usage", f"unknown prompt mode {mode!r}")
    export_bundles_jsonl(args.out, bundles)
    print(f"wrote {len(bundles)} {mode} prompts")
    return 0


class _CannedEndpoint:
    """Serves completions from a JSONL file keyed by record id."""

    def __init__(self, path: Path):
        self.replies = {o["record_id"]: o.get("raw", o.get("completion", ""))
                        for _, o in iter_json_lines(path, strict=True)}

    def chat_complete(self, bundle) -> str:
        if bundle.record_id not in self.replies:
            raise GatewayError(f"no canned completion for {bundle.record_id}")
        return self.replies[bundle.record_id]


def cmd_run_inference(args) -> int:
    _require(args, "split", "out")
    records = read_jsonl(_existing(args.split))
    out = Path(args.out)
    done: dict[str, dict] = {}
    if out.exists():
        done = {o["record_id"]: o for _, o in iter_json_lines(out)}
    if args.canned:
        endpoint, model, temperature = _CannedEndpoint(_existing(args.canned)), "canned", 0.0
    else:
        cfg = _endpoint(args)
        cfg.token()
        endpoint, model, temperature = Gateway(cfg), cfg.model_name, cfg.temperature
    failures = 0
    with open(out, "a", encoding="utf-8", newline="\n") as fh:
        for r in records:
            if r.id in done:
                continue
            bundle = build_inference_prompt(r, args.mode, include_notes=args.include_notes)
            try:
                raw = endpoint.chat_complete(bundle)
            except GatewayError as exc:
                failures += 1
                print(json.dumps({"record_id": r.id, "error": "gateway", "message": str(exc)}),
                      file=sys.stderr)
                continue
            fh.write(json.dumps({"record_id": r.id, "raw": raw, "sanitized": sanitize(raw)},
                                ensure_ascii=False) + "\n")
            fh.flush()
    manifest = {
        "model": model, "mode": args.mode, "temperature": temperature,
        "include_notes": bool(args.include_notes),
        "template_checksums": template_checksums(),
    }
    _write_json(out.with_name(out.stem + ".manifest.json"), manifest)
    print(f"{len(records) - len(done) - failures} new completions, {failures} failures")
    return 2 if failures else 0


def _load_outputs(path: Path) -> dict[str, str]:
    try:
        return {o["record_id"]: o.get("raw", o.get("completion", ""))
                for _, o in iter_json_lines(path, strict=True)}
    except (MalformedLine, KeyError) as exc:
        raise CliError("malformed-line", f"{path}: {exc}") from exc


def write_report_dir(reports: Sequence[CatsReport], out_dir: str | Path,
                     diagnostics: Sequence[dict] = (), manifest: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(reports), encoding="utf-8")
    (out / "table2.csv").write_text(to_csv(TABLE2_COLUMNS, table2_rows(reports)), encoding="utf-8")
    (out / "table3.csv").write_text(to_csv(TABLE3_COLUMNS, table3_rows(reports)), encoding="utf-8")
    (out / "table2.txt").write_text(to_text(TABLE2_COLUMNS, table2_rows(reports)), encoding="utf-8")
    (out / "table3.txt").write_text(to_text(TABLE3_COLUMNS, table3_rows(reports)), encoding="utf-8")
    with open(out / "diagnostics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for d in diagnostics:
            fh.write(json.dumps(d, ensure_ascii=False, sort_keys=True) + "\n")
    _write_json(out / "manifest.json", manifest if manifest is not None else reports[0].manifest)


def cmd_evaluate(args) -> int:
    _require(args, "split", "outputs", "report")
    split_path, outputs_path = _existing(args.split), _existing(args.outputs)
    records = load_jsonl(split_path, strict=True).records
    outputs = _load_outputs(outputs_path)
    missing = sorted(r.id for r in records if r.id not in outputs)
    if missing:
        raise CliError("missing-record-alignment",
                       f"{len(missing)} record ids have no output: {', '.join(missing)}")
    if args.judge == "live":
        cfg = _endpoint(args)
        cfg.token()  # fail before any network call
        gateway = Gateway(cfg)
        judge, judge_name, judge_temp = LiveJudge(gateway), cfg.model_name, cfg.temperature
    elif args.judge == "mock":
        judge, judge_name, judge_temp = MockJudge(), "mock", 0.0
    else:
        raise CliError("usage", f"--judge must be live or mock, got {args.judge!r}")
    manifest = {
        "model": args.model, "mode": args.mode, "type": args.run_type,
        "judge": judge_name, "judge_temperature": judge_temp, "judge_repetitions": 1,
        "n_items": len(records),
        "split_sha256": _sha256(split_path), "outputs_sha256": _sha256(outputs_path),
        "template_checksums": template_checksums(),
    }
    items = make_items(records, outputs)
    report = evaluate(items, judge, manifest)
    diags = [d.to_dict(it.record_id) for it in items for d in it.diagnostics]
    write_report_dir([report], args.report, diags, manifest)
    print(to_text(TABLE2_COLUMNS, table2_rows([report])), end="")
    print(to_text(TABLE3_COLUMNS, table3_rows([report])), end="")
    return 0


def _report_from_dict(d: dict) -> CatsReport:
    m = d["metrics"]
    return CatsReport(
        model=d["model"], mode=d["mode"], run_type=d["type"], n_items=d["n_items"],
        f1_gr=m["f1_gr"], answer_correctness=m["answer_correctness"],
        grounded_citation=m["grounded_citation"], behavioral_adherence=m["behavioral_adherence"],
        doc_verdict_accuracy=m["doc_verdict_accuracy"], doc_verdict_support=m["doc_verdict_support"],
        abstain_count=m["abstain_count"], abstain_expected=m["abstain_expected"],
        conflict_prediction_accuracy=m["conflict_prediction_accuracy"],
        conflict_prediction_support=m["conflict_prediction_support"],
        per_type=d["per_type"], exclusions=d["exclusions"], details=d["details"],
        manifest=d.get("manifest", {}))


def cmd_report(args) -> int:
    if not args.reports:
        raise CliError("usage", "give one or more report directories")
    reports = []
    for r in args.reports:
        path = Path(r) / "report.json" if Path(r).is_dir() else Path(r)
        data = json.loads(_existing(str(path)).read_text(encoding="utf-8"))
        reports.extend(_report_from_dict(d) for d in (data if isinstance(data, list) else [data]))
    table2, table3 = table2_rows(reports), table3_rows(reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table2.csv").write_text(to_csv(TABLE2_COLUMNS, table2), encoding="utf-8")
        (out / "table3.csv").write_text(to_csv(TABLE3_COLUMNS, table3), encoding="utf-8")
        (out / "table2.txt").write_text(to_text(TABLE2_COLUMNS, table2), encoding="utf-8")
        (out / "table3.txt").write_text(to_text(TABLE3_COLUMNS, table3), encoding="utf-8")
    print(to_text(TABLE2_COLUMNS, table2), end="")
    print(to_text(TABLE3_COLUMNS, table3), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conflict_rag", allow_abbrev=False)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--config", help="JSON file of option values")
        p.set_defaults(func=func)
        return p

    p = add("normalize", cmd_normalize, "raw records to normalized JSONL")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true")

    p = add("annotate", cmd_annotate, "three-stage annotation against a live endpoint")
    p.add_argument("--in", dest="input")
    p.add_argument("--out-dir")
    p.add_argument("--state-dir")
    p.add_argument("--endpoint-config")
    p.add_argument("--per-doc", action="store_true", help="one stage-1 call per document")
    p.add_argument("--repair-budget", type=int)
    p.add_argument("--concurrency", type=int)

    p = add("split", cmd_split, "stratified train/val/test split")
    p.add_argument("--in", dest="input")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--fractions")

    p = add("prompts", cmd_prompts, "render prompts to JSONL for inspection")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--mode")
    p.add_argument("--exclude-notes", action="store_true")

    p = add("run-inference", cmd_run_inference, "collect completions for a split")
    p.add_argument("--split")
    p.add_argument("--mode", choices=("oracle", "e2e"))
    p.add_argument("--endpoint-config")
    p.add_argument("--canned", help="JSONL of canned completions served as a mock endpoint")
    p.add_argument("--include-notes", action="store_true")
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "score completions with the CATS metrics")
    p.add_argument("--split")
    p.add_argument("--outputs")
    p.add_argument("--mode", choices=("oracle", "e2e"))
    p.add_argument("--judge", choices=("live", "mock"))
    p.add_argument("--endpoint-config", help="judge endpoint for --judge live")
    p.add_argument("--model", help="model name shown in the tables")
    p.add_argument("--type", dest="run_type", help="row type shown in the tables, e.g. SFT")
    p.add_argument("--report")

    p = add("report", cmd_report, "combine report directories into paired tables")
    p.add_argument("--reports", nargs="+")
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(_resolve(args))
    except CliError as exc:
        err = {"error": exc.code, "message": str(exc)}
    except (GatewayError, InconsistentItemSets, IdCollision, SchemaError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(err, ensure_ascii=False), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
