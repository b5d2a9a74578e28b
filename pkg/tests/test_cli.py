import json
import subprocess
import sys

import pytest

from conflict_rag import cli
from conflict_rag.dataset import read_jsonl, write_jsonl
from conflict_rag.gateway import ScriptedCompleter
from conflict_rag.synthetic import reference_annotator, strip_annotations

from conftest import GOLDEN

REPORT_FILES = ("report.json", "table2.csv", "table3.csv", "table2.txt", "table3.txt",
                "diagnostics.jsonl", "manifest.json")


def run(*argv):
    return cli.main([str(a) for a in argv])


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ("CONFLICT_RAG_SEED", "CONFLICT_RAG_FRACTIONS", "OPENAI_API_KEY"):
        monkeypatch.delenv(var, raising=False)


# -- evaluate / report -------------------------------------------------------------

@pytest.mark.parametrize("kind", ["gold", "mixed"])
def test_evaluate_matches_golden(tmp_path, kind):
    out = tmp_path / kind
    assert run("evaluate", "--split", GOLDEN / "test.jsonl",
               "--outputs", GOLDEN / f"canned_{kind}.jsonl", "--mode", "oracle",
               "--judge", "mock", "--model", "synthetic", "--type", kind, "--report", out) == 0
    for name in REPORT_FILES:
        assert (out / name).read_bytes() == (GOLDEN / f"report_{kind}" / name).read_bytes(), name


def test_gold_run_values():
    report = json.loads((GOLDEN / "report_gold" / "report.json").read_text(encoding="utf-8"))
    m = report["metrics"]
    assert m["f1_gr"] == 1.0
    assert m["doc_verdict_accuracy"] == 1.0 and m["doc_verdict_support"] == 168
    assert (m["abstain_count"], m["abstain_expected"]) == (8, 8)


def test_missing_outputs_are_listed(tmp_path, capsys):
    rows = (GOLDEN / "canned_gold.jsonl").read_text(encoding="utf-8").splitlines()
    partial = tmp_path / "partial.jsonl"
    partial.write_text("\n".join(rows[2:]) + "\n", encoding="utf-8")
    code = run("evaluate", "--split", GOLDEN / "test.jsonl", "--outputs", partial,
               "--mode", "oracle", "--judge", "mock", "--report", tmp_path / "r")
    assert code == 2
    err = _err(capsys)
    dropped = [json.loads(r)["record_id"] for r in rows[:2]]
    assert err["error"] == "missing-record-alignment"
    assert all(rid in err["message"] for rid in dropped)


def test_live_judge_without_key_fails_fast(tmp_path, capsys):
    code = run("evaluate", "--split", GOLDEN / "test.jsonl",
               "--outputs", GOLDEN / "canned_gold.jsonl", "--mode", "oracle",
               "--judge", "live", "--report", tmp_path / "r")
    assert code == 2
    assert "OPENAI_API_KEY" in _err(capsys)["message"]
    assert not (tmp_path / "r").exists()


def test_report_merges_runs(tmp_path, capsys):
    assert run("report", "--reports", GOLDEN / "report_gold", GOLDEN / "report_mixed",
               "--out", tmp_path / "t") == 0
    table2 = (tmp_path / "t" / "table2.csv").read_text(encoding="utf-8").splitlines()
    assert len(table2) == 3
    assert table2[1].split(",")[2] == "gold" and table2[2].split(",")[2] == "mixed"
    assert (tmp_path / "t" / "table3.txt").read_text(encoding="utf-8") in capsys.readouterr().out


# -- run-inference -----------------------------------------------------------------

def test_run_inference_canned_then_evaluate(tmp_path):
    out = tmp_path / "outputs.jsonl"
    assert run("run-inference", "--split", GOLDEN / "test.jsonl", "--mode", "oracle",
               "--canned", GOLDEN / "canned_mixed.jsonl", "--out", out) == 0
    manifest = json.loads((tmp_path / "outputs.manifest.json").read_text(encoding="utf-8"))
    assert manifest["mode"] == "oracle" and "oracle_user" in manifest["template_checksums"]
    assert run("evaluate", "--split", GOLDEN / "test.jsonl", "--outputs", out, "--mode", "oracle",
               "--judge", "mock", "--model", "synthetic", "--type", "mixed",
               "--report", tmp_path / "r") == 0
    got = json.loads((tmp_path / "r" / "report.json").read_text(encoding="utf-8"))
    want = json.loads((GOLDEN / "report_mixed" / "report.json").read_text(encoding="utf-8"))
    assert got["metrics"] == want["metrics"]


def test_run_inference_resumes(tmp_path, capsys):
    records = read_jsonl(GOLDEN / "test.jsonl")
    split = tmp_path / "split.jsonl"
    write_jsonl(split, records[:5])
    out = tmp_path / "o.jsonl"
    canned = GOLDEN / "canned_gold.jsonl"
    write_jsonl(tmp_path / "first.jsonl", records[:2])
    assert run("run-inference", "--split", tmp_path / "first.jsonl", "--mode", "e2e",
               "--canned", canned, "--out", out) == 0
    capsys.readouterr()
    assert run("run-inference", "--split", split, "--mode", "e2e",
               "--canned", canned, "--out", out) == 0
    assert capsys.readouterr().out.startswith("3 new completions")
    ids = [json.loads(x)["record_id"] for x in out.read_text(encoding="utf-8").splitlines()]
    assert ids == [r.id for r in records[:5]]


def test_run_inference_reports_gateway_errors(tmp_path, capsys):
    canned = tmp_path / "c.jsonl"
    first = (GOLDEN / "canned_gold.jsonl").read_text(encoding="utf-8").splitlines()[0]
    canned.write_text(first + "\n", encoding="utf-8")
    records = read_jsonl(GOLDEN / "test.jsonl")[:2]
    write_jsonl(tmp_path / "s.jsonl", records)
    code = run("run-inference", "--split", tmp_path / "s.jsonl", "--mode", "oracle",
               "--canned", canned, "--out", tmp_path / "o.jsonl")
    assert code == 2
    assert json.loads(capsys.readouterr().err.strip())["record_id"] == records[1].id


# -- normalize / split / prompts ---------------------------------------------------

def test_normalize_strict_names_the_line(tmp_path, capsys, corpus):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(raw, corpus[:3])
    with open(raw, "a", encoding="utf-8") as fh:
        fh.write("{not json\n")
    code = run("normalize", "--in", raw, "--out", tmp_path / "n.jsonl", "--strict")
    assert code == 2
    assert "raw.jsonl:4" in _err(capsys)["message"]


def test_normalize_lenient_skips_bad_lines(tmp_path, capsys, corpus):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(raw, corpus[:3])
    with open(raw, "a", encoding="utf-8") as fh:
        fh.write("{not json\n")
    assert run("normalize", "--in", raw, "--out", tmp_path / "n.jsonl") == 0
    assert "normalized 3 records; 1 malformed lines skipped" in capsys.readouterr().out
    assert read_jsonl(tmp_path / "n.jsonl") == corpus[:3]


def test_missing_input_exit_code(tmp_path, capsys):
    assert run("normalize", "--in", tmp_path / "nope.jsonl", "--out", tmp_path / "o") == 2
    assert _err(capsys)["error"]


def test_split_precedence(tmp_path, monkeypatch, corpus):
    data = tmp_path / "c.jsonl"
    write_jsonl(data, corpus)
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"seed": 7}), encoding="utf-8")
    monkeypatch.setenv("CONFLICT_RAG_SEED", "9")

    def seed_of(*extra):
        out = tmp_path / "out"
        assert run("split", "--in", data, "--out-dir", out, *extra) == 0
        return json.loads((out / "split_manifest.json").read_text(encoding="utf-8"))["seed"]

    assert seed_of() == 9
    assert seed_of("--config", config) == 7
    assert seed_of("--config", config, "--seed", 11) == 11


def test_split_bad_fractions(tmp_path, corpus, capsys):
    data = tmp_path / "c.jsonl"
    write_jsonl(data, corpus[:20])
    assert run("split", "--in", data, "--out-dir", tmp_path / "o", "--fractions", "0.5,0.5") == 2


def test_prompts_export(tmp_path):
    out = tmp_path / "p.jsonl"
    assert run("prompts", "--in", GOLDEN / "test.jsonl", "--out", out, "--mode", "stage3") == 0
    rows = [json.loads(x) for x in out.read_text(encoding="utf-8").splitlines()]
    assert len(rows) == 54 and {r["mode"] for r in rows} == {"stage3"}
    assert run("prompts", "--in", GOLDEN / "test.jsonl", "--out", out, "--mode", "poetry") == 2


# -- annotate ----------------------------------------------------------------------

class _FakeGateway(ScriptedCompleter):
    def __init__(self, cfg):
        super().__init__(reference_annotator(_FakeGateway.records))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


def test_annotate_with_scripted_gateway(tmp_path, monkeypatch, corpus):
    _FakeGateway.records = corpus
    monkeypatch.setattr(cli, "Gateway", _FakeGateway)
    monkeypatch.setenv("OPENAI_API_KEY", "sk-unused")
    raw = tmp_path / "raw.jsonl"
    write_jsonl(raw, [strip_annotations(r) for r in corpus[:4]])
    assert run("annotate", "--in", raw, "--out-dir", tmp_path / "a", "--per-doc") == 0
    assert read_jsonl(tmp_path / "a" / "annotated.jsonl") == corpus[:4]


def test_annotate_needs_credentials(tmp_path, corpus, capsys):
    raw = tmp_path / "raw.jsonl"
    write_jsonl(raw, corpus[:1])
    assert run("annotate", "--in", raw, "--out-dir", tmp_path / "a") == 2
    assert _err(capsys)["error"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "conflict_rag", "--help"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    for sub in ("normalize", "annotate", "split", "prompts", "run-inference", "evaluate", "report"):
        assert sub in proc.stdout
