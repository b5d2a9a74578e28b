import json
import threading
import time

import httpx
import pytest

from conflict_rag.gateway import (
    AuthError,
    EndpointConfig,
    ExhaustedRetries,
    Gateway,
    JudgeParseError,
    LiveJudge,
    MalformedResponse,
    MissingCredentials,
    MockJudge,
    RateLimiter,
    RequestRejected,
    ScriptedCompleter,
    cache_key,
    extract_json_object,
    mock_judge,
    parse_entailment_reply,
    parse_verdict_reply,
)
from conflict_rag.prompts import PromptBundle
from conflict_rag.schema import ConflictType, EntailmentRelation

TOKEN_VAR = "CONFLICT_RAG_TEST_TOKEN"


def _ok(text="hello"):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def _gateway(handler, tmp_path=None, **overrides):
    cfg = EndpointConfig(base_url="https://judge.test/v1", auth_token_source=TOKEN_VAR,
                         cache_dir=str(tmp_path / "cache") if tmp_path else None, **overrides)
    sleeps = []
    gw = Gateway(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)),
                 sleep=sleeps.append)
    return gw, sleeps


@pytest.fixture(autouse=True)
def token(monkeypatch):
    monkeypatch.setenv(TOKEN_VAR, "sk-test")


BUNDLE = PromptBundle("system text", "user text", "judge_recall", record_id="r1")


# -- transport ---------------------------------------------------------------

def test_request_shape():
    seen = []

    def handler(req):
        seen.append(req)
        return _ok()

    gw, _ = _gateway(handler, temperature=0.0, model_name="m1")
    assert gw.chat_complete(BUNDLE) == "hello"
    req = seen[0]
    assert req.url == "https://judge.test/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer sk-test"
    body = json.loads(req.content)
    assert body == {"model": "m1", "temperature": 0.0,
                    "messages": [{"role": "system", "content": "system text"},
                                 {"role": "user", "content": "user text"}]}


def test_retries_after_rate_limit():
    replies = iter([httpx.Response(429), httpx.Response(429, headers={"retry-after": "2"}), _ok()])
    gw, sleeps = _gateway(lambda req: next(replies))
    assert gw.chat_complete(BUNDLE) == "hello"
    assert gw.network_calls == 3
    rec = gw.call_log[-1]
    assert rec.retries == 2 and rec.status == "ok"
    assert len(rec.backoffs) == 2 and rec.backoffs[1] == 2.0
    assert 0.5 <= rec.backoffs[0] <= 1.0  # base 1.0 with jitter in [0.5, 1]
    assert sleeps == rec.backoffs


def test_server_errors_and_timeouts_are_retried():
    state = {"n": 0}

    def handler(req):
        state["n"] += 1
        if state["n"] == 1:
            raise httpx.ReadTimeout("slow", request=req)
        if state["n"] == 2:
            return httpx.Response(503)
        return _ok("late")

    gw, _ = _gateway(handler)
    assert gw.chat_complete(BUNDLE) == "late"


def test_exhausted_retries():
    gw, sleeps = _gateway(lambda req: httpx.Response(500), max_retries=2)
    with pytest.raises(ExhaustedRetries):
        gw.chat_complete(BUNDLE)
    assert gw.network_calls == 3 and len(sleeps) == 2


def test_backoff_is_capped():
    gw, sleeps = _gateway(lambda req: httpx.Response(500), max_retries=6,
                          backoff_base=1.0, backoff_max=4.0)
    with pytest.raises(ExhaustedRetries):
        gw.chat_complete(BUNDLE)
    assert max(sleeps) <= 4.0


@pytest.mark.parametrize("status", [401, 403])
def test_auth_failure_is_not_retried(status):
    gw, sleeps = _gateway(lambda req: httpx.Response(status))
    with pytest.raises(AuthError):
        gw.chat_complete(BUNDLE)
    assert gw.network_calls == 1 and sleeps == []


def test_client_error_is_rejected():
    gw, _ = _gateway(lambda req: httpx.Response(400, text="bad model"))
    with pytest.raises(RequestRejected):
        gw.chat_complete(BUNDLE)
    assert gw.network_calls == 1


def test_malformed_body():
    gw, _ = _gateway(lambda req: httpx.Response(200, json={"choices": []}))
    with pytest.raises(MalformedResponse):
        gw.chat_complete(BUNDLE)


def test_missing_credentials(monkeypatch):
    monkeypatch.delenv(TOKEN_VAR)
    gw, _ = _gateway(lambda req: pytest.fail("network must not be touched"))
    with pytest.raises(MissingCredentials):
        gw.chat_complete(BUNDLE)
    assert gw.network_calls == 0


# -- cache -------------------------------------------------------------------

def test_cache_hit_makes_no_call(tmp_path):
    gw, _ = _gateway(lambda req: _ok("cached reply"), tmp_path)
    assert gw.chat_complete(BUNDLE) == "cached reply"
    gw2, _ = _gateway(lambda req: pytest.fail("should be served from cache"), tmp_path)
    assert gw2.chat_complete(BUNDLE) == "cached reply"
    assert gw2.network_calls == 0 and gw2.call_log[0].cache_hit


def test_cache_entry_keeps_request_and_response(tmp_path):
    gw, _ = _gateway(lambda req: _ok("r"), tmp_path)
    gw.chat_complete(BUNDLE)
    key = cache_key(BUNDLE, gw.cfg.model_name, gw.cfg.temperature)
    entry = json.loads((tmp_path / "cache" / f"{key}.json").read_text(encoding="utf-8"))
    assert entry["response"] == "r"
    assert entry["request"]["user"] == "user text"


def test_cache_key_depends_on_model_and_temperature():
    a = cache_key(BUNDLE, "m", 0.0)
    assert a == cache_key(BUNDLE, "m", 0.0)
    assert a != cache_key(BUNDLE, "m2", 0.0)
    assert a != cache_key(BUNDLE, "m", 0.5)


def test_cache_survives_missing_credentials(tmp_path, monkeypatch):
    gw, _ = _gateway(lambda req: _ok("kept"), tmp_path)
    gw.chat_complete(BUNDLE)
    monkeypatch.delenv(TOKEN_VAR)
    gw2, _ = _gateway(lambda req: pytest.fail("no network"), tmp_path)
    assert gw2.chat_complete(BUNDLE) == "kept"


# -- concurrency -------------------------------------------------------------

def test_in_flight_never_exceeds_limit():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(req):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.01)
        with lock:
            state["now"] -= 1
        return _ok(json.loads(req.content)["messages"][1]["content"])

    gw, _ = _gateway(handler, max_concurrency=3)
    bundles = [PromptBundle("s", f"u{i}", "judge_recall") for i in range(24)]
    # two maps at once share the same semaphore
    results = {}
    threads = [threading.Thread(target=lambda k=k: results.__setitem__(k, gw.map(bundles)))
               for k in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 3
    assert results[0] == [f"u{i}" for i in range(24)]


def test_map_return_exceptions():
    def handler(req):
        user = json.loads(req.content)["messages"][1]["content"]
        return httpx.Response(400) if user == "bad" else _ok(user)

    gw, _ = _gateway(handler)
    out = gw.map([PromptBundle("s", "good", "judge_recall"), PromptBundle("s", "bad", "judge_recall")],
                 return_exceptions=True)
    assert out[0] == "good" and isinstance(out[1], RequestRejected)


def test_rate_limiter_spacing():
    t = {"now": 0.0}
    slept = []

    def sleep(d):
        slept.append(d)

    lim = RateLimiter(2.0, clock=lambda: t["now"], sleep=sleep)
    lim.wait()
    lim.wait()
    lim.wait()
    assert slept == [0.5, 1.0]
    RateLimiter(None, sleep=pytest.fail).wait()


@pytest.mark.parametrize("bad", [dict(max_retries=-1), dict(temperature=1.5),
                                 dict(max_concurrency=0), dict(timeout=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        EndpointConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        EndpointConfig.from_dict({"base_url": "x", "api_key": "oops"})


# -- reply parsing -----------------------------------------------------------

def test_json_inside_prose():
    text = 'Sure. Here is my verdict: {"adherent": true, "rationale": "ok {fine}"} Thanks.'
    v = parse_verdict_reply(text)
    assert v.adherent is True and v.rationale == "ok {fine}"


def test_first_valid_object_wins():
    assert extract_json_object('{broken {"a": 1} {"b": 2}') == {"a": 1}
    assert extract_json_object("no braces") is None


def test_plain_yes_is_unparseable():
    with pytest.raises(JudgeParseError):
        parse_verdict_reply("yes")


def test_missing_rationale_is_flagged():
    v = parse_verdict_reply('{"adherent": false}')
    assert v.adherent is False and v.rationale_missing


def test_entailment_relation_must_be_known():
    assert parse_entailment_reply('{"relation": "contradicts"}') is EntailmentRelation.CONTRADICTS
    with pytest.raises(JudgeParseError):
        parse_entailment_reply('{"relation":"maybe"}')


def test_live_judge_parses_and_counts_failures():
    replies = iter(['{"adherent": true, "rationale": "r"}', "not json"])
    judge = LiveJudge(ScriptedCompleter(lambda b: next(replies)))
    assert judge.answer_match("Rome", "It is Rome.").adherent
    with pytest.raises(JudgeParseError):
        judge.behavior("q", "a", ConflictType.NO_CONFLICT)
    assert judge.parse_failures == 1


def test_live_judge_short_circuits_empty_inputs():
    judge = LiveJudge(ScriptedCompleter(lambda b: pytest.fail("no call expected")))
    assert judge.answer_match("Rome", "  ").rationale == "empty"
    assert judge.behavior("q", "", "No conflict").adherent is False
    assert judge.entailment("premise", "") is EntailmentRelation.NEUTRAL


def test_live_judge_prefetch_memoizes():
    completer = ScriptedCompleter(lambda b: '{"relation": "entails"}')

    class Fan:
        def chat_complete(self, b):
            return completer.chat_complete(b)

        def map(self, bundles, return_exceptions=False):
            return [completer.chat_complete(b) for b in bundles]

    judge = LiveJudge(Fan())
    reqs = [("entailment", {"premise": "p", "hypothesis": "h"})] * 3
    judge.prefetch(reqs)
    assert judge.entailment("p", "h") is EntailmentRelation.ENTAILS
    assert len(completer.calls) == 1


# -- mock judge --------------------------------------------------------------

J = MockJudge()


def test_entailment_coverage_threshold():
    # 4 of 5 distinct tokens present: exactly 0.8
    assert J.entailment("alpha beta gamma delta", "alpha beta gamma delta omega") is EntailmentRelation.ENTAILS
    # 3 of 4: 0.75
    assert J.entailment("alpha beta gamma", "alpha beta gamma omega") is EntailmentRelation.NEUTRAL


def test_entailment_contradiction_and_empty():
    assert J.entailment("It is not open on Sundays.", "open daily year round") is EntailmentRelation.CONTRADICTS
    assert J.entailment("anything", "") is EntailmentRelation.NEUTRAL
    assert J.entailment("anything", "[d1]") is EntailmentRelation.NEUTRAL


def test_recall_examples():
    assert J.answer_match("Jerusalem", "The capital is Jerusalem [d2].").adherent
    assert not J.answer_match("Jerusalem", "The capital is Tel Aviv.").adherent
    assert not J.answer_match("Jerusalem", "").adherent
    assert not J.answer_match("Rome", "Romeo and Juliet").adherent
    assert J.answer_match("New York", "It is in new-york, NY.").adherent


def test_behavior_cues():
    assert J.behavior("q", "Sources agree it opened in 1990.", ConflictType.NO_CONFLICT).adherent
    assert J.behavior("q", "The newer report says 5.", "Conflict due to outdated information").adherent
    assert not J.behavior("q", "It is 5.", ConflictType.OUTDATED).adherent
    assert not J.behavior("q", "   ", ConflictType.OUTDATED).adherent


def test_mock_judge_dispatch():
    assert mock_judge("recall", {"gold": "x", "candidate": "x"}).adherent
    with pytest.raises(ValueError):
        mock_judge("style", {})


def test_scripted_completer_queue():
    sc = ScriptedCompleter({"r1": ["a", "b"]})
    assert sc(BUNDLE) == "a" and sc(BUNDLE) == "b"
    with pytest.raises(ExhaustedRetries):
        sc(BUNDLE)
