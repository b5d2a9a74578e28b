"""Chat-completion client with retries and a response cache, plus the judges built on it.

The wire format is the common ``/chat/completions`` shape: a JSON body with
``model``, ``messages`` and ``temperature``; the reply text is read from
``choices[0].message.content``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from .contract import strip_citations
from .prompts import PromptBundle, build_judge_prompt
from .schema import ConflictType, EntailmentRelation, JudgeVerdict, normalize_ws

log = logging.getLogger(__name__)

DEFAULT_JUDGE_MODEL = "gpt-4o"
DEFAULT_ANNOTATOR_MODEL = "gpt-5-chat-latest"


class GatewayError(RuntimeError):
    pass


class AuthError(GatewayError):
    pass


class MissingCredentials(AuthError):
    pass


class ExhaustedRetries(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class RequestRejected(GatewayError):
    """Non-retryable 4xx other than auth failures."""


class JudgeParseError(ValueError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = DEFAULT_JUDGE_MODEL
    auth_token_source: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 5
    temperature: float = 0.0
    max_concurrency: int = 4
    cache_dir: str | None = None
    requests_per_second: float | None = None
    backoff_base: float = 1.0
    backoff_max: float = 30.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must lie in [0, 1]")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be a positive integer")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EndpointConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown endpoint settings {sorted(unknown)}")
        return cls(**dict(data))

    @classmethod
    def from_file(cls, path: str | Path) -> "EndpointConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def token(self) -> str:
        value = os.environ.get(self.auth_token_source, "")
        if not value:
            raise MissingCredentials(
                f"environment variable {self.auth_token_source} is not set")
        return value


@dataclass
class CallRecord:
    prompt_hash: str
    mode: str
    latency: float
    retries: int
    status: str
    cache_hit: bool
    backoffs: list[float] = field(default_factory=list)
    parse_status: str | None = None


class RateLimiter:
    """Spaces request starts at least ``1/rate`` seconds apart across threads."""

    def __init__(self, rate: float | None, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 1.0 / rate if rate else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock, self._sleep = clock, sleep

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


def cache_key(bundle: PromptBundle, model_name: str, temperature: float) -> str:
    payload = json.dumps({"system": bundle.system, "user": bundle.user,
                          "model": model_name, "temperature": temperature},
                         ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class Gateway:
    """Synchronous chat-completion client.

    ``map`` fans requests out over a thread pool; a semaphore caps in-flight
    requests at ``max_concurrency`` even when several maps run at once.
    """

    def __init__(self, cfg: EndpointConfig, *, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 rng: random.Random | None = None):
        self.cfg = cfg
        self._client = client
        self._owns_client = client is None
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._sem = threading.BoundedSemaphore(cfg.max_concurrency)
        self._limiter = RateLimiter(cfg.requests_per_second, sleep=sleep)
        self._log_lock = threading.Lock()
        self.call_log: list[CallRecord] = []
        self.network_calls = 0

    # -- cache ---------------------------------------------------------------

    def _cache_path(self, key: str) -> Path | None:
        return Path(self.cfg.cache_dir) / f"{key}.json" if self.cfg.cache_dir else None

    def _cache_get(self, key: str) -> str | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["response"]

    def _cache_put(self, key: str, bundle: PromptBundle, text: str) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {"request": {"model": self.cfg.model_name, "temperature": self.cfg.temperature,
                             "system": bundle.system, "user": bundle.user},
                 "response": text}
        tmp = path.with_suffix(f".{threading.get_ident()}.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, ensure_ascii=False, indent=1, sort_keys=True)
        os.replace(tmp, path)

    # -- transport -----------------------------------------------------------

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self.cfg.timeout)
        return self._client

    def close(self) -> None:
        if self._owns_client and self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _record(self, rec: CallRecord) -> CallRecord:
        with self._log_lock:
            self.call_log.append(rec)
        return rec

    def _backoff(self, attempt: int, hint: float | None) -> float:
        if hint is not None:
            return min(hint, self.cfg.backoff_max)
        ceiling = min(self.cfg.backoff_max, self.cfg.backoff_base * 2 ** attempt)
        return ceiling * (0.5 + 0.5 * self._rng.random())

    def chat_complete(self, bundle: PromptBundle) -> str:
        key = cache_key(bundle, self.cfg.model_name, self.cfg.temperature)
        t0 = time.monotonic()
        cached = self._cache_get(key)
        if cached is not None:
            self._record(CallRecord(key, bundle.mode, 0.0, 0, "ok", True))
            return cached

        token = self.cfg.token()
        body = {
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "system", "content": bundle.system},
                         {"role": "user", "content": bundle.user}],
        }
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {token}"}
        backoffs: list[float] = []
        last_error = ""
        with self._sem:
            for attempt in range(self.cfg.max_retries + 1):
                self._limiter.wait()
                hint = None
                try:
                    self.network_calls += 1
                    resp = self._http().post(url, json=body, headers=headers,
                                             timeout=self.cfg.timeout)
                except httpx.TimeoutException as exc:
                    last_error = f"timeout: {exc}"
                except httpx.TransportError as exc:
                    last_error = f"transport: {exc}"
                else:
                    if resp.status_code in (401, 403):
                        self._record(CallRecord(key, bundle.mode, time.monotonic() - t0,
                                                attempt, f"http {resp.status_code}", False,
                                                backoffs))
                        raise AuthError(f"endpoint refused credentials (HTTP {resp.status_code})")
                    if resp.status_code == 429 or resp.status_code >= 500:
                        last_error = f"http {resp.status_code}"
                        hint = _retry_after(resp)
                    elif resp.status_code >= 400:
                        self._record(CallRecord(key, bundle.mode, time.monotonic() - t0,
                                                attempt, f"http {resp.status_code}", False,
                                                backoffs))
                        raise RequestRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    else:
                        text = _reply_text(resp)
                        self._record(CallRecord(key, bundle.mode, time.monotonic() - t0,
                                                attempt, "ok", False, backoffs))
                        self._cache_put(key, bundle, text)
                        return text
                if attempt == self.cfg.max_retries:
                    break
                delay = self._backoff(attempt, hint)
                backoffs.append(delay)
                log.info("retrying %s after %s (%.2fs)", key[:12], last_error, delay)
                self._sleep(delay)
        self._record(CallRecord(key, bundle.mode, time.monotonic() - t0,
                                self.cfg.max_retries, last_error, False, backoffs))
        raise ExhaustedRetries(f"gave up after {self.cfg.max_retries} retries: {last_error}")

    __call__ = chat_complete

    def map(self, bundles: Sequence[PromptBundle], *,
            return_exceptions: bool = False) -> list[str | BaseException]:
        """Complete every bundle; results come back in input order."""
        def one(b: PromptBundle):
            try:
                return self.chat_complete(b)
            except Exception as exc:
                if return_exceptions:
                    return exc
                raise
        with ThreadPoolExecutor(max_workers=self.cfg.max_concurrency) as pool:
            return list(pool.map(one, bundles))


def _reply_text(resp: httpx.Response) -> str:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"unexpected response body: {resp.text[:200]!r}") from exc
    if not isinstance(content, str):
        raise MalformedResponse("message content is not a string")
    return content


# ---------------------------------------------------------------------------
# judge reply parsing


def _balanced_end(text: str, start: int) -> int | None:
    depth, i, n = 0, start, len(text)
    in_str = False
    while i < n:
        c = text[i]
        if in_str:
            if c == "\\":
                i += 1
            elif c == '"':
                in_str = False
        elif c == '"':
            in_str = True
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return None


def extract_json_object(text: str) -> dict | None:
    """First balanced ``{...}`` in ``text`` that decodes to a JSON object."""
    i = text.find("{")
    while i != -1:
        end = _balanced_end(text, i)
        if end is not None:
            try:
                obj = json.loads(text[i:end])
            except json.JSONDecodeError:
                pass
            else:
                if isinstance(obj, dict):
                    return obj
        i = text.find("{", i + 1)
    return None


def parse_verdict_reply(text: str) -> JudgeVerdict:
    obj = extract_json_object(text)
    if obj is None or not isinstance(obj.get("adherent"), bool):
        raise JudgeParseError(f"no JSON object with a boolean 'adherent' in {text[:120]!r}")
    rationale = obj.get("rationale")
    if not isinstance(rationale, str):
        return JudgeVerdict(obj["adherent"], "", rationale_missing=True)
    return JudgeVerdict(obj["adherent"], rationale)


def parse_entailment_reply(text: str) -> EntailmentRelation:
    obj = extract_json_object(text)
    relation = obj.get("relation") if obj else None
    if relation not in {r.value for r in EntailmentRelation}:
        raise JudgeParseError(f"no valid 'relation' in {text[:120]!r}")
    return EntailmentRelation(relation)


# ---------------------------------------------------------------------------
# judges

_WORD_RE = re.compile(r"\w+")

BEHAVIOR_CUES = {
    ConflictType.NO_CONFLICT: ("agree", "consistent", "consistently", "confirm"),
    ConflictType.COMPLEMENTARY: ("while", "additionally", "together", "also", "complement"),
    ConflictType.CONFLICTING_OPINIONS: ("however", "others", "some sources", "disagree", "debate"),
    ConflictType.OUTDATED: ("older", "outdated", "more recent", "newer", "latest", "as of"),
    ConflictType.MISINFORMATION: ("incorrect", "false", "misinformation", "inaccurate", "wrongly"),
}


def normalize_text(text: str) -> str:
    """Lower case, citations removed, punctuation folded to single spaces."""
    return " ".join(_WORD_RE.findall(strip_citations(text).lower()))


def _contains(haystack: str, needle: str) -> bool:
    h, n = normalize_text(haystack), normalize_text(needle)
    return bool(n) and f" {n} " in f" {h} "


class MockJudge:
    """Offline judge with fixed, hand-checkable rules.

    entailment: tokens are lower-cased ``\\w+`` runs. ``entails`` when at least
      80% of the distinct hypothesis tokens occur in the premise; otherwise
      ``contradicts`` when the premise contains ``"not "`` followed by the
      first hypothesis token; otherwise ``neutral``. An empty hypothesis is
      neutral.
    recall: adherent when the normalized gold answer occurs in the normalized
      candidate as a whole-word substring.
    behavior: adherent when the normalized answer contains one of the cue
      phrases listed for the conflict type in ``BEHAVIOR_CUES``.
    """

    name = "mock"

    def entailment(self, premise: str, hypothesis: str) -> EntailmentRelation:
        hyp = _WORD_RE.findall(strip_citations(hypothesis).lower())
        if not hyp:
            return EntailmentRelation.NEUTRAL
        prem_text = premise.lower()
        prem = set(_WORD_RE.findall(prem_text))
        distinct = set(hyp)
        covered = sum(1 for t in distinct if t in prem)
        if covered * 5 >= len(distinct) * 4:
            return EntailmentRelation.ENTAILS
        if re.search(r"\bnot " + re.escape(hyp[0]) + r"\b", prem_text):
            return EntailmentRelation.CONTRADICTS
        return EntailmentRelation.NEUTRAL

    def answer_match(self, gold: str, candidate: str) -> JudgeVerdict:
        if not candidate or not candidate.strip():
            return JudgeVerdict(False, "empty")
        if _contains(candidate, gold):
            return JudgeVerdict(True, "gold answer found in candidate")
        return JudgeVerdict(False, "gold answer not found in candidate")

    def behavior(self, query: str, answer: str, conflict_type: ConflictType | str) -> JudgeVerdict:
        label = ConflictType.from_label(str(conflict_type))
        if not answer or not answer.strip():
            return JudgeVerdict(False, "empty")
        for cue in BEHAVIOR_CUES[label]:
            if _contains(answer, cue):
                return JudgeVerdict(True, f"cue {cue!r} present")
        return JudgeVerdict(False, "no cue for the expected behavior")


def mock_judge(kind: str, inputs: Mapping[str, Any]) -> JudgeVerdict | EntailmentRelation:
    judge = MockJudge()
    if kind == "entailment":
        return judge.entailment(inputs.get("premise", ""), inputs.get("hypothesis", ""))
    if kind == "recall":
        return judge.answer_match(inputs.get("gold", ""), inputs.get("candidate", ""))
    if kind == "behavior":
        return judge.behavior(inputs.get("query", ""), inputs.get("answer", ""),
                              inputs["conflict_type"])
    raise ValueError(f"unknown judge kind {kind!r}")


class LiveJudge:
    """Judge backed by a chat-completion endpoint.

    Replies are memoized per prompt so that a ``prefetch`` pass can fan calls
    out concurrently before the single-threaded metric code asks for them.
    """

    name = "live"

    def __init__(self, gateway: Gateway):
        self.gateway = gateway
        self._replies: dict[str, str] = {}
        self._lock = threading.Lock()
        self.parse_failures = 0

    def _reply(self, bundle: PromptBundle) -> str:
        key = bundle.digest()
        with self._lock:
            if key in self._replies:
                return self._replies[key]
        text = self.gateway.chat_complete(bundle)
        with self._lock:
            self._replies[key] = text
        return text

    def prefetch(self, requests: Iterable[tuple[str, Mapping[str, Any]]]) -> None:
        bundles = {}
        for kind, inputs in requests:
            b = build_judge_prompt(kind, inputs)
            bundles.setdefault(b.digest(), b)
        todo = [b for k, b in bundles.items() if k not in self._replies]
        for b, text in zip(todo, self.gateway.map(todo, return_exceptions=True)):
            if isinstance(text, str):
                with self._lock:
                    self._replies[b.digest()] = text

    def _parsed(self, bundle: PromptBundle, parse):
        text = self._reply(bundle)
        try:
            return parse(text)
        except JudgeParseError:
            self.parse_failures += 1
            log.warning("judge parse failure (%s): %r", bundle.mode, text[:120])
            raise

    def entailment(self, premise: str, hypothesis: str) -> EntailmentRelation:
        if not hypothesis.strip():
            return EntailmentRelation.NEUTRAL
        b = build_judge_prompt("entailment", {"premise": premise, "hypothesis": hypothesis})
        return self._parsed(b, parse_entailment_reply)

    def answer_match(self, gold: str, candidate: str) -> JudgeVerdict:
        if not candidate or not candidate.strip():
            return JudgeVerdict(False, "empty")
        b = build_judge_prompt("recall", {"gold": gold, "candidate": candidate})
        return self._parsed(b, parse_verdict_reply)

    def behavior(self, query: str, answer: str, conflict_type: ConflictType | str) -> JudgeVerdict:
        if not answer or not answer.strip():
            return JudgeVerdict(False, "empty")
        b = build_judge_prompt("behavior", {"query": query, "answer": answer,
                                            "conflict_type": str(conflict_type)})
        return self._parsed(b, parse_verdict_reply)


def judge_behavior(query: str, answer: str, conflict_type, judge) -> JudgeVerdict:
    return judge.behavior(query, answer, conflict_type)


def judge_entailment(premise: str, hypothesis: str, judge) -> EntailmentRelation:
    return judge.entailment(premise, hypothesis)


def judge_answer_match(gold: str, candidate: str, judge) -> JudgeVerdict:
    if not gold or not gold.strip():
        raise ValueError("gold answer must be nonempty")
    return judge.answer_match(gold, candidate)


class ScriptedCompleter:
    """Offline stand-in for a Gateway that answers from a function or a queue.

    ``script`` is either a callable ``bundle -> text`` or a mapping from
    record id to a list of replies consumed in order.
    """

    def __init__(self, script: Callable[[PromptBundle], str] | Mapping[str, list[str]]):
        self._script = script
        self._queues = ({k: list(v) for k, v in script.items()}
                        if isinstance(script, Mapping) else None)
        self.calls: list[PromptBundle] = []
        self._lock = threading.Lock()

    def chat_complete(self, bundle: PromptBundle) -> str:
        with self._lock:
            self.calls.append(bundle)
            if self._queues is None:
                return self._script(bundle)
            queue = self._queues.get(bundle.record_id)
            if not queue:
                raise ExhaustedRetries(f"no scripted reply left for {bundle.record_id}")
            return queue.pop(0)

    __call__ = chat_complete
