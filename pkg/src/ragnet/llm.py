"""Chat backends: an OpenAI-compatible wire client, a rule-scripted backend
for hermetic runs, and the answer judges used by the evaluation harness."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import httpx

from . import prompts
from .corpus import SENTENCE_BREAK_RE, words
from .errors import (
    BackendProtocolError,
    BackendUnavailable,
    ConfigError,
    JudgeParseError,
    ScriptError,
)

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")
BACKEND_KINDS = ("wire", "scripted", "extractive", "lexical")
THINK_RE = re.compile(r"<think>.*?</think>", re.DOTALL)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content and self.role != "assistant":
            raise ValueError(f"empty content is only allowed for assistant messages, not {self.role!r}")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "extractive"
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    temperature: float = 0.0
    max_reply_tokens: int = 2048
    script_path: Optional[str] = None
    timeout_s: float = 120.0
    retries: int = 3
    api_key_env: str = "RAG_LLM_API_KEY"
    max_in_flight: int = 8
    rate_limit_per_s: Optional[float] = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        wire = self.kind == "wire"
        if wire != (self.endpoint is not None and self.model_name is not None):
            raise ConfigError("endpoint and model_name must be set iff kind == 'wire'")
        if (self.kind == "scripted") != (self.script_path is not None):
            raise ConfigError("script_path must be set iff kind == 'scripted'")
        if self.temperature < 0 or self.max_reply_tokens <= 0 or self.timeout_s <= 0 or self.retries < 0:
            raise ConfigError("temperature, max_reply_tokens, timeout_s or retries out of range")


class LlmBackend(Protocol):
    def chat(self, messages: list[ChatMessage]) -> ChatMessage: ...


def check_messages(messages: list[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role not in ("system", "user"):
        raise ValueError("first message must be system or user")


def strip_think(text: str) -> str:
    return THINK_RE.sub("", text).strip()


# --------------------------------------------------------------- scripted

MATCH_KEYS = ("turn_index", "contains", "regex", "user_contains", "default")


@dataclass
class ScriptRule:
    match: dict
    reply: str = ""
    once: bool = False
    mode: str = "text"

    def __post_init__(self):
        unknown = set(self.match) - set(MATCH_KEYS)
        if unknown:
            raise ScriptError(f"unknown match keys {sorted(unknown)}")
        if not self.match:
            raise ScriptError("rule needs at least one match criterion")
        if self.mode not in ("text", "extractive"):
            raise ScriptError(f"unknown reply mode {self.mode!r}")
        if "regex" in self.match:
            self._regex = re.compile(self.match["regex"], re.DOTALL)

    @property
    def is_default(self) -> bool:
        return bool(self.match.get("default"))

    def matches(self, turn_index: int, last: str, first_user: str) -> bool:
        m = self.match
        if "turn_index" in m and m["turn_index"] != turn_index:
            return False
        if "contains" in m and m["contains"] not in last:
            return False
        if "regex" in m and not self._regex.search(last):
            return False
        if "user_contains" in m and m["user_contains"] not in first_user:
            return False
        return True

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptRule":
        return cls(match=dict(d.get("match", {})), reply=d.get("reply", ""), once=bool(d.get("once", False)),
                   mode=d.get("mode", "text"))


class ScriptedBackend:
    """Replays replies from ordered rules; the first matching rule wins.

    ``turn_index`` is the number of assistant messages already present,
    ``contains``/``regex`` look at the last message and ``user_contains`` at
    the first user message. The last rule must be ``{"default": true}``.
    A rule in ``extractive`` mode answers from the evidence in context
    instead of returning fixed text.
    """

    def __init__(self, rules: list[ScriptRule]):
        if not rules or not rules[-1].is_default:
            raise ScriptError("script must end with a terminal default rule")
        self.rules = list(rules)
        self._spent: set[int] = set()
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        rules = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rules.append(ScriptRule.from_dict(json.loads(line)))
            except (ValueError, TypeError, AttributeError) as exc:
                raise ScriptError(f"{path}:{lineno}: {exc}") from exc
        return cls(rules)

    def chat(self, messages: list[ChatMessage]) -> ChatMessage:
        check_messages(messages)
        turn_index = sum(1 for m in messages if m.role == "assistant")
        last = messages[-1].content
        first_user = next((m.content for m in messages if m.role == "user"), "")
        with self._lock:
            self.calls += 1
            for i, rule in enumerate(self.rules):
                if i in self._spent or not (rule.is_default or rule.matches(turn_index, last, first_user)):
                    continue
                if rule.once and not rule.is_default:
                    self._spent.add(i)
                break
        if rule.mode == "extractive":
            return ChatMessage("assistant", extractive_answer(messages))
        return ChatMessage("assistant", rule.reply)


class FunctionBackend:
    """Adapts ``fn(messages) -> str`` to the backend interface."""

    def __init__(self, fn: Callable[[list[ChatMessage]], str]):
        self.fn = fn
        self.calls = 0

    def chat(self, messages: list[ChatMessage]) -> ChatMessage:
        check_messages(messages)
        self.calls += 1
        return ChatMessage("assistant", self.fn(messages))


_STOP = frozenset(
    "a an the of in on at to for and or is are was were be been what which who whom when where why how "
    "do does did can could will would should i my me you your it its this that these those with by from "
    "as about into than then there their they them he she his her we our us if not no yes".split()
)


def _question_and_evidence(messages: list[ChatMessage]) -> tuple[str, list[str]]:
    question, evidence = "", []
    for m in messages:
        if m.role == "system":
            continue
        text = m.content
        if m.role == "user" and "Question:" in text:
            head, _, q = text.rpartition("Question:")
            question = q.strip()
            evidence.append(head)
        elif m.role == "user" and not question:
            question = text.strip()
        elif m.role == "tool":
            evidence.append(text)
    return question, evidence


def extractive_answer(messages: list[ChatMessage], n_sentences: int = 3) -> str:
    """Deterministic offline answerer: quote the evidence sentences that
    best match the question's content words, rarer words weighing more."""
    question, evidence = _question_and_evidence(messages)
    qwords = set(words(question)) - _STOP
    sentences = []
    for block in evidence:
        for line in block.splitlines():
            line = line.strip()
            if not line or line.startswith(("#", "!", "- ")):
                continue
            cuts = [0, *(m.end() for m in SENTENCE_BREAK_RE.finditer(line)), len(line)]
            sentences.extend(line[a:b].strip() for a, b in zip(cuts, cuts[1:]) if line[a:b].strip())
    bags = [set(words(s)) & qwords for s in sentences]
    df = Counter(w for bag in bags for w in bag)
    weight = {w: math.log(1 + len(sentences) / n) for w, n in df.items()}
    scored = []
    for pos, (s, bag) in enumerate(zip(sentences, bags)):
        if bag:
            scored.append((-round(math.fsum(weight[w] for w in bag), 9), pos, s))
    if not scored:
        return "The provided documents do not contain this information."
    scored.sort()
    # drop weak matches rather than padding the answer with them
    floor = 0.8 * -scored[0][0]
    best = sorted((t for t in scored[:n_sentences] if -t[0] >= floor), key=lambda t: t[1])
    seen, out = set(), []
    for _, _, s in best:
        if s not in seen:
            seen.add(s)
            out.append(s)
    return " ".join(out)


# ------------------------------------------------------------------- wire

_SEMAPHORES: dict[int, threading.BoundedSemaphore] = {}
_SEM_LOCK = threading.Lock()


def _global_semaphore(cap: int) -> threading.BoundedSemaphore:
    with _SEM_LOCK:
        if cap not in _SEMAPHORES:
            _SEMAPHORES[cap] = threading.BoundedSemaphore(cap)
        return _SEMAPHORES[cap]


class WireBackend:
    """OpenAI-compatible ``POST {endpoint}/chat/completions`` client.

    Transport failures, 429 and 5xx responses are retried with exponential
    backoff (1s, 2s, 4s, ...). A 2xx response whose body cannot be parsed
    raises BackendProtocolError immediately and is never re-sent.
    """

    backoff_base_s = 1.0

    def __init__(self, cfg: BackendConfig, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Optional[Callable[[float], None]] = None):
        if cfg.kind != "wire":
            raise ConfigError("WireBackend needs kind == 'wire'")
        self.cfg = cfg
        self.url = cfg.endpoint.rstrip("/") + "/chat/completions"
        self.client = httpx.Client(timeout=cfg.timeout_s, transport=transport)
        self.sleep = sleep or (lambda s: time.sleep(s))
        self._sem = _global_semaphore(cfg.max_in_flight)
        self._rate_lock = threading.Lock()
        self._next_slot = 0.0
        self.requests_sent = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _throttle(self) -> None:
        if not self.cfg.rate_limit_per_s:
            return
        with self._rate_lock:
            now = time.monotonic()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + 1.0 / self.cfg.rate_limit_per_s
        if wait > 0:
            self.sleep(wait)

    def chat(self, messages: list[ChatMessage]) -> ChatMessage:
        check_messages(messages)
        body = {
            "model": self.cfg.model_name,
            "messages": [m.to_dict() for m in messages],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_reply_tokens,
        }
        last_err = None
        for attempt in range(self.cfg.retries + 1):
            if attempt:
                self.sleep(self.backoff_base_s * 2 ** (attempt - 1))
            self._throttle()
            with self._sem:
                try:
                    self.requests_sent += 1
                    resp = self.client.post(self.url, json=body, headers=self._headers())
                except httpx.TransportError as exc:
                    last_err = exc
                    log.warning("chat attempt %d failed: %r", attempt + 1, exc)
                    continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_err = f"HTTP {resp.status_code}"
                log.warning("chat attempt %d got %s", attempt + 1, last_err)
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"{self.url} returned HTTP {resp.status_code}: {resp.text[:200]}")
            return ChatMessage("assistant", _parse_completion(resp))
        raise BackendUnavailable(f"{self.url} failed after {self.cfg.retries + 1} attempts: {last_err}")


def _parse_completion(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendProtocolError(f"unexpected completion body: {resp.text[:200]!r}") from exc
    if content is None:
        return ""
    if not isinstance(content, str):
        raise BackendProtocolError(f"completion content is not a string: {content!r}")
    return content


def make_backend(cfg: BackendConfig, **kwargs) -> LlmBackend:
    if cfg.kind == "wire":
        return WireBackend(cfg, **kwargs)
    if cfg.kind == "scripted":
        return ScriptedBackend.from_file(cfg.script_path)
    if cfg.kind == "extractive":
        return FunctionBackend(extractive_answer)
    raise ConfigError(f"backend kind {cfg.kind!r} cannot chat")


def chat(messages: list[ChatMessage], cfg: BackendConfig) -> ChatMessage:
    return make_backend(cfg).chat(messages)


# ------------------------------------------------------------------ judge


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str
    judge: str = "model"

    def __post_init__(self):
        if not 0.0 <= self.score <= 100.0:
            raise ValueError("score must lie in [0, 100]")


TRAILING_INT_RE = re.compile(r"(-?\d+(?:\.\d+)?)\s*(?:/\s*100)?\s*\**\s*$")


def parse_verdict_score(reply: str) -> Optional[float]:
    lines = [l for l in strip_think(reply).splitlines() if l.strip()]
    if not lines:
        return None
    m = TRAILING_INT_RE.search(lines[-1])
    if not m:
        return None
    return min(100.0, max(0.0, float(m.group(1))))


def token_f1(answer: str, reference: str) -> float:
    a, r = Counter(words(answer)), Counter(words(reference))
    common = sum((a & r).values())
    if common == 0:
        return 0.0
    precision = common / sum(a.values())
    recall = common / sum(r.values())
    return 2 * precision * recall / (precision + recall)


def lexical_judge(question: str, reference: str, answer: str) -> JudgeVerdict:
    score = 100.0 * token_f1(answer, reference)
    return JudgeVerdict(score, f"lexical token F1 against the reference = {score:.1f}", judge="lexical")


def judge(question: str, reference: str, answer: str, cfg) -> JudgeVerdict:
    """Score ``answer`` in [0, 100].

    ``cfg`` is a BackendConfig (kind ``lexical`` selects the offline token-F1
    judge) or an already constructed backend.
    """
    if isinstance(cfg, BackendConfig) and cfg.kind == "lexical":
        return lexical_judge(question, reference, answer)
    for name, text in (("question", question), ("reference", reference), ("answer", answer)):
        if not text or not text.strip():
            raise ValueError(f"{name} must be non-empty")
    backend = make_backend(cfg) if isinstance(cfg, BackendConfig) else cfg
    messages = [ChatMessage("user", prompts.judge_prompt(question, reference, answer))]
    reply = backend.chat(messages).content
    score = parse_verdict_score(reply)
    if score is None:
        messages += [
            ChatMessage("assistant", reply),
            ChatMessage("user", "Your reply did not end with a score. Put a single integer from 0 to 100 alone on the last line."),
        ]
        reply = backend.chat(messages).content
        score = parse_verdict_score(reply)
    if score is None:
        raise JudgeParseError(f"judge reply has no trailing score: {reply[-200:]!r}")
    return JudgeVerdict(score, strip_think(reply))
