"""Iterative agentic retrieval.

The backend model reasons inside ``<think>`` tags and acts through
``<tool_call>{"name": ..., "arguments": {...}}</tool_call>`` blocks. Two
tools exist: ``chunk_search`` (top-k retrieval, merged with a fallback
retrieval on the original question for the first search of a transcript)
and ``chunk_delete`` (drop chunks from the working set).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Optional

import httpx

from . import prompts
from .corpus import CorpusStore
from .errors import ConfigError, EmptyQuery, RagnetError
from .index import EmbedderConfig, Index, cosine, embed
from .llm import ChatMessage, LlmBackend
from .oneshot import Budget, candidates_from_scored, select_token_constrained

log = logging.getLogger(__name__)

TOOL_NAMES = ("chunk_search", "chunk_delete")
TERMINATIONS = ("answered", "max_turns_exhausted", "backend_error")


@dataclass(frozen=True)
class AgentConfig:
    max_turns: int = 5
    k_per_search: int = 5
    fallback_on_first_search: bool = True
    enable_chunk_delete: bool = True
    fallback_retriever: str = "top_k"
    fallback_budget: Optional[Budget] = None

    def __post_init__(self):
        if self.max_turns < 1 or self.k_per_search < 1:
            raise ConfigError("max_turns and k_per_search must be positive")
        if self.fallback_retriever not in ("top_k", "token_constrained"):
            raise ConfigError(f"unknown fallback_retriever {self.fallback_retriever!r}")
        if (self.fallback_retriever == "token_constrained") != (self.fallback_budget is not None):
            raise ConfigError("fallback_budget must be set iff fallback_retriever == 'token_constrained'")

    @property
    def tools(self) -> tuple[str, ...]:
        return TOOL_NAMES if self.enable_chunk_delete else ("chunk_search",)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict

    def to_dict(self) -> dict:
        return {"name": self.name, "arguments": self.arguments}


# ----------------------------------------------------------------- parser

THINK_BLOCK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
TOOL_CALL_RE = re.compile(r"<tool_call>((?:(?!<tool_call>).)*?)</tool_call>", re.DOTALL)
STRAY_TAG_RE = re.compile(r"</?(?:tool_call|think)>")
FENCE_RE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


@dataclass
class ParsedMessage:
    think_text: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)
    final_answer: Optional[str] = None
    errors: list[str] = field(default_factory=list)

    @property
    def malformed(self) -> bool:
        return not self.tool_calls and bool(self.errors)

    def to_dict(self) -> dict:
        return {
            "think_text": self.think_text,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "final_answer": self.final_answer,
            "errors": self.errors,
        }


def _validate_call(raw: str, tools) -> tuple[Optional[ToolCall], Optional[str]]:
    body = raw.strip()
    m = FENCE_RE.match(body)
    if m:
        body = m.group(1)
    try:
        obj = json.loads(body)
    except ValueError as exc:
        return None, f"invalid JSON in tool_call: {exc.msg}"
    if not isinstance(obj, dict):
        return None, "tool_call must be a JSON object"
    name, args = obj.get("name"), obj.get("arguments", {})
    if isinstance(args, str):
        try:
            args = json.loads(args)
        except ValueError:
            return None, "tool_call arguments must be a JSON object"
    if not isinstance(name, str):
        return None, "tool_call needs a string 'name'"
    if name not in tools:
        return None, f"unknown tool {name!r}; available: {', '.join(tools)}"
    if not isinstance(args, dict):
        return None, "tool_call arguments must be a JSON object"
    if name == "chunk_search":
        q = args.get("query")
        if not isinstance(q, str) or not q.strip():
            return None, "chunk_search needs a non-empty string 'query'"
        return ToolCall(name, {"query": q}), None
    ids = args.get("chunk_ids")
    if isinstance(ids, str):
        ids = [ids]
    if not isinstance(ids, list) or not ids or not all(isinstance(i, str) and i for i in ids):
        return None, "chunk_delete needs a non-empty list of string 'chunk_ids'"
    return ToolCall(name, {"chunk_ids": ids}), None


def parse_assistant_message(text, tools=TOOL_NAMES) -> ParsedMessage:
    """Split a reply into think text, tool calls and a final answer.

    Never raises. A reply with at least one valid tool call is an action
    message; without tool calls and without errors the remaining text is
    the final answer; otherwise the errors are to be reported back.
    """
    if not isinstance(text, str):
        text = "" if text is None else str(text)
    out = ParsedMessage()
    thinks = [m.group(1).strip() for m in THINK_BLOCK_RE.finditer(text)]
    rest = THINK_BLOCK_RE.sub(" ", text)
    if "</think>" in rest:
        head, _, rest = rest.partition("</think>")
        thinks.insert(0, head.replace("<think>", "").strip())
    if "<think>" in rest:
        rest, _, tail = rest.partition("<think>")
        thinks.append(tail.strip())
    out.think_text = "\n".join(t for t in thinks if t)

    for m in TOOL_CALL_RE.finditer(rest):
        call, err = _validate_call(m.group(1), tools)
        if call is not None:
            out.tool_calls.append(call)
        else:
            out.errors.append(err)
    rest = TOOL_CALL_RE.sub(" ", rest)
    if "<tool_call>" in rest:
        out.errors.append("unterminated <tool_call> block")
        rest = rest.partition("<tool_call>")[0]
    remaining = STRAY_TAG_RE.sub(" ", rest).strip()

    if not out.tool_calls and not out.errors:
        if remaining:
            out.final_answer = remaining
        else:
            out.errors.append("empty reply: call a tool or give the final answer")
    return out


# ------------------------------------------------------------ transcript


@dataclass
class ToolResult:
    name: str
    hits: list[dict] = field(default_factory=list)
    deleted: list[str] = field(default_factory=list)
    unknown: list[str] = field(default_factory=list)
    error: Optional[str] = None
    query: Optional[str] = None
    fallback: bool = False

    def to_dict(self) -> dict:
        if self.error is not None:
            return {"name": self.name, "error": self.error}
        if self.name == "chunk_delete":
            return {"name": self.name, "deleted": self.deleted, "unknown": self.unknown}
        return {"name": self.name, "query": self.query, "fallback": self.fallback, "hits": self.hits}


@dataclass
class Turn:
    index: int
    assistant_text: str = ""
    think_text: str = ""
    tool_calls: list[ToolCall] = field(default_factory=list)
    tool_results: list[ToolResult] = field(default_factory=list)
    working_set_after: list[str] = field(default_factory=list)
    context_tokens_after: int = 0
    context_tokens_before: int = 0
    forced: bool = False

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "assistant_text": self.assistant_text,
            "think_text": self.think_text,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "tool_results": [r.to_dict() for r in self.tool_results],
            "working_set_after": self.working_set_after,
            "context_tokens_after": self.context_tokens_after,
            "forced": self.forced,
        }


@dataclass
class Transcript:
    query: str
    turns: list[Turn] = field(default_factory=list)
    final_answer: Optional[str] = None
    termination: Optional[str] = None
    search_count: int = 0
    fallback_executed: bool = False
    drift_scores: list[float] = field(default_factory=list)
    deleted_ids: list[str] = field(default_factory=list)
    evidence_ids: list[str] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "turns": [t.to_dict() for t in self.turns],
            "final_answer": self.final_answer,
            "termination": self.termination,
            "search_count": self.search_count,
            "fallback_executed": self.fallback_executed,
            "drift_scores": self.drift_scores,
            "deleted_ids": self.deleted_ids,
            "evidence_ids": self.evidence_ids,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    def events(self) -> list[dict]:
        out = []
        for t in self.turns:
            out.append({"event": "turn_start", "payload": {"index": t.index, "forced": t.forced},
                        "context_tokens": t.context_tokens_before})
            out.append({"event": "assistant", "payload": {"content": t.assistant_text, "think": t.think_text},
                        "context_tokens": t.context_tokens_after})
            for c in t.tool_calls:
                out.append({"event": "tool_call", "payload": c.to_dict(), "context_tokens": t.context_tokens_after})
            for r in t.tool_results:
                out.append({"event": "tool_result", "payload": r.to_dict(), "context_tokens": t.context_tokens_after})
        last = self.turns[-1].context_tokens_after if self.turns else 0
        out.append({
            "event": "final",
            "payload": {
                "answer": self.final_answer,
                "termination": self.termination,
                "search_count": self.search_count,
                "fallback_executed": self.fallback_executed,
                "drift_scores": self.drift_scores,
                "evidence_ids": self.evidence_ids,
            },
            "context_tokens": last,
        })
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, ensure_ascii=False, separators=(",", ":")) + "\n" for e in self.events())


# ------------------------------------------------------------------ state


class AgentState:
    """Mutable per-transcript state: working set and executed turns."""

    def __init__(self, query: str, index: Index, corpus: CorpusStore, cfg: AgentConfig):
        self.query = query
        self.index = index
        self.corpus = corpus
        self.cfg = cfg
        # chunk_id -> (turn index, result index) of the search that added it
        self.working_set: dict[str, tuple[int, int]] = {}
        self.transcript = Transcript(query)
        self.searched = False

    @property
    def turns(self) -> list[Turn]:
        return self.transcript.turns

    def add_to_working_set(self, chunk_ids, where: tuple[int, int]) -> list[str]:
        added = []
        for cid in chunk_ids:
            if cid not in self.working_set:
                self.working_set[cid] = where
                added.append(cid)
        return added

    def count_context(self, messages: list[ChatMessage]) -> int:
        return sum(self.corpus.count_tokens(m.content) for m in messages)


def drift_score(original_query: str, reformulated: str, embedder: Optional[EmbedderConfig] = None) -> float:
    """Cosine similarity of the two queries' embeddings, clamped to [0, 1]."""
    sim = cosine(embed(original_query, embedder), embed(reformulated, embedder))
    return min(1.0, max(0.0, sim))


def _hit(chunk, score: float, source: str) -> dict:
    return {
        "chunk_id": chunk.chunk_id,
        "score": round(float(score), 12),
        "meta": {"years": sorted(chunk.meta.years), "locations": sorted(chunk.meta.locations)},
        "text": chunk.text,
        "source": source,
    }


def fallback_hits(state: AgentState) -> list[tuple]:
    cfg = state.cfg
    if cfg.fallback_retriever == "top_k":
        return [(s.chunk, s.score) for s in state.index.search(state.query, cfg.k_per_search)]
    ranked = state.index.search_all(state.query)
    sel = select_token_constrained(candidates_from_scored(ranked), cfg.fallback_budget)
    return [(c.chunk, c.relevance) for c in sel.chosen]


def merge_hits(primary: list[tuple], secondary: list[tuple]) -> list[tuple]:
    """Dedup by chunk id and order by score; primary wins ties."""
    seen = {c.chunk_id for c, _ in primary}
    rows = [(-s, 0, i, c, s) for i, (c, s) in enumerate(primary)]
    rows += [(-s, 1, i, c, s) for i, (c, s) in enumerate(secondary) if c.chunk_id not in seen]
    rows.sort(key=lambda r: r[:3])
    return [(c, s) for *_, c, s in rows]


def exec_chunk_search(state: AgentState, query_text: str, where: tuple[int, int]) -> ToolResult:
    cfg = state.cfg
    if not query_text or not query_text.strip():
        return ToolResult("chunk_search", error=str(EmptyQuery()), query=query_text)
    try:
        hits = [(s.chunk, s.score) for s in state.index.search(query_text, cfg.k_per_search)]
    except EmptyQuery as exc:
        return ToolResult("chunk_search", error=str(exc), query=query_text)
    sources = {c.chunk_id: "model" for c, _ in hits}
    fallback = False
    if cfg.fallback_on_first_search and not state.searched:
        extra = fallback_hits(state)
        sources.update({c.chunk_id: "fallback" for c, _ in extra if c.chunk_id not in sources})
        hits = merge_hits(hits, extra)
        fallback = True
        state.transcript.fallback_executed = True
    state.searched = True
    state.transcript.search_count += 1
    state.transcript.drift_scores.append(round(drift_score(state.query, query_text, state.index.embedder), 12))
    state.add_to_working_set([c.chunk_id for c, _ in hits], where)
    return ToolResult(
        "chunk_search",
        hits=[_hit(c, s, sources[c.chunk_id]) for c, s in hits],
        query=query_text,
        fallback=fallback,
    )


def exec_chunk_delete(state: AgentState, chunk_ids: list[str]) -> ToolResult:
    deleted, unknown = [], []
    for cid in chunk_ids:
        if cid in state.working_set:
            del state.working_set[cid]
            deleted.append(cid)
        elif cid not in deleted and cid not in unknown:
            unknown.append(cid)
    state.transcript.deleted_ids.extend(deleted)
    return ToolResult("chunk_delete", deleted=deleted, unknown=unknown)


# ---------------------------------------------------------------- context


def render_tool_message(state: AgentState, turn: Turn) -> str:
    blocks = []
    for r_idx, result in enumerate(turn.tool_results):
        if result.error is not None:
            blocks.append(f"! tool error ({result.name}): {result.error}")
            continue
        if result.name == "chunk_delete":
            line = f"# chunk_delete removed {len(result.deleted)} chunk(s): {', '.join(result.deleted) or '-'}"
            if result.unknown:
                line += f"; not in context: {', '.join(result.unknown)}"
            blocks.append(line)
            continue
        head = f"# chunk_search {json.dumps(result.query, ensure_ascii=False)} returned {len(result.hits)} chunk(s)"
        if result.fallback:
            head += ", merged with results for the original question"
        lines = [head]
        for hit in result.hits:
            cid = hit["chunk_id"]
            if state.working_set.get(cid) == (turn.index, r_idx):
                chunk = state.corpus.get(cid)
                lines.append(prompts.render_chunk(cid, chunk.meta, chunk.text))
            elif cid in state.working_set:
                lines.append(f"# {cid}: already in context")
            else:
                lines.append(f"# {cid}: deleted")
        blocks.append("\n\n".join(lines))
    return "\n\n".join(blocks) if blocks else "# no tool output"


def build_context(state: AgentState) -> list[ChatMessage]:
    """System prompt, user question, then an assistant/tool pair per turn.

    Chunks are rendered in full only at the search that last added them
    and only while they remain in the working set.
    """
    messages = [
        ChatMessage("system", prompts.agent_system_prompt(state.cfg.enable_chunk_delete)),
        ChatMessage("user", state.query),
    ]
    for turn in state.turns:
        if turn.forced:
            continue
        messages.append(ChatMessage("assistant", turn.assistant_text))
        if turn.tool_results:
            messages.append(ChatMessage("tool", render_tool_message(state, turn)))
    return messages


# ------------------------------------------------------------------- loop


def _execute(state: AgentState, turn: Turn, call: ToolCall) -> ToolResult:
    where = (turn.index, len(turn.tool_results))
    if call.name == "chunk_search":
        return exec_chunk_search(state, call.arguments["query"], where)
    return exec_chunk_delete(state, call.arguments["chunk_ids"])


def _finish(state: AgentState, termination: str, answer: Optional[str] = None) -> Transcript:
    tr = state.transcript
    tr.termination = termination
    tr.final_answer = answer
    tr.evidence_ids = list(state.working_set)
    return tr


def run_iterative(query: str, index: Index, corpus: CorpusStore, cfg: AgentConfig, llm: LlmBackend) -> Transcript:
    """Reason/act loop bounded by ``cfg.max_turns`` plus one forced answer."""
    state = AgentState(query, index, corpus, cfg)
    strikes = 0
    for t in range(cfg.max_turns):
        messages = build_context(state)
        try:
            reply = llm.chat(messages).content
        except (RagnetError, httpx.HTTPError) as exc:
            state.transcript.error = str(exc)
            return _finish(state, "backend_error")
        parsed = parse_assistant_message(reply, cfg.tools)
        turn = Turn(index=t, assistant_text=reply, think_text=parsed.think_text, tool_calls=parsed.tool_calls,
                    context_tokens_before=state.count_context(messages))
        state.turns.append(turn)

        if parsed.final_answer is not None:
            turn.working_set_after = list(state.working_set)
            turn.context_tokens_after = state.count_context(build_context(state))
            return _finish(state, "answered", parsed.final_answer)

        for call in parsed.tool_calls:
            turn.tool_results.append(_execute(state, turn, call))
        for err in parsed.errors:
            turn.tool_results.append(ToolResult("tool_call", error=err))
        turn.working_set_after = list(state.working_set)
        turn.context_tokens_after = state.count_context(build_context(state))

        strikes = strikes + 1 if parsed.malformed else 0
        if strikes >= 2:
            state.transcript.error = "two consecutive malformed replies"
            return _finish(state, "backend_error")

    messages = build_context(state) + [ChatMessage("user", prompts.forced_answer_prompt())]
    try:
        reply = llm.chat(messages).content
    except (RagnetError, httpx.HTTPError) as exc:
        state.transcript.error = str(exc)
        return _finish(state, "backend_error")
    parsed = parse_assistant_message(reply, cfg.tools)
    answer = parsed.final_answer
    if answer is None:
        answer = STRAY_TAG_RE.sub(" ", TOOL_CALL_RE.sub(" ", THINK_BLOCK_RE.sub(" ", reply))).strip()
    ctx = state.count_context(messages)
    state.turns.append(Turn(index=cfg.max_turns, assistant_text=reply, think_text=parsed.think_text,
                            working_set_after=list(state.working_set), context_tokens_before=ctx,
                            context_tokens_after=ctx, forced=True))
    return _finish(state, "max_turns_exhausted", answer)


def run_combined(query: str, index: Index, corpus: CorpusStore, cfg: AgentConfig, llm: LlmBackend) -> Transcript:
    """Iterative loop whose first-search fallback is token-budgeted."""
    if cfg.fallback_retriever != "token_constrained" or cfg.fallback_budget is None:
        raise ConfigError("combined mode needs fallback_retriever='token_constrained' and a fallback_budget")
    return run_iterative(query, index, corpus, cfg, llm)
