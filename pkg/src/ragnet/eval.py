"""Benchmark harness: L1-L4 question sets, pipeline runs, judge scoring,
golden-chunk recall, chunk retention tables and the retrieval-laziness
experiment."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import prompts
from .agent import AgentConfig, parse_assistant_message, run_combined, run_iterative
from .corpus import TOKEN_RE, ChunkMeta, CorpusStore, TokenizerConfig, count_tokens
from .errors import ConfigError, JudgeParseError, PaddingExhausted, QuestionSchemaError, UnresolvedGoldenChunks
from .index import Index
from .llm import BackendConfig, ChatMessage, extractive_answer, judge, strip_think
from .oneshot import Budget, FilterRules, extract_query_meta, retention_ratio, run_oneshot

log = logging.getLogger(__name__)

LEVELS = (1, 2, 3, 4)
PIPELINES = ("basic_top5", "oneshot", "iterative", "combined")


@dataclass
class Question:
    qid: str
    level: int
    question: str
    reference_answer: str
    golden_chunk_ids: list[str] = field(default_factory=list)
    golden_facts: Optional[list[str]] = None


def _check_question(rec, lineno: int) -> Question:
    if not isinstance(rec, dict):
        raise QuestionSchemaError(lineno, "record must be a JSON object")
    for key in ("qid", "level", "question", "reference_answer", "golden_chunk_ids"):
        if key not in rec:
            raise QuestionSchemaError(lineno, f"missing field {key!r}")
    level = rec["level"]
    if isinstance(level, bool) or not isinstance(level, int) or level not in LEVELS:
        raise QuestionSchemaError(lineno, f"level must be one of 1-4, got {level!r}")
    if not isinstance(rec["question"], str) or not rec["question"].strip():
        raise QuestionSchemaError(lineno, "question must be a non-empty string")
    if not isinstance(rec["reference_answer"], str):
        raise QuestionSchemaError(lineno, "reference_answer must be a string")
    golds = rec["golden_chunk_ids"]
    if not isinstance(golds, list) or not all(isinstance(g, str) for g in golds):
        raise QuestionSchemaError(lineno, "golden_chunk_ids must be a list of strings")
    facts = rec.get("golden_facts")
    if facts is not None and (not isinstance(facts, list) or not all(isinstance(f, str) and f for f in facts)):
        raise QuestionSchemaError(lineno, "golden_facts must be a list of non-empty strings")
    return Question(str(rec["qid"]), level, rec["question"], rec["reference_answer"], list(golds), facts)


def load_questions(path, corpus: Optional[CorpusStore] = None) -> list[Question]:
    questions, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise QuestionSchemaError(lineno, f"invalid JSON ({exc.msg})") from exc
        q = _check_question(rec, lineno)
        if q.qid in seen:
            raise QuestionSchemaError(lineno, f"duplicate qid {q.qid!r}")
        seen.add(q.qid)
        questions.append(q)
    if corpus is not None:
        missing = [(q.qid, g) for q in questions for g in q.golden_chunk_ids if g not in corpus]
        if missing:
            raise UnresolvedGoldenChunks(missing)
    return questions


# ----------------------------------------------------------------- report


@dataclass
class QuestionResult:
    qid: str
    level: int
    score: Optional[float]
    search_count: int
    golden_recall: Optional[float]
    golden_hit: Optional[bool]
    facts_ok: Optional[bool]
    termination: str
    flags: list[str] = field(default_factory=list)
    evidence_ids: list[str] = field(default_factory=list)
    answer: str = ""
    drift_mean: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["score"] = "unscored" if self.score is None else round(self.score, 6)
        return d


def _mean(xs) -> Optional[float]:
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


def _aggregate(results: list[QuestionResult]) -> dict:
    scored = [r.score for r in results if r.score is not None]
    return {
        "n": len(results),
        "n_scored": len(scored),
        "mean_score": _mean(scored),
        "mean_search_count": _mean([r.search_count for r in results]),
        "golden_recall": _mean([r.golden_recall for r in results]),
    }


@dataclass
class RunReport:
    pipeline: str
    judge: str
    per_question: list[QuestionResult] = field(default_factory=list)

    @property
    def per_level(self) -> dict:
        return {lv: _aggregate([r for r in self.per_question if r.level == lv]) for lv in LEVELS}

    @property
    def overall(self) -> dict:
        return _aggregate(self.per_question)

    def subset(self, levels) -> dict:
        return _aggregate([r for r in self.per_question if r.level in levels])

    def to_dict(self) -> dict:
        def rounded(agg):
            return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in agg.items()}

        return {
            "pipeline": self.pipeline,
            "judge": self.judge,
            "per_level": {f"L{lv}": rounded(a) for lv, a in self.per_level.items()},
            "overall": rounded(self.overall),
            "per_question": [r.to_dict() for r in self.per_question],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=False) + "\n"

    def to_markdown(self, label: Optional[str] = None) -> str:
        return render_markdown([(label or self.pipeline, self)])

    def save(self, out_dir, label: Optional[str] = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        (out / "report.md").write_text(self.to_markdown(label), encoding="utf-8")
        return out


def _fmt(v, digits=1) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def render_markdown(rows: list[tuple[str, RunReport]]) -> str:
    """Score table (mean search count in parentheses) plus golden recall."""
    judges = sorted({r.judge for _, r in rows})
    lines = [
        "## Answer score (0-100), mean retrieval count in parentheses",
        "",
        "| Method | L1 | L2 | L3 | L4 | Avg |",
        "|---|---|---|---|---|---|",
    ]
    for label, rep in rows:
        cells = [f"{_fmt(a['mean_score'])} ({_fmt(a['mean_search_count'], 2)})" for a in rep.per_level.values()]
        o = rep.overall
        cells.append(f"{_fmt(o['mean_score'])} ({_fmt(o['mean_search_count'], 2)})")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    lines += ["", "## Golden-chunk recall", "", "| Method | L1 | L2 | L3 | L4 | Avg |", "|---|---|---|---|---|---|"]
    for label, rep in rows:
        cells = [_fmt(a["golden_recall"], 3) for a in rep.per_level.values()] + [_fmt(rep.overall["golden_recall"], 3)]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    lines += ["", "Judge: " + ", ".join(judges)]
    if "lexical" in judges:
        lines.append("Scores from the lexical judge are token-F1 against the reference answer, not model judgements.")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------- benchmark


@dataclass
class PipelineSettings:
    budget: Budget = field(default_factory=Budget)
    rules: FilterRules = field(default_factory=FilterRules)
    stages: dict = field(default_factory=lambda: {"filter": False, "crop": False})
    agent: AgentConfig = field(default_factory=AgentConfig)
    basic_k: int = 5


def run_basic(query: str, index: Index, llm, k: int = 5) -> tuple[str, list[str], dict]:
    hits = index.search(query, k)
    rendered = [prompts.render_chunk(h.chunk_id, h.chunk.meta, h.chunk.text) for h in hits]
    answer = strip_think(llm.chat([ChatMessage("user", prompts.oneshot_prompt(query, rendered))]).content)
    ids = [h.chunk_id for h in hits]
    return answer, ids, {"query": query, "chosen": ids, "answer": answer}


def _judge_label(judge_cfg) -> str:
    if isinstance(judge_cfg, BackendConfig):
        return "lexical token-F1 (offline)" if judge_cfg.kind == "lexical" else f"{judge_cfg.kind} model judge"
    return "model judge"


def run_question(q: Question, pipeline: str, index: Index, corpus: CorpusStore, llm, judge_cfg,
                 settings: PipelineSettings) -> tuple[QuestionResult, dict]:
    flags: list[str] = []
    search_count, termination, drift = 1, "answered", None
    deleted: list[str] = []
    try:
        if pipeline == "basic_top5":
            answer, evidence, trace = run_basic(q.question, index, llm, settings.basic_k)
        elif pipeline == "oneshot":
            res = run_oneshot(q.question, index, corpus, settings.budget, settings.rules, llm, settings.stages)
            answer, evidence, trace = res.answer, res.evidence_ids, res.record(with_timing=False)
            flags.extend(res.flags)
        elif pipeline in ("iterative", "combined"):
            run = run_combined if pipeline == "combined" else run_iterative
            tr = run(q.question, index, corpus, settings.agent, llm)
            answer, evidence, trace = tr.final_answer or "", tr.evidence_ids, tr.to_dict()
            search_count, termination, deleted = tr.search_count, tr.termination, tr.deleted_ids
            drift = _mean(tr.drift_scores)
            if tr.fallback_executed:
                flags.append("fallback_executed")
            if termination == "max_turns_exhausted":
                flags.append("forced_answer")
        else:
            raise ConfigError(f"unknown pipeline {pipeline!r}")
    except Exception as exc:  # one failing question must not abort the batch
        log.warning("question %s failed: %s", q.qid, exc)
        result = QuestionResult(q.qid, q.level, None, 0, 0.0 if q.golden_chunk_ids else None,
                                False if q.golden_chunk_ids else None, None, "error", ["error", "unscored"])
        return result, {"qid": q.qid, "error": str(exc), "partial": getattr(exc, "partial_trace", None)}

    golds = set(q.golden_chunk_ids)
    recall = len(golds & set(evidence)) / len(golds) if golds else None
    if golds & set(deleted):
        flags.append("useful_chunk_deleted")
    facts_ok = None
    if q.golden_facts:
        facts_ok = all(f.casefold() in answer.casefold() for f in q.golden_facts)
        if not facts_ok:
            flags.append("golden_fact_missing")
    score = None
    if not answer.strip():
        score = 0.0
        flags.append("empty_answer")
    else:
        try:
            score = judge(q.question, q.reference_answer or q.question, answer, judge_cfg).score
        except JudgeParseError:
            flags.append("unscored")
    result = QuestionResult(
        q.qid, q.level, score, search_count, recall, (recall == 1.0) if recall is not None else None, facts_ok,
        termination, flags, list(evidence), answer, round(drift, 12) if drift is not None else None,
    )
    return result, {"qid": q.qid, "pipeline": pipeline, **trace}


def run_benchmark(
    questions: list[Question],
    pipeline: str,
    index: Index,
    corpus: CorpusStore,
    llm,
    judge_cfg,
    settings: Optional[PipelineSettings] = None,
    workers: int = 1,
    out_dir=None,
    label: Optional[str] = None,
) -> RunReport:
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")
    settings = settings or PipelineSettings()
    if pipeline == "combined" and settings.agent.fallback_retriever != "token_constrained":
        settings = replace(settings, agent=replace(settings.agent, fallback_retriever="token_constrained",
                                                   fallback_budget=settings.budget))

    def one(q):
        return run_question(q, pipeline, index, corpus, llm, judge_cfg, settings)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, questions))
    else:
        outcomes = [one(q) for q in questions]
    report = RunReport(pipeline, _judge_label(judge_cfg), [r for r, _ in outcomes])
    report.traces = [t for _, t in outcomes]
    if out_dir is not None:
        report.save(out_dir, label)
        lines = "".join(json.dumps(t, ensure_ascii=False, separators=(",", ":")) + "\n" for t in report.traces)
        (Path(out_dir) / "traces.jsonl").write_text(lines, encoding="utf-8")
    return report


# -------------------------------------------------------------- retention


def retention_report(traces) -> dict:
    """Mean chunk retention (%) per configuration and level.

    ``traces`` maps a row label to a list of ``(level, stage_trace)``; the
    ratio of the last refinement stage that ran is used.
    """
    table = {}
    for label, rows in traces.items():
        per_level = {}
        for lv in LEVELS:
            ratios = []
            for level, st in rows:
                if level != lv:
                    continue
                stage = "after_crop" if st.get("after_crop") is not None else "after_filter"
                ratios.append(retention_ratio(st)["chunks"][stage])
            per_level[lv] = 100.0 * _mean(ratios) if ratios else None
        table[label] = per_level
    return table


def render_retention(table: dict) -> str:
    lines = ["| Methods | L1 | L2 | L3 | L4 |", "|---|---|---|---|---|"]
    for label, per_level in table.items():
        lines.append(f"| {label} | " + " | ".join(_fmt(per_level[lv], 0) for lv in LEVELS) + " |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- laziness


@dataclass(frozen=True)
class LazinessConfig:
    context_lengths: tuple = (3000, 6000, 9000, 12000)
    trials_per_length: int = 20
    padding_source: str = "corpus_irrelevant"

    def __post_init__(self):
        lengths = list(self.context_lengths)
        if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ConfigError("context_lengths must be strictly increasing")
        if self.trials_per_length < 1:
            raise ConfigError("trials_per_length must be positive")
        if self.padding_source not in ("corpus_irrelevant", "synthetic"):
            raise ConfigError(f"unknown padding_source {self.padding_source!r}")


def laziness_probability(context_tokens: int, intercept: float = 1.25, scale: float = 12000.0) -> float:
    return min(1.0, max(0.0, intercept - context_tokens / scale))


class LazinessPolicyBackend:
    """Deterministic stand-in for a model that searches less as context grows.

    Trial ``j`` of ``n`` searches again iff ``(j + 0.5) / n`` is below the
    policy probability at the measured context size, so the observed
    frequency tracks the policy exactly.
    """

    def __init__(self, tokenizer: Optional[TokenizerConfig] = None, u: float = 0.5,
                 intercept: float = 1.25, scale: float = 12000.0):
        self.tokenizer = tokenizer
        self.u = u
        self.intercept = intercept
        self.scale = scale

    def for_trial(self, j: int, n: int) -> "LazinessPolicyBackend":
        return LazinessPolicyBackend(self.tokenizer, (j + 0.5) / n, self.intercept, self.scale)

    def chat(self, messages: list[ChatMessage]) -> ChatMessage:
        ctx = sum(count_tokens(m.content, self.tokenizer) for m in messages)
        if self.u < laziness_probability(ctx, self.intercept, self.scale):
            question = next(m.content for m in messages if m.role == "user")
            call = json.dumps({"name": "chunk_search", "arguments": {"query": question + " further details"}})
            return ChatMessage("assistant", f"<think>The evidence is incomplete.</think><tool_call>{call}</tool_call>")
        return ChatMessage("assistant", "<think>This should be enough.</think>" + extractive_answer(messages))


_FILLER_TOPICS = (
    "municipal parking permit renewals", "library opening hours", "street lighting maintenance",
    "public toilet cleaning schedules", "bus stop shelter repairs", "park bench replacement",
    "waste sorting bin colours", "community choir registration", "swimming pool water testing",
    "market stall allocation", "tree pruning notices", "road marking repainting",
)


def synthetic_padding(n: int) -> list[tuple[str, str]]:
    """Deterministic off-topic filler chunks as ``(chunk_id, text)``."""
    out = []
    for i in range(n):
        topic = _FILLER_TOPICS[i % len(_FILLER_TOPICS)]
        text = (
            f"Notice number {i + 1} concerns {topic}. Residents are reminded that routine arrangements for {topic} "
            f"continue under the existing schedule. The responsible office will publish any change on its notice "
            f"board. Enquiries about {topic} may be made in person at the service counter during working hours. "
            f"This notice does not change any other procedure and replaces no earlier notice."
        )
        out.append((f"padding#{i}", text))
    return out


def corpus_padding(question: str, index: Index, corpus: CorpusStore, exclude: set) -> list[tuple[str, str]]:
    """Bottom-decile chunks for ``question`` sharing no metadata with it."""
    qm = extract_query_meta(question, corpus.gazetteer)
    ranked = index.search_all(question)
    tail = ranked[len(ranked) - max(1, len(ranked) // 10):]
    out = []
    for s in reversed(tail):
        m = s.chunk.meta
        if s.chunk_id in exclude or (m.years & qm.years) or (m.locations & qm.locations) or (m.entities & qm.entities):
            continue
        out.append((s.chunk_id, s.chunk.text))
    return out


def _prefix_tokens(text: str, k: int) -> str:
    if k <= 0:
        return ""
    toks = list(tokenize_spans(text))
    if k >= len(toks):
        return text
    return text[: toks[k - 1]]


def tokenize_spans(text: str):
    for m in TOKEN_RE.finditer(text):
        yield m.end()


def laziness_messages(question: str, evidence: list[tuple[str, object, str]], padding: list[tuple[str, str]],
                      target: int, tokenizer: Optional[TokenizerConfig], enable_chunk_delete: bool = True
                      ) -> tuple[list[ChatMessage], int]:
    """Turn-0 context (question, one search, its results) padded with
    irrelevant chunks until the total token count reaches ``target``."""
    call = json.dumps({"name": "chunk_search", "arguments": {"query": question}}, ensure_ascii=False)
    fixed = [
        ChatMessage("system", prompts.agent_system_prompt(enable_chunk_delete)),
        ChatMessage("user", question),
        ChatMessage("assistant", f"<tool_call>{call}</tool_call>"),
    ]
    base = sum(count_tokens(m.content, tokenizer) for m in fixed)
    blocks = [prompts.render_chunk(cid, meta, text) for cid, meta, text in evidence]

    def tool_msg(bs):
        head = f"# chunk_search {json.dumps(question, ensure_ascii=False)} returned {len(bs)} chunk(s)"
        return "\n\n".join([head, *bs])

    def total(bs):
        return base + count_tokens(tool_msg(bs), tokenizer)

    if total(blocks) > target:
        raise ConfigError(f"context without padding already has {total(blocks)} tokens > target {target}")
    empty = ChunkMeta()
    for cid, text in padding:
        block = prompts.render_chunk(cid, empty, text)
        if total(blocks + [block]) <= target:
            blocks.append(block)
            continue
        # partial block to land exactly on the target
        lo, hi = 0, len(list(tokenize_spans(text)))
        best = None
        while lo <= hi:
            mid = (lo + hi) // 2
            cand = prompts.render_chunk(cid, empty, _prefix_tokens(text, mid)) if mid else None
            n = total(blocks + [cand]) if cand else total(blocks)
            if n <= target:
                best = cand
                lo = mid + 1
            else:
                hi = mid - 1
        if best:
            blocks.append(best)
        break
    else:
        if total(blocks) < target:
            raise PaddingExhausted(f"padding pool reaches only {total(blocks)} of {target} tokens")
    messages = fixed + [ChatMessage("tool", tool_msg(blocks))]
    return messages, sum(count_tokens(m.content, tokenizer) for m in messages)


def laziness_experiment(
    question: Question,
    cfg: LazinessConfig,
    agent_cfg: AgentConfig,
    llm,
    index: Index,
    corpus: CorpusStore,
) -> list[dict]:
    """Follow-up search frequency after a padded first retrieval.

    The first retrieval holds only part of the golden evidence. The index
    and corpus are only read.
    """
    golds = question.golden_chunk_ids
    partial = golds[: max(1, len(golds) // 2)]
    evidence = [(cid, corpus.get(cid).meta, corpus.get(cid).text) for cid in partial]
    tokenizer = corpus.tokenizer
    rows = []
    for target in cfg.context_lengths:
        if cfg.padding_source == "synthetic":
            # each filler block is ~70 tokens
            padding = synthetic_padding(target // 40 + 10)
        else:
            padding = corpus_padding(question.question, index, corpus, set(golds))
        messages, ctx = laziness_messages(question.question, evidence, padding, target, tokenizer,
                                          agent_cfg.enable_chunk_delete)
        follows = 0
        for j in range(cfg.trials_per_length):
            backend = llm.for_trial(j, cfg.trials_per_length) if hasattr(llm, "for_trial") else llm
            parsed = parse_assistant_message(backend.chat(messages).content, agent_cfg.tools)
            follows += any(c.name == "chunk_search" for c in parsed.tool_calls)
        rows.append({
            "context_tokens": ctx,
            "trials": cfg.trials_per_length,
            "follow_up_probability": follows / cfg.trials_per_length,
        })
    return rows


LAZINESS_COLUMNS = ("context_tokens", "trials", "follow_up_probability")


def laziness_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LAZINESS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in LAZINESS_COLUMNS})
    return buf.getvalue()
