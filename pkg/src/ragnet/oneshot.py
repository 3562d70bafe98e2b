"""One-shot retrieval: pack as much relevant evidence as fits a token budget,
optionally refine it with a rule-based filter and LLM cropping, then answer.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import httpx
import numpy as np

from . import prompts
from .corpus import Chunk, ChunkMeta, CorpusStore, Gazetteer, count_tokens, extract_metadata, unit_bounds
from .errors import ConfigError, InstanceTooLarge, RagnetError
from .index import Index, ScoredChunk
from .llm import ChatMessage, LlmBackend, strip_think

log = logging.getLogger(__name__)

STAGES = ("retrieved", "after_filter", "after_crop", "final")
EXACT_MAX_ITEMS = 64
EXACT_MAX_MASS = 10**6
EXACT_MAX_CELLS = 5 * 10**7
TIE_EPS = 1e-9


@dataclass
class Candidate:
    chunk: Chunk
    relevance: float
    tokens: int

    @property
    def chunk_id(self) -> str:
        return self.chunk.chunk_id


@dataclass(frozen=True)
class Budget:
    max_tokens: int = 32000
    reserve_tokens: int = 1500

    def __post_init__(self):
        if self.max_tokens <= 0 or self.reserve_tokens < 0 or self.reserve_tokens >= self.max_tokens:
            raise ConfigError("budget needs 0 <= reserve_tokens < max_tokens")

    @property
    def capacity(self) -> int:
        return self.max_tokens - self.reserve_tokens


@dataclass
class Selection:
    chosen: list[Candidate] = field(default_factory=list)
    stage_trace: dict = field(default_factory=lambda: {s: None for s in STAGES})
    stage_tokens: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(c.tokens for c in self.chosen)

    @property
    def total_relevance(self) -> float:
        return math.fsum(c.relevance for c in self.chosen)

    @property
    def ids(self) -> list[str]:
        return [c.chunk_id for c in self.chosen]

    def record(self, stage: str) -> None:
        self.stage_trace[stage] = self.ids
        self.stage_tokens[stage] = {c.chunk_id: c.tokens for c in self.chosen}

    def derive(self, chosen: list[Candidate]) -> "Selection":
        return Selection(
            chosen=list(chosen),
            stage_trace=dict(self.stage_trace),
            stage_tokens=dict(self.stage_tokens),
            warnings=list(self.warnings),
        )


@dataclass(frozen=True)
class FilterRules:
    require_year_alignment: bool = True
    require_location_alignment: bool = True
    entity_overlap_min: int = 0
    add_neighbor_chunks: bool = True
    add_same_doc_matching_meta: bool = True
    refill_from_ranking: bool = True


@dataclass
class CropResult:
    chunk_id: str
    kept_text: str
    kept_tokens: int
    original_tokens: int
    kept_indices: list[int] = field(default_factory=list)
    failed_open: bool = False
    warning: Optional[str] = None


def candidates_from_scored(scored: list[ScoredChunk]) -> list[Candidate]:
    return [Candidate(s.chunk, s.score, s.chunk.token_count) for s in scored if s.chunk.token_count > 0]


# ------------------------------------------------------------- selection


def _density_key(c: Candidate):
    return (-c.relevance / c.tokens, -c.relevance, c.chunk_id)


def _unique(candidates: list[Candidate]) -> list[Candidate]:
    seen, out = set(), []
    for c in candidates:
        if c.chunk_id not in seen:
            seen.add(c.chunk_id)
            out.append(c)
    return out


def greedy_pack(candidates: list[Candidate], capacity: int) -> list[Candidate]:
    """Density-greedy packing guarded by the best single item.

    Returns the chosen candidates in their input order.
    """
    items = [c for c in _unique(candidates) if 0 < c.tokens <= capacity]
    if not items:
        return []
    picked, used = set(), 0
    for c in sorted(items, key=_density_key):
        if used + c.tokens <= capacity:
            picked.add(c.chunk_id)
            used += c.tokens
    best = min(items, key=lambda c: (-c.relevance, c.chunk_id))
    greedy_value = math.fsum(c.relevance for c in items if c.chunk_id in picked)
    if best.relevance > greedy_value:
        picked = {best.chunk_id}
    return [c for c in items if c.chunk_id in picked]


def select_token_constrained(candidates: list[Candidate], budget: Budget) -> Selection:
    sel = Selection(chosen=greedy_pack(candidates, budget.capacity))
    if candidates and all(c.tokens > budget.capacity for c in candidates):
        sel.warnings.append("budget smaller than every candidate")
    sel.record("retrieved")
    sel.record("final")
    return sel


def knapsack_exact(candidates: list[Candidate], budget: Budget) -> Selection:
    """Exact 0/1 optimum of total relevance under the token capacity.

    Among optimal subsets the lexicographically smallest sorted tuple of
    chunk ids is returned. Values within TIE_EPS count as equal.
    """
    items = sorted(_unique(candidates), key=lambda c: c.chunk_id)
    n = len(items)
    mass = sum(c.tokens for c in items)
    if n > EXACT_MAX_ITEMS and mass > EXACT_MAX_MASS:
        raise InstanceTooLarge(f"{n} items with token mass {mass}")
    cap = min(budget.capacity, mass)
    if n * (cap + 1) > EXACT_MAX_CELLS:
        raise InstanceTooLarge(f"DP table of {n} x {cap + 1} cells")
    tok = [c.tokens for c in items]
    rel = [c.relevance for c in items]

    # best[j, c]: optimum using items j.. with capacity c
    best = np.zeros((n + 1, cap + 1))
    for j in range(n - 1, -1, -1):
        best[j] = best[j + 1]
        t = tok[j]
        if t <= cap:
            best[j, t:] = np.maximum(best[j + 1, t:], best[j + 1, : cap + 1 - t] + rel[j])
    target = best[0, cap] - TIE_EPS

    chosen, c, value, start = [], cap, 0.0, 0
    while value < target:
        for j in range(start, n):
            if tok[j] <= c and value + rel[j] + best[j + 1, c - tok[j]] >= target:
                chosen.append(items[j])
                value += rel[j]
                c -= tok[j]
                start = j + 1
                break
        else:
            break
    ids = {x.chunk_id for x in chosen}
    sel = Selection(chosen=[x for x in _unique(candidates) if x.chunk_id in ids])
    sel.record("retrieved")
    sel.record("final")
    return sel


# ---------------------------------------------------------------- filter


def extract_query_meta(query: str, gazetteer: Optional[Gazetteer] = None) -> ChunkMeta:
    return extract_metadata(query, gazetteer)


def is_droppable(meta: ChunkMeta, query_meta: ChunkMeta, rules: FilterRules) -> bool:
    """True when a populated chunk dimension is disjoint from the query's."""
    if rules.require_year_alignment and query_meta.years and meta.years and not (meta.years & query_meta.years):
        return True
    if (
        rules.require_location_alignment
        and query_meta.locations
        and meta.locations
        and not (meta.locations & query_meta.locations)
    ):
        return True
    if rules.entity_overlap_min > 0 and query_meta.entities and meta.entities:
        if len(meta.entities & query_meta.entities) < rules.entity_overlap_min:
            return True
    return False


def _meta_intersects(meta: ChunkMeta, query_meta: ChunkMeta) -> bool:
    return bool(
        (meta.years & query_meta.years)
        or (meta.locations & query_meta.locations)
        or (meta.entities & query_meta.entities)
    )


def _filter_active(query_meta: ChunkMeta, rules: FilterRules) -> bool:
    return bool(
        (rules.require_year_alignment and query_meta.years)
        or (rules.require_location_alignment and query_meta.locations)
        or (rules.entity_overlap_min > 0 and query_meta.entities)
    )


def chunk_filter(
    selection: Selection,
    query_meta: ChunkMeta,
    corpus: CorpusStore,
    index: Index,
    rules: FilterRules,
    *,
    query: str,
    budget: Budget,
    ranked: Optional[list[ScoredChunk]] = None,
) -> Selection:
    """Drop chunks whose metadata contradicts the query, then add related
    chunks into the freed budget. Surviving chunks are never evicted."""
    if not _filter_active(query_meta, rules):
        out = selection.derive(selection.chosen)
        out.record("after_filter")
        out.record("final")
        return out

    ranked = ranked if ranked is not None else index.search_all(query)
    position = {s.chunk_id: i for i, s in enumerate(ranked)}
    score = {s.chunk_id: s.score for s in ranked}

    survivors = [c for c in selection.chosen if not is_droppable(c.chunk.meta, query_meta, rules)]
    taken = {c.chunk_id for c in survivors}

    related: set[str] = set()
    for c in survivors:
        if rules.add_neighbor_chunks:
            related.update(n.chunk_id for n in corpus.neighbors(c.chunk_id))
        if rules.add_same_doc_matching_meta:
            related.update(
                s.chunk_id for s in corpus.doc_chunks(c.chunk.doc_id) if _meta_intersects(s.meta, query_meta)
            )

    def admissible(cid: str) -> bool:
        return cid not in taken and cid in position and not is_droppable(corpus.get(cid).meta, query_meta, rules)

    chosen = list(survivors)
    remaining = budget.capacity - sum(c.tokens for c in survivors)
    pools = [sorted((cid for cid in related if admissible(cid)), key=position.__getitem__)]
    if rules.refill_from_ranking:
        pools.append(None)
    for pool in pools:
        if remaining <= 0:
            break
        if pool is None:
            pool = [s.chunk_id for s in ranked if admissible(s.chunk_id)]
        cands = [Candidate(corpus.get(cid), score[cid], corpus.get(cid).token_count) for cid in pool]
        added = greedy_pack([c for c in cands if c.tokens > 0], remaining)
        chosen.extend(added)
        taken.update(c.chunk_id for c in added)
        remaining -= sum(c.tokens for c in added)

    chosen.sort(key=lambda c: position.get(c.chunk_id, len(position)))
    out = selection.derive(chosen)
    out.record("after_filter")
    out.record("final")
    return out


# ------------------------------------------------------------------ crop

_INDEX_LIST_RE = re.compile(r"\[[^\[\]]*\]")


def parse_kept_indices(reply: str, n_sentences: int) -> Optional[list[int]]:
    """Last JSON list of sentence indices in ``reply``; None when malformed."""
    found = _INDEX_LIST_RE.findall(strip_think(reply))
    if not found:
        return None
    try:
        values = json.loads(found[-1])
    except ValueError:
        return None
    if not values or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        return None
    if any(v < 0 or v >= n_sentences for v in values):
        return None
    return sorted(set(values))


def split_sentences(text: str) -> list[str]:
    return [text[s:e] for s, e in unit_bounds(text, "sentence")]


def chunk_crop(chunk: Chunk, query: str, llm: LlmBackend, tokenizer=None) -> CropResult:
    """Keep only the sentences the backend selects, rebuilt from the
    original text by index. Any failure keeps the whole chunk."""
    sentences = split_sentences(chunk.text)
    whole = CropResult(chunk.chunk_id, chunk.text, chunk.token_count, chunk.token_count,
                       list(range(len(sentences))), failed_open=True)
    try:
        reply = llm.chat([ChatMessage("user", prompts.crop_prompt(query, sentences))]).content
    except (RagnetError, httpx.HTTPError, OSError) as exc:
        whole.warning = f"crop backend failure for {chunk.chunk_id}: {exc}"
        return whole
    kept = parse_kept_indices(reply, len(sentences))
    if kept is None:
        whole.warning = f"malformed crop reply for {chunk.chunk_id}"
        return whole
    kept_text = "".join(sentences[i] for i in kept)
    kept_tokens = count_tokens(kept_text, tokenizer)
    if kept_tokens <= 0:
        whole.warning = f"empty crop for {chunk.chunk_id}"
        return whole
    return CropResult(chunk.chunk_id, kept_text, min(kept_tokens, chunk.token_count), chunk.token_count, kept)


# -------------------------------------------------------------- pipeline


@dataclass
class OneShotResult:
    query: str
    answer: str
    selection: Selection
    crops: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    timing_ms: float = 0.0

    @property
    def evidence_ids(self) -> list[str]:
        return self.selection.ids

    def record(self, with_timing: bool = True) -> dict:
        rec = {
            "query": self.query,
            "stage_trace": self.selection.stage_trace,
            "chosen": [
                {"chunk_id": c.chunk_id, "relevance": round(c.relevance, 12), "tokens": c.tokens}
                for c in self.selection.chosen
            ],
            "total_tokens": self.selection.total_tokens,
            "answer": self.answer,
            "flags": self.flags,
            "warnings": self.selection.warnings,
            "retention": retention_ratio(self.selection.stage_trace, self.selection.stage_tokens),
        }
        if with_timing:
            rec["timing_ms"] = round(self.timing_ms, 3)
        return rec


def render_evidence(selection: Selection) -> list[str]:
    return [prompts.render_chunk(c.chunk_id, c.chunk.meta, c.chunk.text) for c in selection.chosen]


def run_oneshot(
    query: str,
    index: Index,
    corpus: CorpusStore,
    budget: Budget,
    rules: Optional[FilterRules],
    llm: LlmBackend,
    stages: Optional[dict] = None,
    crop_workers: int = 4,
) -> OneShotResult:
    """search_all -> token-constrained selection -> [filter] -> [crop] ->
    re-pack -> answer."""
    t0 = time.perf_counter()
    stages = {"filter": False, "crop": False, **(stages or {})}
    rules = rules or FilterRules()
    ranked = index.search_all(query)
    position = {s.chunk_id: i for i, s in enumerate(ranked)}
    sel = select_token_constrained(candidates_from_scored(ranked), budget)
    query_meta = extract_query_meta(query, corpus.gazetteer)

    if stages["filter"]:
        sel = chunk_filter(sel, query_meta, corpus, index, rules, query=query, budget=budget, ranked=ranked)

    crops: dict[str, CropResult] = {}
    if stages["crop"]:
        chunks = [c.chunk for c in sel.chosen]
        with ThreadPoolExecutor(max_workers=max(1, crop_workers)) as pool:
            results = list(pool.map(lambda ch: chunk_crop(ch, query, llm, corpus.tokenizer), chunks))
        cropped = []
        for cand, res in zip(sel.chosen, results):
            crops[res.chunk_id] = res
            if res.warning:
                sel.warnings.append(res.warning)
            chunk = dataclasses.replace(cand.chunk, text=res.kept_text, token_count=res.kept_tokens)
            cropped.append(Candidate(chunk, cand.relevance, res.kept_tokens))
        sel = sel.derive(cropped)
        sel.record("after_crop")
        # cropping frees budget; top it up with uncropped candidates
        taken = set(sel.ids)
        pool_cands = [
            c for c in candidates_from_scored(ranked)
            if c.chunk_id not in taken
            and not (stages["filter"] and is_droppable(c.chunk.meta, query_meta, rules))
        ]
        extra = greedy_pack(pool_cands, budget.capacity - sel.total_tokens)
        sel = sel.derive(sorted(sel.chosen + extra, key=lambda c: position[c.chunk_id]))
    sel.record("final")

    result = OneShotResult(query, "", sel, crops)
    if not sel.chosen:
        result.flags.append("empty_evidence")
    messages = [ChatMessage("user", prompts.oneshot_prompt(query, render_evidence(sel)))]
    try:
        result.answer = strip_think(llm.chat(messages).content)
    except RagnetError as exc:
        result.timing_ms = (time.perf_counter() - t0) * 1000
        exc.partial_trace = result.record()
        raise
    result.timing_ms = (time.perf_counter() - t0) * 1000
    return result


def retention_ratio(stage_trace: dict, stage_tokens: Optional[dict] = None) -> dict:
    """Share of the initially retrieved chunks still present after each stage.

    Chunks added by a stage do not count, so ratios stay in [0, 1]. A stage
    that did not run inherits the previous stage's ratio.
    """
    retrieved = stage_trace.get("retrieved") or []
    base = set(retrieved)
    base_tokens = (stage_tokens or {}).get("retrieved", {})
    total_tokens = sum(base_tokens.get(cid, 0) for cid in retrieved)
    counts, weighted = {}, {}
    prev_c, prev_w = 1.0, 1.0
    for stage in STAGES[1:]:
        ids = stage_trace.get(stage)
        if ids is None:
            counts[stage], weighted[stage] = prev_c, prev_w
            continue
        kept = base & set(ids)
        prev_c = counts[stage] = len(kept) / len(base) if base else 1.0
        if stage_tokens and total_tokens:
            toks = stage_tokens.get(stage, {})
            prev_w = weighted[stage] = sum(toks.get(cid, 0) for cid in kept) / total_tokens
        else:
            prev_w = weighted[stage] = prev_c
    return {"chunks": counts, "tokens": weighted}
