from __future__ import annotations

import itertools
import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES, CHUNK_TOKENS
from ragnet.corpus import Chunk, ChunkMeta, count_tokens
from ragnet.errors import BackendUnavailable, InstanceTooLarge
from ragnet.llm import BackendConfig, ChatMessage, FunctionBackend, make_backend
from ragnet.oneshot import (
    Budget,
    Candidate,
    FilterRules,
    Selection,
    candidates_from_scored,
    chunk_crop,
    chunk_filter,
    extract_query_meta,
    is_droppable,
    knapsack_exact,
    retention_ratio,
    run_oneshot,
    select_token_constrained,
    split_sentences,
)


def cand(cid: str, r: float, t: int, meta: ChunkMeta | None = None, text: str = "x") -> Candidate:
    return Candidate(Chunk(cid, cid.split("#")[0], text, t, meta or ChunkMeta(), (0, len(text))), r, t)


def brute_force(cands, capacity):
    """Every subset; optimum value and the lexicographically smallest id set
    attaining it (within 1e-9)."""
    best_v, best_ids = 0.0, ()
    for k in range(len(cands) + 1):
        for combo in itertools.combinations(cands, k):
            if sum(c.tokens for c in combo) > capacity:
                continue
            v = math.fsum(c.relevance for c in combo)
            ids = tuple(sorted(c.chunk_id for c in combo))
            if v > best_v + 1e-9 or (abs(v - best_v) <= 1e-9 and ids < best_ids):
                best_v, best_ids = v, ids
    return best_v, best_ids


def random_instance(rng, n_max=12, t_max=200, b_max=600):
    n = rng.randint(0, n_max)
    cands = [cand(f"c{i:02d}#0", rng.random(), rng.randint(1, t_max)) for i in range(n)]
    cands.sort(key=lambda c: (-c.relevance, c.chunk_id))
    budget = Budget(rng.randint(1, b_max) + 100, 100)
    return cands, budget


# ---------------------------------------------------------------- selection


def test_selection_trivial_examples():
    empty = select_token_constrained([], Budget(100, 10))
    assert empty.chosen == [] and empty.total_tokens == 0
    sel = select_token_constrained([cand("a#0", 0.9, 10), cand("b#0", 0.8, 10)], Budget(25, 10))
    assert sel.ids == ["a#0"]
    tiny = select_token_constrained([cand("a#0", 0.9, 50)], Budget(20, 10))
    assert tiny.chosen == [] and tiny.warnings


def test_knapsack_exact_examples():
    assert knapsack_exact([cand("only#0", 0.3, 5)], Budget(20, 10)).ids == ["only#0"]
    sel = knapsack_exact([cand("b#0", 0.5, 8), cand("a#0", 0.5, 8)], Budget(22, 10))
    assert sel.ids == ["a#0"]


def test_knapsack_exact_equals_enumeration_on_10_items():
    rng = random.Random(10)
    for _ in range(50):
        cands = [cand(f"i{i}#0", round(rng.random(), 3), rng.randint(1, 40)) for i in range(10)]
        budget = Budget(rng.randint(20, 150) + 5, 5)
        value, ids = brute_force(cands, budget.capacity)
        sel = knapsack_exact(cands, budget)
        assert sel.total_relevance == pytest.approx(value, abs=1e-9)
        assert tuple(sorted(sel.ids)) == ids


def test_knapsack_exact_bounds():
    big = [cand(f"x{i}#0", 0.5, 20000) for i in range(65)]
    with pytest.raises(InstanceTooLarge):
        knapsack_exact(big, Budget(10**6, 1))


@settings(max_examples=300, deadline=None)
@given(st.randoms(use_true_random=False))
def test_half_approximation(rnd):
    cands, budget = random_instance(rnd)
    greedy = select_token_constrained(cands, budget)
    exact = knapsack_exact(cands, budget)
    assert greedy.total_relevance >= 0.5 * exact.total_relevance - 1e-12
    assert greedy.total_tokens <= budget.capacity


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 400))
def test_monotone_budget(rnd, extra):
    cands, budget = random_instance(rnd)
    bigger = Budget(budget.max_tokens + extra, budget.reserve_tokens)
    small = select_token_constrained(cands, budget).total_relevance
    large = select_token_constrained(cands, bigger).total_relevance
    assert large >= small - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False))
def test_selection_no_duplicates_and_sums(rnd):
    cands, budget = random_instance(rnd)
    sel = select_token_constrained(cands + cands[:3], budget)
    assert len(set(sel.ids)) == len(sel.ids)
    assert sel.total_tokens == sum(c.tokens for c in sel.chosen) <= budget.capacity


# ------------------------------------------------------------------- filter


def test_query_meta_examples(gazetteer):
    m = extract_query_meta("flower cultivation in Kunming in 2023", gazetteer)
    assert m.years == {2023} and m.locations == {"kunming"}
    assert extract_query_meta("what are the rules", gazetteer).years == set()


def test_drop_rule_example():
    q = ChunkMeta(years={2023})
    rules = FilterRules()
    assert is_droppable(ChunkMeta(years={2019}), q, rules)
    assert not is_droppable(ChunkMeta(years={2023}), q, rules)
    assert not is_droppable(ChunkMeta(), q, rules)
    assert not is_droppable(ChunkMeta(years={2019, 2023}), q, rules)


_meta = st.builds(
    ChunkMeta,
    years=st.sets(st.integers(2018, 2024), max_size=3),
    locations=st.sets(st.sampled_from(["kunming", "harbin", "xiamen"]), max_size=2),
)


@settings(max_examples=300, deadline=None)
@given(_meta, _meta)
def test_filter_soundness(meta, qmeta):
    rules = FilterRules()
    fully_intersecting = all(
        not q_dim or not c_dim or (q_dim & c_dim)
        for q_dim, c_dim in ((qmeta.years, meta.years), (qmeta.locations, meta.locations))
    )
    if fully_intersecting:
        assert not is_droppable(meta, qmeta, rules)
    else:
        assert is_droppable(meta, qmeta, rules)


def test_filter_noop_without_query_meta(gov_store, gov_index):
    q = "what do applicants need"
    ranked = gov_index.search_all(q)
    sel = select_token_constrained(candidates_from_scored(ranked), Budget(5 * CHUNK_TOKENS + 100, 100))
    out = chunk_filter(sel, extract_query_meta(q, gov_store.gazetteer), gov_store, gov_index, FilterRules(),
                       query=q, budget=Budget(5 * CHUNK_TOKENS + 100, 100))
    assert out.ids == sel.ids


def test_filter_drops_wrong_year_and_keeps_survivors(gov_store, gov_index, gov_questions):
    budget = Budget(5 * CHUNK_TOKENS + 100, 100)
    for q in gov_questions:
        ranked = gov_index.search_all(q.question)
        sel = select_token_constrained(candidates_from_scored(ranked), budget)
        qm = extract_query_meta(q.question, gov_store.gazetteer)
        out = chunk_filter(sel, qm, gov_store, gov_index, FilterRules(), query=q.question, budget=budget,
                           ranked=ranked)
        survivors = [c for c in sel.ids if not is_droppable(gov_store.get(c).meta, qm, FilterRules())]
        assert set(survivors) <= set(out.ids)
        assert all(not is_droppable(gov_store.get(c).meta, qm, FilterRules()) for c in out.ids)
        assert out.total_tokens <= budget.capacity
        assert len(set(out.ids)) == len(out.ids)


# --------------------------------------------------------------------- crop


def _crop_cases():
    return [json.loads(l) for l in (FIXTURES / "crop_cases.jsonl").read_text().splitlines()]


def _backend_for(case):
    def fn(messages):
        if case["reply"] is None:
            raise BackendUnavailable("scripted outage")
        return case["reply"]

    return FunctionBackend(fn)


def _in_order_substrings(kept: str, original: str) -> bool:
    pos = 0
    for piece in split_sentences(kept):
        at = original.find(piece, pos)
        if at < 0:
            return False
        pos = at + len(piece)
    return True


@pytest.mark.parametrize("case", _crop_cases(), ids=lambda c: f"{c['case']}-{c['kind']}")
def test_crop_corpus(case):
    text = case["text"]
    chunk = Chunk("c#0", "c", text, count_tokens(text), ChunkMeta(), (0, len(text)))
    res = chunk_crop(chunk, "question", _backend_for(case))
    assert len(split_sentences(text)) == case["n_sentences"]
    assert res.failed_open == case["fails_open"]
    if case["fails_open"]:
        assert res.kept_text == text and res.warning
    else:
        sentences = split_sentences(text)
        assert res.kept_indices == case["expected_indices"]
        assert res.kept_text == "".join(sentences[i] for i in case["expected_indices"])
    assert _in_order_substrings(res.kept_text, text)
    assert 0 < res.kept_tokens <= res.original_tokens


def test_crop_identity_and_scripted_ratio():
    text = "Kunming grew flowers in 2023. Rain fell often. The flower area in Kunming doubled. Roads were built."
    chunk = Chunk("k#0", "k", text, count_tokens(text), ChunkMeta(), (0, len(text)))
    n = len(split_sentences(text))
    all_idx = FunctionBackend(lambda m: json.dumps(list(range(n))))
    assert chunk_crop(chunk, "q", all_idx).kept_text == text

    def keep_query_terms(messages):
        body = messages[-1].content
        keep = [int(line[1:line.index("]")]) for line in body.splitlines()
                if line.startswith("[") and "Kunming" in line]
        return json.dumps(keep)

    res = chunk_crop(chunk, "Kunming flowers", FunctionBackend(keep_query_terms))
    kept = "Kunming grew flowers in 2023. The flower area in Kunming doubled. "
    assert res.kept_text == kept
    assert res.kept_tokens / res.original_tokens == count_tokens(kept) / count_tokens(text)


# ----------------------------------------------------------------- pipeline


def test_run_oneshot_without_stages_is_plain_selection(gov_store, gov_index):
    q = "monthly rental subsidy for new graduates in Kunming in 2023"
    budget = Budget(5 * CHUNK_TOKENS + 100, 100)
    llm = make_backend(BackendConfig())
    res = run_oneshot(q, gov_index, gov_store, budget, None, llm, {"filter": False, "crop": False})
    plain = select_token_constrained(candidates_from_scored(gov_index.search_all(q)), budget)
    assert res.selection.ids == plain.ids
    rec = res.record()
    assert {"query", "stage_trace", "chosen", "answer", "timing_ms"} <= set(rec)
    assert rec["stage_trace"]["after_filter"] is None


def test_run_oneshot_deterministic_and_budget_safe(gov_store, gov_index, gov_questions):
    def cropper(messages):
        text = messages[-1].content
        if "Question:" in text and "### chunk" in text:
            return "answer"
        return "[0, 2]"

    budget = Budget(8 * CHUNK_TOKENS + 300, 300)
    for q in gov_questions:
        runs = [run_oneshot(q.question, gov_index, gov_store, budget, FilterRules(), FunctionBackend(cropper),
                            {"filter": True, "crop": True}) for _ in range(2)]
        assert runs[0].record(with_timing=False) == runs[1].record(with_timing=False)
        assert runs[0].selection.total_tokens <= budget.capacity
        st_ = runs[0].selection.stage_trace
        assert all(st_[s] is not None for s in ("retrieved", "after_filter", "after_crop", "final"))


def test_run_oneshot_empty_selection_flagged(gov_store, gov_index):
    res = run_oneshot("Kunming", gov_index, gov_store, Budget(110, 100), None, make_backend(BackendConfig()))
    assert res.selection.chosen == [] and "empty_evidence" in res.flags
    assert res.answer


def test_run_oneshot_answer_failure_keeps_partial_trace(gov_store, gov_index):
    def broken(messages):
        raise BackendUnavailable("down")

    with pytest.raises(BackendUnavailable) as err:
        run_oneshot("Kunming 2023", gov_index, gov_store, Budget(1000, 100), None, FunctionBackend(broken))
    assert err.value.partial_trace["stage_trace"]["retrieved"]


# ---------------------------------------------------------------- retention


def test_retention_examples():
    ids = [f"c{i}" for i in range(10)]
    trace = {"retrieved": ids, "after_filter": ids[:8], "after_crop": None, "final": ids[:8]}
    r = retention_ratio(trace)
    assert r["chunks"]["after_filter"] == pytest.approx(0.8)
    assert r["chunks"]["after_crop"] == pytest.approx(0.8)
    noop = retention_ratio({"retrieved": ids, "after_filter": None, "after_crop": None, "final": ids})
    assert all(v == 1.0 for v in noop["chunks"].values())
    assert retention_ratio({"retrieved": [], "after_filter": [], "after_crop": None, "final": []})["chunks"][
        "after_filter"] == 1.0


def test_retention_token_weighted():
    trace = {"retrieved": ["a", "b"], "after_filter": ["a", "b"], "after_crop": ["a", "b"], "final": ["a", "b"]}
    tokens = {"retrieved": {"a": 10, "b": 30}, "after_filter": {"a": 10, "b": 30},
              "after_crop": {"a": 5, "b": 15}, "final": {"a": 5, "b": 15}}
    r = retention_ratio(trace, tokens)
    assert r["chunks"]["after_crop"] == 1.0
    assert r["tokens"]["after_crop"] == pytest.approx(0.5)


def test_selection_helpers():
    s = Selection(chosen=[cand("a#0", 0.25, 3), cand("b#0", 0.5, 4)])
    assert s.total_relevance == 0.75 and s.total_tokens == 7 and s.ids == ["a#0", "b#0"]
    with pytest.raises(ValueError):
        Budget(100, 100)
    with pytest.raises(ValueError):
        Budget(0, 0)
    assert ChatMessage("assistant", "").content == ""
