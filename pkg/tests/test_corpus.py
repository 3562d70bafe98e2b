from __future__ import annotations

import json
import math
import re
import unicodedata

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ragnet.corpus import (
    Chunk,
    ChunkingConfig,
    CorpusStore,
    Document,
    Gazetteer,
    TokenizerConfig,
    chunk_document,
    count_tokens,
    extract_metadata,
    ingest_documents,
    unit_bounds,
)
from ragnet.errors import ConfigError, DuplicateDocument, IngestError, TokenizerUnavailable

# ------------------------------------------------------------------ oracles


def _is_cjk(ch: str) -> bool:
    o = ord(ch)
    return 0x3400 <= o <= 0x4DBF or 0x4E00 <= o <= 0x9FFF or 0xF900 <= o <= 0xFAFF


def _is_word_char(ch: str) -> bool:
    return ch == "_" or unicodedata.category(ch)[0] in "LNM"


def oracle_token_count(text: str) -> int:
    """Character walk: a CJK ideograph is one token, a run of other word
    characters is one token, any other non-space character is one token."""
    n, prev_word = 0, False
    for ch in text:
        if _is_cjk(ch):
            n += 1
            prev_word = False
        elif _is_word_char(ch):
            if not prev_word:
                n += 1
            prev_word = True
        else:
            if not ch.isspace():
                n += 1
            prev_word = False
    return n


def oracle_spans(units, tok, target, overlap):
    """Brute-force re-derivation of the packing rule from its definition."""
    spans, i, n = [], 0, len(units)
    while i < n:
        j = i + 1
        while j < n and sum(tok[i:j + 1]) <= target:
            j += 1
        spans.append((units[i][0], units[j - 1][1]))
        if j >= n:
            break
        ok = [s for s in range(i + 1, j + 1)
              if sum(tok[s:j]) <= overlap and (s == j or sum(tok[s:j + 1]) <= target)]
        i = min(ok)
    return spans


YEAR_ORACLE = re.compile(r"\d+")


# --------------------------------------------------------------- tokenizer


def test_count_tokens_basics():
    assert count_tokens("") == 0
    assert count_tokens("aaaa bbbb", TokenizerConfig("chars_div4")) == 3
    assert count_tokens("Hello, world!") == 4
    assert count_tokens("花卉种植") == 4


def test_count_tokens_matches_oracle_on_long_text():
    words = [f"w{i % 97}" for i in range(1000)]
    text = " ".join(words) + ". Done, ok?"
    assert count_tokens(text) == oracle_token_count(text) == 1000 + 5


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("ab Zé1_ ,.;!?-'\"\n\t花卉种植。") + ["٣", "ß"]), max_size=80))
def test_count_tokens_oracle_property(text):
    assert count_tokens(text) == oracle_token_count(text)


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=40), st.text(min_size=1, max_size=40))
def test_count_tokens_monotone_under_concatenation(a, b):
    assert count_tokens(a + b) >= max(count_tokens(a), count_tokens(b))


def test_external_tokenizer_unreachable():
    cfg = TokenizerConfig("external", "http://127.0.0.1:9/count")
    with pytest.raises(TokenizerUnavailable):
        count_tokens("some text", cfg)


def test_tokenizer_config_validation():
    with pytest.raises(ConfigError):
        TokenizerConfig("external")
    with pytest.raises(ConfigError):
        TokenizerConfig("unicode_words", "http://x")
    with pytest.raises(ConfigError):
        ChunkingConfig(target_tokens=10, overlap_tokens=10)


# ---------------------------------------------------------------- metadata


def test_metadata_example_from_exhibition_sentence():
    m = extract_metadata("The first exhibition was held in 2023 in Kunming", Gazetteer(["kunming"]))
    assert m.years == {2023}
    assert m.locations == {"kunming"}


def test_metadata_empty_text():
    m = extract_metadata("", Gazetteer(["kunming"]))
    assert m.years == set() and m.locations == set() and m.entities == set()


def test_year_ranges_endpoints_and_expansion():
    assert extract_metadata("Covered 1999-2001 only.").years == {1999, 2001}
    assert extract_metadata("Covered 1999–2001 only.", expand_year_ranges=True).years == {1999, 2000, 2001}


@pytest.mark.parametrize("text", ["v3.2023", "12023 units", "2023.5 kg", "1,2023", "999 and 3000"])
def test_non_year_numbers_ignored(text):
    assert extract_metadata(text).years == set()


def test_gazetteer_longest_match_case_insensitive():
    g = Gazetteer(["Xi'an", "New Kunming District", "Kunming"])
    assert g.find("Visitors to NEW KUNMING DISTRICT and xi'an") == {"new kunming district", "xi'an"}
    assert g.find("Kunmingese food") == set()


def test_entities_normalized():
    m = extract_metadata('The State Council approved the "Green Corridor" plan with UNESCO support.')
    assert {"state council", "green corridor", "unesco"} <= m.entities
    assert all(e == e.casefold().strip() and e for e in m.entities)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.integers(0, 4000).map(str), st.sampled_from(["in", "-", ".", ",", "年", " "])),
                max_size=25))
def test_years_appear_verbatim(parts):
    text = " ".join(parts)
    years = extract_metadata(text).years
    digits = set(YEAR_ORACLE.findall(text))
    for y in years:
        assert 1000 <= y <= 2999
        assert str(y) in digits


# ---------------------------------------------------------------- chunking


def test_three_paragraph_document_against_hand_spans():
    p = [" ".join(["alpha"] * 20), " ".join(["beta"] * 8), " ".join(["gamma"] * 30)]
    body = "\n\n".join(p)
    doc = Document("d", "t", body)
    chunks = chunk_document(doc, ChunkingConfig(50, 10, "paragraph"))
    b2 = body.index("beta")
    assert [c.char_span for c in chunks] == [(0, body.index("gamma")), (b2, len(body))]
    assert [c.token_count for c in chunks] == [28, 38]
    assert [c.chunk_id for c in chunks] == ["d#0", "d#1"]


def test_single_sentence_document_is_one_chunk():
    chunks = chunk_document(Document("one", "t", "Just one sentence here."))
    assert len(chunks) == 1 and chunks[0].chunk_id == "one#0"
    assert chunks[0].text == "Just one sentence here."


def test_hard_mode_even_split():
    body = " ".join(f"w{i}" for i in range(40))
    chunks = chunk_document(Document("h", "t", body), ChunkingConfig(20, 0, "hard"))
    assert [c.token_count for c in chunks] == [20, 20]


_para = st.lists(st.sampled_from(["alpha", "beta", "Kunming", "2023", "x", "long" * 3]), min_size=1, max_size=30)
_sentence = _para.map(lambda ws: " ".join(ws) + ".")
_paragraph = st.lists(_sentence, min_size=1, max_size=4).map(" ".join)


@settings(max_examples=150, deadline=None)
@given(
    st.lists(_paragraph, min_size=1, max_size=6).map("\n\n".join),
    st.sampled_from(["sentence", "paragraph", "hard"]),
    st.integers(5, 60),
    st.integers(0, 20),
)
def test_chunking_matches_oracle_and_covers_body(body, mode, target, overlap):
    if overlap >= target:
        overlap = target - 1
    cfg = ChunkingConfig(target, overlap, mode)
    chunks = chunk_document(Document("doc", "t", body), cfg)
    units = unit_bounds(body, mode)
    assert "".join(body[s:e] for s, e in units) == body
    tok = [count_tokens(body[s:e]) for s, e in units]
    assert [c.char_span for c in chunks] == oracle_spans(units, tok, target, overlap)
    # coverage: contiguous or overlapping windows from 0 to len(body)
    assert chunks[0].char_span[0] == 0 and chunks[-1].char_span[1] == len(body)
    for a, b in zip(chunks, chunks[1:]):
        assert b.char_span[0] <= a.char_span[1]
        assert b.char_span[0] > a.char_span[0]
    slack = max(tok)
    for k, c in enumerate(chunks):
        assert c.text == body[c.char_span[0]:c.char_span[1]]
        assert c.token_count == count_tokens(c.text)
        assert c.token_count <= target + slack
        assert c.chunk_id == f"doc#{k}"


# ----------------------------------------------------------------- ingest


def test_ingest_empty_list_gives_valid_manifest(tmp_path):
    store = ingest_documents([], out_dir=tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["n_documents"] == 0 and manifest["n_chunks"] == 0
    assert len(store) == 0


def test_ingest_text_and_jsonl(tmp_path):
    (tmp_path / "a.txt").write_text("Title line\n\nIn 2021 Kunming opened a park.", encoding="utf-8")
    (tmp_path / "b.jsonl").write_text(
        json.dumps({"doc_id": "b1", "title": "B", "body": "Body one.", "publish_year": 2020}) + "\n", encoding="utf-8")
    store = ingest_documents([tmp_path], gazetteer=Gazetteer(["Kunming"]))
    assert set(store.documents) == {"a", "b1"}
    assert store.documents["a"].title == "Title line"
    assert store.documents["b1"].publish_year == 2020
    assert store.get("a#0").meta.locations == {"kunming"}


def test_ingest_errors(tmp_path):
    with pytest.raises(IngestError) as err:
        ingest_documents([tmp_path / "missing.txt"])
    assert "missing.txt" in str(err.value)
    rec = json.dumps({"doc_id": "x", "title": "", "body": "text"})
    (tmp_path / "d.jsonl").write_text(rec + "\n" + rec + "\n", encoding="utf-8")
    with pytest.raises(DuplicateDocument):
        ingest_documents([tmp_path / "d.jsonl"])
    (tmp_path / "e.jsonl").write_text(json.dumps({"doc_id": "e", "body": "   "}) + "\n", encoding="utf-8")
    with pytest.raises(IngestError):
        ingest_documents([tmp_path / "e.jsonl"])


def test_store_roundtrip_and_determinism(tmp_path, gazetteer):
    from conftest import GOV, GOV_CHUNKING

    a = ingest_documents([GOV / "corpus"], GOV_CHUNKING, gazetteer=gazetteer, out_dir=tmp_path / "a")
    b = ingest_documents([GOV / "corpus"], GOV_CHUNKING, gazetteer=gazetteer, out_dir=tmp_path / "b")
    for name in ("manifest.json", "chunks.jsonl", "docs.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    loaded = CorpusStore.load(tmp_path / "a")
    assert loaded.content_hash() == a.content_hash() == b.content_hash()
    assert [c.to_dict() for c in loaded] == [c.to_dict() for c in a]
    line = json.loads((tmp_path / "a" / "chunks.jsonl").read_text().splitlines()[0])
    assert set(line) == {"chunk_id", "doc_id", "text", "token_count", "meta", "char_span"}


def test_fixture_corpus_shape(gov_store):
    from conftest import CHUNK_TOKENS

    assert len(gov_store) >= 200
    assert {c.token_count for c in gov_store} == {CHUNK_TOKENS}
    for c in gov_store:
        doc = gov_store.documents[c.doc_id]
        assert doc.body[c.char_span[0]:c.char_span[1]] == c.text
        assert c.meta.locations
    assert sum(1 for c in gov_store if c.meta.years) == 288


def test_neighbors(gov_store):
    assert [c.chunk_id for c in gov_store.neighbors("kunming-housing#0")] == ["kunming-housing#1"]
    assert [c.chunk_id for c in gov_store.neighbors("kunming-housing#3")] == ["kunming-housing#2", "kunming-housing#4"]
    assert isinstance(gov_store.get("kunming-review#0"), Chunk)
    assert math.isclose(sum(c.token_count for c in gov_store), 72 * len(gov_store))
