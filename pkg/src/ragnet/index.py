"""Hybrid lexical (BM25) + dense (hashed bag-of-words) chunk index.

Scoring is an exhaustive scan: both signals are computed for every chunk,
min-max normalised over the corpus, and blended with the configured
weights. Index directory layout::

    index_manifest.json   corpus hash, configs, chunk order, chunk lengths
    vectors.bin           float32 little-endian, row-major (n_chunks x dim)
    postings.jsonl        {"term": str, "postings": [[chunk_id, tf], ...]}
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import httpx
import numpy as np

from .corpus import Chunk, CorpusStore, words
from .errors import ConfigError, EmbedderUnavailable, EmptyQuery, StaleIndex

BM25_K1 = 1.5
BM25_B = 0.75


@dataclass(frozen=True)
class EmbedderConfig:
    mode: str = "hashed_bow"
    dim: int = 256
    endpoint: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("hashed_bow", "external"):
            raise ConfigError(f"unknown embedder mode {self.mode!r}")
        if (self.mode == "external") != (self.endpoint is not None):
            raise ConfigError("endpoint must be set iff mode == 'external'")
        if self.dim < 8:
            raise ConfigError("dim must be >= 8")


@dataclass(frozen=True)
class IndexConfig:
    lexical_weight: float = 0.3
    dense_weight: float = 0.7
    k_default: int = 5

    def __post_init__(self):
        for w in (self.lexical_weight, self.dense_weight):
            if not 0.0 <= w <= 1.0:
                raise ConfigError("index weights must lie in [0, 1]")
        if abs(self.lexical_weight + self.dense_weight - 1.0) > 1e-9:
            raise ConfigError("lexical_weight + dense_weight must equal 1")
        if self.k_default < 1:
            raise ConfigError("k_default must be positive")


@dataclass
class ScoredChunk:
    chunk_id: str
    score: float
    chunk: Chunk


# ----------------------------------------------------------------- embed


def _bucket(token: str, dim: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return (h >> 1) % dim, (1.0 if h & 1 else -1.0)


def _hashed_bow(text: str, dim: int) -> np.ndarray:
    toks = words(text)
    if not toks:
        stripped = text.strip()
        if not stripped:
            raise EmptyQuery("cannot embed empty text")
        toks = [stripped]
    vec = np.zeros(dim, dtype=np.float64)
    for tok, n in Counter(toks).items():
        b, sign = _bucket(tok, dim)
        vec[b] += sign * n
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every token cancelled out in signed hashing; fall back to a fixed bucket
        b, sign = _bucket(" ".join(sorted(set(toks))), dim)
        vec[b] = sign
        norm = 1.0
    return vec / norm


def _external_embed(texts: list[str], embedder: EmbedderConfig) -> np.ndarray:
    try:
        resp = httpx.post(embedder.endpoint, json={"input": texts}, timeout=60.0)
        resp.raise_for_status()
        arr = np.asarray(resp.json()["embeddings"], dtype=np.float64)
    except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
        raise EmbedderUnavailable(f"embedder endpoint {embedder.endpoint}: {exc}") from exc
    if arr.shape != (len(texts), embedder.dim):
        raise EmbedderUnavailable(f"embedder returned shape {arr.shape}, expected {(len(texts), embedder.dim)}")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EmbedderUnavailable("embedder returned a zero vector")
    return arr / norms


def embed(text: str, embedder: Optional[EmbedderConfig] = None) -> np.ndarray:
    """Unit-norm embedding of ``text``."""
    embedder = embedder or EmbedderConfig()
    if not text or not text.strip():
        raise EmptyQuery("cannot embed empty text")
    if embedder.mode == "hashed_bow":
        return _hashed_bow(text, embedder.dim)
    return _external_embed([text], embedder)[0]


def embed_many(texts: list[str], embedder: EmbedderConfig, batch: int = 64) -> np.ndarray:
    if embedder.mode == "hashed_bow":
        return np.stack([_hashed_bow(t, embedder.dim) for t in texts]) if texts else np.zeros((0, embedder.dim))
    parts = [_external_embed(texts[i : i + batch], embedder) for i in range(0, len(texts), batch)]
    return np.concatenate(parts) if parts else np.zeros((0, embedder.dim))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalise into [0, 1].

    A constant pool maps to 1.0 where the raw value is positive and 0.0
    otherwise, so a lone matching chunk still scores 1.
    """
    if values.size == 0:
        return values
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12:
        return np.where(values > 0, 1.0, 0.0)
    return (values - lo) / (hi - lo)


# ----------------------------------------------------------------- index


class Index:
    def __init__(
        self,
        corpus: CorpusStore,
        embedder: EmbedderConfig,
        cfg: IndexConfig,
        vectors: np.ndarray,
        postings: dict[str, list[tuple[int, int]]],
        lengths: np.ndarray,
        corpus_hash: Optional[str] = None,
    ):
        self.corpus = corpus
        self.embedder = embedder
        self.cfg = cfg
        self.vectors = np.ascontiguousarray(vectors, dtype="<f4")
        self.postings = postings
        self.lengths = np.asarray(lengths, dtype=np.float64)
        self.chunk_ids = [c.chunk_id for c in corpus.chunks]
        self.corpus_hash = corpus_hash or corpus.content_hash()
        n = len(self.chunk_ids)
        self.avgdl = float(self.lengths.mean()) if n else 0.0
        self.idf = {
            t: math.log(1.0 + (n - len(p) + 0.5) / (len(p) + 0.5)) for t, p in postings.items()
        }

    def __len__(self):
        return len(self.chunk_ids)

    # scoring ------------------------------------------------------------

    def bm25_scores(self, query: str) -> np.ndarray:
        scores = np.zeros(len(self), dtype=np.float64)
        for term in sorted(set(words(query))):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf[term]
            for row, tf in plist:
                norm = BM25_K1 * (1 - BM25_B + BM25_B * self.lengths[row] / self.avgdl)
                scores[row] += idf * tf * (BM25_K1 + 1) / (tf + norm)
        return scores

    def dense_scores(self, query: str) -> np.ndarray:
        q = embed(query, self.embedder)
        return self.vectors.astype(np.float64) @ q

    def scores(self, query: str) -> np.ndarray:
        if not query or not query.strip():
            raise EmptyQuery()
        blended = self.cfg.dense_weight * minmax(self.dense_scores(query)) + self.cfg.lexical_weight * minmax(
            self.bm25_scores(query)
        )
        return np.clip(blended, 0.0, 1.0)

    def search_all(self, query: str) -> list[ScoredChunk]:
        s = self.scores(query)
        order = sorted(range(len(self)), key=lambda i: (-s[i], self.chunk_ids[i]))
        return [ScoredChunk(self.chunk_ids[i], float(s[i]), self.corpus.chunks[i]) for i in order]

    def search(self, query: str, k: Optional[int] = None) -> list[ScoredChunk]:
        k = self.cfg.k_default if k is None else k
        if k < 1:
            raise ValueError("k must be >= 1")
        return self.search_all(query)[:k]

    # persistence --------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format": "ragnet-index/1",
            "corpus_hash": self.corpus_hash,
            "embedder": asdict(self.embedder),
            "index": asdict(self.cfg),
            "bm25": {"k1": BM25_K1, "b": BM25_B},
            "dim": int(self.vectors.shape[1]),
            "chunk_ids": self.chunk_ids,
            "lengths": [int(x) for x in self.lengths],
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "index_manifest.json").write_text(
            json.dumps(self.manifest(), ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out / "vectors.bin").write_bytes(self.vectors.tobytes(order="C"))
        lines = []
        for term in sorted(self.postings):
            plist = [[self.chunk_ids[row], tf] for row, tf in self.postings[term]]
            lines.append(json.dumps({"term": term, "postings": plist}, ensure_ascii=False, separators=(",", ":")))
        (out / "postings.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        return out

    @classmethod
    def load(cls, index_dir, corpus: CorpusStore) -> "Index":
        root = Path(index_dir)
        manifest = json.loads((root / "index_manifest.json").read_text(encoding="utf-8"))
        if manifest["corpus_hash"] != corpus.content_hash() or manifest["chunk_ids"] != [
            c.chunk_id for c in corpus.chunks
        ]:
            raise StaleIndex(f"index at {root} was built for a different corpus")
        dim = manifest["dim"]
        vectors = np.frombuffer((root / "vectors.bin").read_bytes(), dtype="<f4").reshape(-1, dim)
        row_of = {cid: i for i, cid in enumerate(manifest["chunk_ids"])}
        postings = {}
        for line in (root / "postings.jsonl").read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                postings[rec["term"]] = [(row_of[cid], tf) for cid, tf in rec["postings"]]
        return cls(
            corpus,
            EmbedderConfig(**manifest["embedder"]),
            IndexConfig(**manifest["index"]),
            vectors,
            postings,
            np.asarray(manifest["lengths"]),
            manifest["corpus_hash"],
        )


def build_index(
    corpus: CorpusStore,
    embedder: Optional[EmbedderConfig] = None,
    cfg: Optional[IndexConfig] = None,
    out_dir=None,
) -> Index:
    embedder = embedder or EmbedderConfig()
    cfg = cfg or IndexConfig()
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    vectors = embed_many([c.text for c in corpus.chunks], embedder)
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for row, chunk in enumerate(corpus.chunks):
        toks = words(chunk.text)
        lengths.append(len(toks))
        for term, tf in sorted(Counter(toks).items()):
            postings.setdefault(term, []).append((row, tf))
    index = Index(corpus, embedder, cfg, vectors, postings, np.asarray(lengths))
    if out_dir is not None:
        index.save(out_dir)
    return index
