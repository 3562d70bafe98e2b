"""Document ingestion, chunking, metadata extraction and token counting.

A corpus directory holds three UTF-8 files:

* ``manifest.json`` - configs, counts and a content hash
* ``docs.jsonl``    - one :class:`Document` per line
* ``chunks.jsonl``  - one :class:`Chunk` per line
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import httpx

from .errors import ConfigError, DuplicateDocument, IngestError, TokenizerUnavailable

CJK = "㐀-䶿一-鿿豈-﫿"
# one token per word run, per CJK ideograph, per punctuation mark
TOKEN_RE = re.compile(rf"[{CJK}]|[^\W{CJK}]+|[^\w\s]")
WORD_RE = re.compile(rf"[{CJK}]|[^\W{CJK}]+")

SENTENCE_BREAK_RE = re.compile(
    r"[.!?]+[\"'”’)\]]*\s+|[。！？]+[”’」』)]*\s*|\n[ \t]*\n\s*"
)
PARAGRAPH_BREAK_RE = re.compile(r"\n[ \t]*\n\s*")

BOUNDARY_MODES = ("sentence", "paragraph", "hard")
TOKENIZER_MODES = ("unicode_words", "chars_div4", "external")


@dataclass(frozen=True)
class TokenizerConfig:
    mode: str = "unicode_words"
    external_endpoint: Optional[str] = None

    def __post_init__(self):
        if self.mode not in TOKENIZER_MODES:
            raise ConfigError(f"unknown tokenizer mode {self.mode!r}")
        if (self.mode == "external") != (self.external_endpoint is not None):
            raise ConfigError("external_endpoint must be set iff mode == 'external'")


@dataclass(frozen=True)
class ChunkingConfig:
    target_tokens: int = 512
    overlap_tokens: int = 64
    boundary_mode: str = "sentence"

    def __post_init__(self):
        if self.target_tokens <= 0:
            raise ConfigError("target_tokens must be positive")
        if not 0 <= self.overlap_tokens < self.target_tokens:
            raise ConfigError("overlap_tokens must be in [0, target_tokens)")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ConfigError(f"unknown boundary_mode {self.boundary_mode!r}")


@dataclass
class ChunkMeta:
    years: set = field(default_factory=set)
    locations: set = field(default_factory=set)
    entities: set = field(default_factory=set)
    extra: dict = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not (self.years or self.locations or self.entities)

    def to_dict(self) -> dict:
        return {
            "years": sorted(self.years),
            "locations": sorted(self.locations),
            "entities": sorted(self.entities),
            "extra": dict(sorted(self.extra.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkMeta":
        return cls(
            years=set(d.get("years", ())),
            locations=set(d.get("locations", ())),
            entities=set(d.get("entities", ())),
            extra=dict(d.get("extra", {})),
        )


@dataclass
class Document:
    doc_id: str
    title: str
    body: str
    source_path: str = ""
    publish_year: Optional[int] = None


@dataclass
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    meta: ChunkMeta
    char_span: tuple

    @property
    def ordinal(self) -> int:
        return int(self.chunk_id.rsplit("#", 1)[1])

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "text": self.text,
            "token_count": self.token_count,
            "meta": self.meta.to_dict(),
            "char_span": list(self.char_span),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Chunk":
        return cls(
            chunk_id=d["chunk_id"],
            doc_id=d["doc_id"],
            text=d["text"],
            token_count=int(d["token_count"]),
            meta=ChunkMeta.from_dict(d["meta"]),
            char_span=tuple(d["char_span"]),
        )


def make_chunk_id(doc_id: str, ordinal: int) -> str:
    return f"{doc_id}#{ordinal}"


# ---------------------------------------------------------------- tokens


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text)


def words(text: str) -> list[str]:
    """Case-folded word tokens, punctuation dropped."""
    return [w.casefold() for w in WORD_RE.findall(text)]


def count_tokens(text: str, tokenizer: Optional[TokenizerConfig] = None) -> int:
    tokenizer = tokenizer or TokenizerConfig()
    if tokenizer.mode == "unicode_words":
        return sum(1 for _ in TOKEN_RE.finditer(text))
    if tokenizer.mode == "chars_div4":
        return math.ceil(len(text) / 4)
    return _external_count(text, tokenizer.external_endpoint)


def _external_count(text: str, endpoint: str) -> int:
    # wire format: POST {"input": text} -> {"token_count": n}
    if not text:
        return 0
    try:
        resp = httpx.post(endpoint, json={"input": text}, timeout=30.0)
        resp.raise_for_status()
        n = resp.json()["token_count"]
    except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
        raise TokenizerUnavailable(f"tokenizer endpoint {endpoint}: {exc}") from exc
    if not isinstance(n, int) or n < 0:
        raise TokenizerUnavailable(f"tokenizer endpoint {endpoint} returned {n!r}")
    return n


# -------------------------------------------------------------- metadata

YEAR_RE = re.compile(r"(?<![\d.,])([12]\d{3})(?!\d|[.,]\d)")
YEAR_RANGE_RE = re.compile(
    r"(?<![\d.,])([12]\d{3})\s*(?:-|\u2013|\u2014|~|to|至|到)\s*([12]\d{3})(?!\d)"
)
QUOTED_RE = re.compile(
    r"\"([^\"\n]{2,80})\"|“([^”\n]{2,80})”|(?<!\w)'([^'\n]{2,80})'(?!\w)"
    r"|‘([^’\n]{2,80})’|「([^」\n]{1,80})」|《([^》\n]{1,80})》"
)
_CAP = r"[A-Z][\w’'\-]*"
CAPSPAN_RE = re.compile(rf"{_CAP}(?:(?:\s+|\s*·\s*)(?:(?:of|the|and|for)\s+)?{_CAP})+")
CAPWORD_RE = re.compile(r"\b[A-Z][\w\-]+")
_LEADING_STOP = {"the", "a", "an", "in", "on", "at", "by", "for", "of", "and", "this", "that"}
_SINGLE_STOP = _LEADING_STOP | {
    "what", "which", "who", "when", "where", "why", "how", "is", "are", "was", "were",
    "it", "its", "i", "can", "does", "do", "did", "article", "section", "chapter", "no",
}


def normalize_name(s: str) -> str:
    s = re.sub(r"\s+", " ", s.casefold()).strip()
    return s.strip(" \t.,;:!?\"'()[]{}“”‘’")


class Gazetteer:
    """Case-insensitive longest-match location lexicon."""

    def __init__(self, names: Iterable[str] = ()):
        self.names = frozenset(n for n in (normalize_name(x) for x in names) if n)
        self._pattern = None
        if self.names:
            alts = []
            for name in sorted(self.names, key=lambda n: (-len(n), n)):
                pat = re.escape(name).replace(r"\ ", r"\s+")
                if name[0].isascii() and name[0].isalnum():
                    pat = r"(?<![^\W_])" + pat
                if name[-1].isascii() and name[-1].isalnum():
                    pat = pat + r"(?![^\W_])"
                alts.append(pat)
            self._pattern = re.compile("|".join(alts))

    @classmethod
    def from_file(cls, path) -> "Gazetteer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(l for l in lines if l.strip() and not l.lstrip().startswith("#"))

    def find(self, text: str) -> set:
        if self._pattern is None:
            return set()
        return {normalize_name(m.group(0)) for m in self._pattern.finditer(text.casefold())}

    def __len__(self):
        return len(self.names)


def extract_years(text: str, expand_ranges: bool = False) -> set:
    years = {int(m.group(1)) for m in YEAR_RE.finditer(text)}
    for m in YEAR_RANGE_RE.finditer(text):
        lo, hi = int(m.group(1)), int(m.group(2))
        years.update((lo, hi))
        if expand_ranges and lo < hi:
            years.update(range(lo, hi + 1))
    return years


def _at_sentence_start(text: str, pos: int) -> bool:
    i = pos - 1
    while i >= 0 and (text[i].isspace() or text[i] in "\"'“‘(["):
        i -= 1
    return i < 0 or text[i] in ".!?:\n。！？"


def extract_entities(text: str) -> set:
    found = set()
    for m in QUOTED_RE.finditer(text):
        found.add(next(g for g in m.groups() if g is not None))
    covered = []
    for m in CAPSPAN_RE.finditer(text):
        span = m.group(0).split()
        while span and span[0].casefold() in _LEADING_STOP:
            span = span[1:]
        if len(span) >= 2 or (span and "·" in span[0]):
            found.add(" ".join(span))
        covered.append((m.start(), m.end()))
    for m in CAPWORD_RE.finditer(text):
        w = m.group(0)
        if w.casefold() in _SINGLE_STOP:
            continue
        if w.isupper() and len(w) >= 2:
            found.add(w)
        elif not _at_sentence_start(text, m.start()) and not any(s <= m.start() < e for s, e in covered):
            found.add(w)
    out = set()
    for e in found:
        n = normalize_name(e)
        if n and not n.isdigit():
            out.add(n)
    return out


def extract_metadata(text: str, gazetteer: Optional[Gazetteer] = None, expand_year_ranges: bool = False) -> ChunkMeta:
    gazetteer = gazetteer or Gazetteer()
    return ChunkMeta(
        years=extract_years(text, expand_year_ranges),
        locations=gazetteer.find(text),
        entities=extract_entities(text),
    )


# -------------------------------------------------------------- chunking


def unit_bounds(body: str, boundary_mode: str) -> list[tuple[int, int]]:
    """Split ``body`` into unsplittable units that tile it exactly.

    Whitespace following a unit belongs to that unit, so consecutive units
    concatenate back to the body.
    """
    n = len(body)
    if n == 0:
        return []
    if boundary_mode == "hard":
        starts = [m.start() for m in TOKEN_RE.finditer(body)]
    elif boundary_mode == "sentence":
        starts = [m.end() for m in SENTENCE_BREAK_RE.finditer(body)]
    elif boundary_mode == "paragraph":
        starts = [m.end() for m in PARAGRAPH_BREAK_RE.finditer(body)]
    else:
        raise ConfigError(f"unknown boundary_mode {boundary_mode!r}")
    cuts = sorted({0, *(s for s in starts if 0 < s < n)})
    return list(zip(cuts, cuts[1:] + [n]))


def chunk_document(
    doc: Document,
    chunking: Optional[ChunkingConfig] = None,
    tokenizer: Optional[TokenizerConfig] = None,
    gazetteer: Optional[Gazetteer] = None,
) -> list[Chunk]:
    chunking = chunking or ChunkingConfig()
    body = doc.body
    units = unit_bounds(body, chunking.boundary_mode)
    tok = [count_tokens(body[s:e], tokenizer) for s, e in units]
    target, overlap = chunking.target_tokens, chunking.overlap_tokens

    spans = []
    i, n = 0, len(units)
    while i < n:
        j, total = i, 0
        while j < n and (j == i or total + tok[j] <= target):
            total += tok[j]
            j += 1
        spans.append((units[i][0], units[j - 1][1]))
        if j >= n:
            break
        s, acc = j, 0
        while s - 1 > i and acc + tok[s - 1] <= overlap:
            s -= 1
            acc += tok[s]
        # the next window must still admit unit j
        while s < j and acc + tok[j] > target:
            acc -= tok[s]
            s += 1
        i = s

    chunks = []
    for ordinal, (start, end) in enumerate(spans):
        text = body[start:end]
        chunks.append(
            Chunk(
                chunk_id=make_chunk_id(doc.doc_id, ordinal),
                doc_id=doc.doc_id,
                text=text,
                token_count=count_tokens(text, tokenizer),
                meta=extract_metadata(text, gazetteer),
                char_span=(start, end),
            )
        )
    return chunks


# ----------------------------------------------------------------- store


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


class CorpusStore:
    """Documents and their chunks. Treat as immutable once built."""

    def __init__(
        self,
        documents: Iterable[Document] = (),
        chunks: Iterable[Chunk] = (),
        chunking: Optional[ChunkingConfig] = None,
        tokenizer: Optional[TokenizerConfig] = None,
        gazetteer: Optional[Gazetteer] = None,
    ):
        self.documents = {d.doc_id: d for d in documents}
        self.chunks = list(chunks)
        self.chunking = chunking or ChunkingConfig()
        self.tokenizer = tokenizer or TokenizerConfig()
        self.gazetteer = gazetteer or Gazetteer()
        self._by_id = {c.chunk_id: c for c in self.chunks}
        self._by_doc: dict[str, list[Chunk]] = {}
        for c in self.chunks:
            self._by_doc.setdefault(c.doc_id, []).append(c)

    def __len__(self):
        return len(self.chunks)

    def __contains__(self, chunk_id):
        return chunk_id in self._by_id

    def __iter__(self) -> Iterator[Chunk]:
        return iter(self.chunks)

    def get(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]

    def doc_chunks(self, doc_id: str) -> list[Chunk]:
        return self._by_doc.get(doc_id, [])

    def neighbors(self, chunk_id: str) -> list[Chunk]:
        c = self._by_id[chunk_id]
        siblings = self._by_doc[c.doc_id]
        k = c.ordinal
        return [siblings[j] for j in (k - 1, k + 1) if 0 <= j < len(siblings)]

    def count_tokens(self, text: str) -> int:
        return count_tokens(text, self.tokenizer)

    # serialization -------------------------------------------------------

    def _docs_lines(self) -> list[str]:
        return [_dumps(asdict(d)) for d in self.documents.values()]

    def _chunk_lines(self) -> list[str]:
        return [_dumps(c.to_dict()) for c in self.chunks]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for line in self._docs_lines() + self._chunk_lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "format": "ragnet-corpus/1",
            "chunking": asdict(self.chunking),
            "tokenizer": asdict(self.tokenizer),
            "gazetteer": sorted(self.gazetteer.names),
            "n_documents": len(self.documents),
            "n_chunks": len(self.chunks),
            "total_tokens": sum(c.token_count for c in self.chunks),
            "corpus_hash": self.content_hash(),
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, lines in (("docs.jsonl", self._docs_lines()), ("chunks.jsonl", self._chunk_lines())):
            (out / name).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        manifest = json.dumps(self.manifest(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
        (out / "manifest.json").write_text(manifest, encoding="utf-8")
        return out

    @classmethod
    def load(cls, corpus_dir) -> "CorpusStore":
        root = Path(corpus_dir)
        try:
            manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
            docs = [Document(**json.loads(l)) for l in _read_lines(root / "docs.jsonl")]
            chunks = [Chunk.from_dict(json.loads(l)) for l in _read_lines(root / "chunks.jsonl")]
        except OSError as exc:
            raise IngestError(root, f"cannot read corpus ({exc.strerror})") from exc
        return cls(
            docs,
            chunks,
            ChunkingConfig(**manifest["chunking"]),
            TokenizerConfig(**manifest["tokenizer"]),
            Gazetteer(manifest.get("gazetteer", ())),
        )


def _read_lines(path: Path) -> list[str]:
    return [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


# ---------------------------------------------------------------- ingest

INPUT_SUFFIXES = (".txt", ".md", ".jsonl")


def _expand(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file() and q.suffix in INPUT_SUFFIXES))
        else:
            out.append(p)
    return out


def read_documents(path: Path) -> list[Document]:
    try:
        raw = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(path) from exc
    if path.suffix != ".jsonl":
        title = next((l.strip() for l in raw.splitlines() if l.strip()), "")
        return [Document(path.stem, title, raw, str(path))]
    docs = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            year = rec.get("publish_year")
            docs.append(
                Document(
                    doc_id=str(rec["doc_id"]),
                    title=str(rec.get("title", "")),
                    body=rec["body"],
                    source_path=str(path),
                    publish_year=int(year) if year is not None else None,
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestError(path, f"bad record on line {lineno} ({exc})") from exc
    return docs


def ingest_documents(
    paths,
    chunking: Optional[ChunkingConfig] = None,
    tokenizer: Optional[TokenizerConfig] = None,
    gazetteer: Optional[Gazetteer] = None,
    out_dir=None,
) -> CorpusStore:
    """Read plain-text or JSONL files (or directories of them) into a store.

    When ``out_dir`` is given the store is also written there.
    """
    chunking = chunking or ChunkingConfig()
    tokenizer = tokenizer or TokenizerConfig()
    docs: dict[str, Document] = {}
    for path in _expand(paths):
        if not path.exists():
            raise IngestError(path, "no such file")
        for doc in read_documents(path):
            if doc.doc_id in docs:
                raise DuplicateDocument(doc.doc_id)
            if not doc.body.strip():
                raise IngestError(path, f"empty body for document {doc.doc_id!r}")
            docs[doc.doc_id] = doc
    chunks = []
    for doc in docs.values():
        chunks.extend(chunk_document(doc, chunking, tokenizer, gazetteer))
    store = CorpusStore(docs.values(), chunks, chunking, tokenizer, gazetteer)
    if out_dir is not None:
        store.save(out_dir)
    return store
