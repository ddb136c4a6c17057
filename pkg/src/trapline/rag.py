"""Local retrieval substrate: corpus, chunker, embedders, exact index, retrieval."""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Protocol, Sequence

import httpx
import numpy as np

from trapline.errors import (
    DimensionMismatch,
    EmbedderUnavailable,
    EmptyCorpus,
    EmptyText,
    InvalidChunkParams,
)

if TYPE_CHECKING:
    from trapline.context import ObservationRecord

DEFAULT_DIMENSION = 256
DEFAULT_CHUNK_SIZE = 800
DEFAULT_OVERLAP = 80
DEFAULT_MAX_DOCS = 20
DEFAULT_K_PASSAGES = 4
INDEX_VERSION = 1

STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been before being
    below between both but by can could did do does doing down during each either else few for
    from further had has have having he her here hers him his how i if in into is it its itself
    just me more most much my no nor not now of off on once only or other our ours out over own
    same she should so some such than that the their theirs them then there these they this
    those through to too under until up very was we were what when where which while who whom
    why will with would you your yours e g eg etc also such may might must shall
    read reads label labels binding bounding box boxes identify identified identification
    determine animal animals species image images picture photo photograph camera trap
    """.split()
)

_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    source_url: str | None = None

    def __post_init__(self):
        if not self.body:
            raise ValueError(f"document {self.doc_id!r} has an empty body")

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "title": self.title, "body": self.body, "source_url": self.source_url}


@dataclass(frozen=True)
class Passage:
    doc_id: str
    passage_index: int
    text: str
    char_offset: int

    @property
    def ref(self) -> tuple[str, int]:
        return self.doc_id, self.passage_index

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "passage_index": self.passage_index,
            "char_offset": self.char_offset,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Passage":
        return cls(data["doc_id"], int(data["passage_index"]), data["text"], int(data["char_offset"]))


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]

    def __post_init__(self):
        ids = [d.doc_id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate doc_id in corpus")

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    @classmethod
    def of(cls, docs: Iterable[Document]) -> "Corpus":
        return cls(tuple(sorted(docs, key=lambda d: d.doc_id)))


def load_corpus(root: str | Path) -> Corpus:
    """Read every ``*.json`` document under ``root``."""
    docs = []
    for path in sorted(Path(root).rglob("*.json")):
        data = json.loads(path.read_text("utf-8"))
        docs.append(Document(data["doc_id"], data.get("title", ""), data["body"], data.get("source_url")))
    return Corpus.of(docs)


def fetch_wikipedia_document(title: str, *, client: httpx.Client | None = None) -> Document:
    """Populate a corpus entry from the live Wikipedia summary API (network required)."""
    own = client is None
    client = client or httpx.Client(timeout=30.0)
    try:
        slug = title.replace(" ", "_")
        resp = client.get(f"https://en.wikipedia.org/api/rest_v1/page/summary/{slug}")
        resp.raise_for_status()
        data = resp.json()
    finally:
        if own:
            client.close()
    return Document(
        doc_id=slug.lower(),
        title=data.get("title", title),
        body=data["extract"],
        source_url=data.get("content_urls", {}).get("desktop", {}).get("page"),
    )


# --------------------------------------------------------------------------- chunking


def chunk(doc: Document, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP) -> list[Passage]:
    """Fixed-stride character windows; the last one may be shorter."""
    if chunk_size <= 0 or not 0 <= overlap < chunk_size:
        raise InvalidChunkParams(f"need 0 <= overlap < chunk_size, got {overlap}, {chunk_size}")
    stride = chunk_size - overlap
    body = doc.body
    out, offset = [], 0
    while True:
        out.append(Passage(doc.doc_id, len(out), body[offset:offset + chunk_size], offset))
        if offset + chunk_size >= len(body):
            return out
        offset += stride


def reassemble(passages: Sequence[Passage]) -> str:
    """Concatenate passages with their overlapping prefixes removed."""
    text, end = "", 0
    for p in passages:
        text += p.text[max(0, end - p.char_offset):]
        end = p.char_offset + len(p.text)
    return text


# --------------------------------------------------------------------------- embedding


class Embedder(Protocol):
    embedder_id: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = math.sqrt(float(np.dot(vec, vec)))
    if norm == 0.0:
        raise EmptyText("text has no embeddable content")
    return vec / norm


@dataclass(frozen=True)
class TrigramEmbedder:
    """Hashed bag of character trigrams (CRC-32 buckets), L2-normalised."""

    dimension: int = DEFAULT_DIMENSION

    @property
    def embedder_id(self) -> str:
        return f"trigram-crc32-{self.dimension}"

    def embed(self, text: str) -> np.ndarray:
        norm = " ".join(text.lower().split())
        if not norm:
            raise EmptyText("cannot embed empty text")
        padded = f" {norm} "
        vec = np.zeros(self.dimension, dtype=np.float64)
        for i in range(len(padded) - 2):
            vec[zlib.crc32(padded[i:i + 3].encode("utf-8")) % self.dimension] += 1.0
        return _unit(vec)


@dataclass
class RemoteEmbedder:
    """``POST {base_url}/v1/embed {"model", "input"} -> {"embedding": [...]}``."""

    base_url: str
    dimension: int
    model: str = "default"
    timeout: float = 30.0
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    @property
    def embedder_id(self) -> str:
        return f"remote:{self.model}:{self.dimension}"

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmptyText("cannot embed empty text")
        try:
            with httpx.Client(base_url=self.base_url, timeout=self.timeout, transport=self.transport) as c:
                resp = c.post("/v1/embed", json={"model": self.model, "input": text})
            resp.raise_for_status()
            vec = np.asarray(resp.json()["embedding"], dtype=np.float64)
        except (httpx.HTTPError, ValueError, KeyError) as exc:
            raise EmbedderUnavailable(f"embedding endpoint failed: {exc}") from exc
        if vec.shape != (self.dimension,):
            raise DimensionMismatch(f"expected {self.dimension} values, got {vec.shape}")
        return _unit(vec)


DEFAULT_EMBEDDER = TrigramEmbedder()


def embed(text: str, embedder: Embedder | None = None) -> np.ndarray:
    return (embedder or DEFAULT_EMBEDDER).embed(text)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# --------------------------------------------------------------------------- index


@dataclass(frozen=True)
class IndexEntry:
    doc_id: str
    passage_index: int
    char_offset: int


class VectorIndex:
    """Exact (flat) cosine index over unit vectors, ordered by (doc_id, passage_index)."""

    def __init__(
        self,
        entries: Sequence[IndexEntry],
        vectors: np.ndarray,
        embedder_id: str,
        passages: dict[tuple[str, int], Passage] | None = None,
    ):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(entries):
            raise DimensionMismatch("one vector per entry required")
        order = sorted(range(len(entries)), key=lambda i: (entries[i].doc_id, entries[i].passage_index))
        self.entries: tuple[IndexEntry, ...] = tuple(entries[i] for i in order)
        self.vectors = np.ascontiguousarray(vectors[order])
        self.vectors.setflags(write=False)
        self.dimension = int(vectors.shape[1])
        self.embedder_id = embedder_id
        self.passages = passages or {}

    def __len__(self) -> int:
        return len(self.entries)

    def passage(self, entry: IndexEntry) -> Passage | None:
        return self.passages.get((entry.doc_id, entry.passage_index))

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": INDEX_VERSION,
                "embedder_id": self.embedder_id,
                "dimension": self.dimension,
                "entries": [
                    {
                        "doc_id": e.doc_id,
                        "passage_index": e.passage_index,
                        "char_offset": e.char_offset,
                        "vector": v.tolist(),
                    }
                    for e, v in zip(self.entries, self.vectors)
                ],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "VectorIndex":
        data = json.loads(text)
        if data.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index version {data.get('version')}")
        entries = [IndexEntry(e["doc_id"], e["passage_index"], e["char_offset"]) for e in data["entries"]]
        vectors = np.array([e["vector"] for e in data["entries"]], dtype=np.float64).reshape(
            len(entries), data["dimension"]
        )
        return cls(entries, vectors, data["embedder_id"])


def build_index(passages: Sequence[Passage], embedder: Embedder | None = None) -> VectorIndex:
    if not passages:
        raise EmptyCorpus("no passages to index")
    embedder = embedder or DEFAULT_EMBEDDER
    vectors = []
    for p in passages:
        v = np.asarray(embedder.embed(p.text), dtype=np.float64)
        if v.shape != (embedder.dimension,):
            raise DimensionMismatch(
                f"embedder {embedder.embedder_id} returned shape {v.shape} for {p.ref}, "
                f"expected ({embedder.dimension},)"
            )
        vectors.append(v)
    entries = [IndexEntry(p.doc_id, p.passage_index, p.char_offset) for p in passages]
    return VectorIndex(entries, np.vstack(vectors), embedder.embedder_id, {p.ref: p for p in passages})


def search(index: VectorIndex, query: np.ndarray, k: int) -> list[tuple[IndexEntry, float]]:
    """Top-k by cosine; ties go to the smaller (doc_id, passage_index)."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise DimensionMismatch(f"query has shape {q.shape}, index dimension is {index.dimension}")
    if k <= 0 or not len(index):
        return []
    # row-wise reduction: identical rows always get identical scores
    sims = (index.vectors * q).sum(axis=1)
    order = np.argsort(-sims, kind="stable")[:k]
    return [(index.entries[i], float(min(1.0, max(-1.0, sims[i])))) for i in order]


# --------------------------------------------------------------------------- retrieval


@dataclass(frozen=True)
class ScoredPassage:
    passage: Passage
    similarity: float

    def to_dict(self) -> dict:
        return {**self.passage.to_dict(), "similarity": self.similarity}

    @classmethod
    def from_dict(cls, data: dict) -> "ScoredPassage":
        return cls(Passage.from_dict(data), float(data["similarity"]))


@dataclass(frozen=True)
class RetrievalResult:
    keywords: tuple[str, ...]
    passages: tuple[ScoredPassage, ...]
    doc_ids: tuple[str, ...] = ()

    @property
    def no_evidence(self) -> bool:
        return not self.passages


def _tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def content_words(text: str) -> list[str]:
    return [t for t in _tokens(text) if t not in STOPWORDS]


def _dedupe(items: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for item in items:
        if item:
            seen.setdefault(item, None)
    return list(seen)


def extract_keywords(obs: "ObservationRecord | None", question: str) -> list[str]:
    """Detected species' common and scientific names, then question content words."""
    names = []
    if obs is not None:
        for cls, _ in obs.species_counts:
            names += [cls.common_name.lower(), cls.scientific_name.lower()]
    return _dedupe([*names, *content_words(question)])


def _keyword_re(keyword: str) -> re.Pattern:
    return re.compile(rf"(?<![a-z0-9]){re.escape(keyword)}(?![a-z0-9])")


def keyword_score(doc: Document, keywords: Sequence[str]) -> int:
    haystack = f"{doc.title}\n{doc.body}".lower()
    return sum(1 for k in keywords if _keyword_re(k).search(haystack))


def retrieve(
    corpus: Corpus | Sequence[Document],
    keywords: Sequence[str],
    max_docs: int = DEFAULT_MAX_DOCS,
    k_passages: int = DEFAULT_K_PASSAGES,
    embedder: Embedder | None = None,
    *,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> RetrievalResult:
    """Two stages: keyword-overlap document selection, then passage ranking by cosine."""
    docs = list(corpus)
    if not docs:
        raise EmptyCorpus("corpus has no documents")
    keywords = tuple(keywords)
    if not keywords:
        return RetrievalResult(keywords, ())
    scored = [(keyword_score(d, keywords), d) for d in docs]
    selected = sorted((sd for sd in scored if sd[0] > 0), key=lambda sd: (-sd[0], sd[1].doc_id))[:max_docs]
    if not selected:
        return RetrievalResult(keywords, ())
    passages = [p for _, d in selected for p in chunk(d, chunk_size, overlap)]
    index = build_index(passages, embedder)
    query = embed(" ".join(keywords), embedder)
    hits = search(index, query, k_passages)
    return RetrievalResult(
        keywords,
        tuple(ScoredPassage(index.passage(e), s) for e, s in hits),
        tuple(d.doc_id for _, d in selected),
    )
