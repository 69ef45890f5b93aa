"""Target-ranker contract, the built-in BM25 ranker, a remote-ranker client,
and the query counter behind the Qrs metric.

A "ranker query" is one re-ranking of the candidate pool, not one scored
document: the counter increments once per :func:`rerank_with_substitute`
call so reported query counts match what a black-box adversary would spend.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import requests

from .corpus import Corpus, Document, Query, tokenize

INDEX_FORMAT = "attchain-bm25-index"
INDEX_VERSION = 1

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4


class RankingError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Remote ranker returned a response violating the wire contract."""


class RemoteRankerError(RuntimeError):
    """Remote ranker unreachable after the configured retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


@dataclass(frozen=True)
class RankEntry:
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    """Scores non-increasing, ranks exactly 1..len, ties broken by doc_id."""

    query_id: str
    entries: tuple[RankEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, doc_id: str) -> bool:
        return any(e.doc_id == doc_id for e in self.entries)

    def rank_of(self, doc_id: str) -> int:
        for entry in self.entries:
            if entry.doc_id == doc_id:
                return entry.rank
        raise RankingError(f"document {doc_id!r} not in ranked list for query {self.query_id!r}")

    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]


def make_ranked_list(query_id: str, scored: Sequence[tuple[str, float]]) -> RankedList:
    """Sort (doc_id, score) pairs into a RankedList honoring its invariants."""
    ids = [doc_id for doc_id, _ in scored]
    if len(set(ids)) != len(ids):
        raise RankingError("duplicate doc_id in scored pool")
    ordered = sorted(scored, key=lambda pair: (-pair[1], pair[0]))
    entries = tuple(
        RankEntry(doc_id=doc_id, score=score, rank=rank)
        for rank, (doc_id, score) in enumerate(ordered, start=1)
    )
    return RankedList(query_id=query_id, entries=entries)


def rank_of(ranked: RankedList, doc_id: str) -> int:
    return ranked.rank_of(doc_id)


class QueryCounter:
    """Thread-safe count of target-ranker evaluations (one re-ranking each)."""

    def __init__(self) -> None:
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def increment(self) -> None:
        with self._lock:
            self._count += 1


class Ranker(ABC):
    """Deterministic relevance scorer; higher score = more relevant."""

    @abstractmethod
    def score(self, query: Query, doc: Document) -> float: ...

    def score_batch(self, query: Query, docs: Sequence[Document]) -> list[float]:
        return [self.score(query, doc) for doc in docs]


@dataclass
class _DocStats:
    length: int
    tf: dict[str, int]
    text: str | None = None  # exact text when built in-process
    sha1: str | None = None  # checksum when restored from a dump


def _text_sha1(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()


class BM25Ranker(Ranker):
    """Okapi BM25 over title+body tokens.

    score(q, d) = sum over query tokens t of
        idf(t) * tf(t, d) * (k1 + 1) / (tf(t, d) + k1 * (1 - b + b * |d| / avgdl))
    with idf(t) = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5)).

    Collection statistics (df, avgdl, N) are frozen at construction; scoring a
    document whose text differs from the indexed one (a perturbed substitute)
    recomputes its term frequencies on the fly against those frozen statistics.
    """

    def __init__(self, corpus: Corpus | None, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        if k1 <= 0:
            raise RankingError("k1 must be > 0")
        if not 0 <= b <= 1:
            raise RankingError("b must be in [0, 1]")
        self.k1 = k1
        self.b = b
        self._stats: dict[str, _DocStats] = {}
        self._df: Counter[str] = Counter()
        self.n_docs = 0
        self.avgdl = 0.0
        if corpus is not None:
            if len(corpus) == 0:
                raise RankingError("empty corpus")
            for doc in corpus:
                text = doc.text
                tokens = tokenize(text)
                self._stats[doc.id] = _DocStats(length=len(tokens), tf=dict(Counter(tokens)), text=text)
            self._finalize()

    def _finalize(self) -> None:
        self.n_docs = len(self._stats)
        if self.n_docs == 0:
            raise RankingError("empty corpus")
        total_len = sum(s.length for s in self._stats.values())
        self.avgdl = total_len / self.n_docs
        self._df = Counter()
        for stats in self._stats.values():
            self._df.update(stats.tf.keys())

    def idf(self, term: str) -> float:
        df = self._df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    @property
    def vocabulary_size(self) -> int:
        return len(self._df)

    def _doc_stats(self, doc: Document) -> tuple[int, dict[str, int]]:
        cached = self._stats.get(doc.id)
        if cached is not None:
            text = doc.text
            if cached.text is not None:
                if cached.text == text:
                    return cached.length, cached.tf
            elif cached.sha1 == _text_sha1(text):
                return cached.length, cached.tf
        tokens = tokenize(doc.text)
        return len(tokens), dict(Counter(tokens))

    def _score_tokens(self, query_tokens: Sequence[str], length: int, tf: dict[str, int]) -> float:
        if self.avgdl > 0:
            norm = self.k1 * (1.0 - self.b + self.b * length / self.avgdl)
        else:
            norm = self.k1
        score = 0.0
        for term in query_tokens:
            freq = tf.get(term, 0)
            if freq == 0:
                continue
            score += self.idf(term) * freq * (self.k1 + 1.0) / (freq + norm)
        return score

    def score(self, query: Query, doc: Document) -> float:
        length, tf = self._doc_stats(doc)
        return self._score_tokens(tokenize(query.text), length, tf)

    def score_batch(self, query: Query, docs: Sequence[Document]) -> list[float]:
        query_tokens = tokenize(query.text)
        return [self._score_tokens(query_tokens, *self._doc_stats(doc)) for doc in docs]

    def save_index(self, path: str | Path) -> None:
        """Persist postings as JSONL: a versioned header line, then one record
        per document with its length, term frequencies, and text checksum."""
        path = Path(path)
        header = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "k1": self.k1,
            "b": self.b,
            "n_docs": self.n_docs,
            "avgdl": self.avgdl,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for doc_id in sorted(self._stats):
                stats = self._stats[doc_id]
                sha1 = stats.sha1 if stats.sha1 is not None else _text_sha1(stats.text or "")
                record = {"id": doc_id, "length": stats.length, "sha1": sha1, "tf": stats.tf}
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def load_index(cls, path: str | Path) -> "BM25Ranker":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            try:
                header = json.loads(fh.readline())
            except json.JSONDecodeError as exc:
                raise RankingError(f"{path}: invalid index header: {exc}") from exc
            if header.get("format") != INDEX_FORMAT:
                raise RankingError(f"{path}: not a {INDEX_FORMAT} file")
            if header.get("version") != INDEX_VERSION:
                raise RankingError(f"{path}: unsupported index version {header.get('version')!r}")
            ranker = cls(corpus=None, k1=header["k1"], b=header["b"])
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                record = json.loads(line)
                ranker._stats[record["id"]] = _DocStats(
                    length=record["length"], tf=record["tf"], sha1=record["sha1"]
                )
        ranker._finalize()
        return ranker


def build_bm25(corpus: Corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> BM25Ranker:
    return BM25Ranker(corpus, k1=k1, b=b)


def initial_retrieval(ranker: Ranker, query: Query, corpus: Corpus, depth: int) -> RankedList:
    """Top-``depth`` documents of the corpus; the fixed candidate pool for an attack."""
    if depth < 1:
        raise RankingError("depth must be >= 1")
    docs = corpus.documents
    scores = ranker.score_batch(query, docs)
    full = make_ranked_list(query.id, list(zip((d.id for d in docs), scores)))
    return RankedList(query_id=query.id, entries=full.entries[:depth])


def rerank_with_substitute(
    ranker: Ranker,
    query: Query,
    pool: RankedList,
    corpus: Corpus,
    original_id: str,
    substitute: Document,
    counter: QueryCounter,
) -> tuple[RankedList, int]:
    """Re-score the fixed pool with ``substitute`` standing in for ``original_id``.

    Every call costs exactly one counter increment, the unit the Qrs metric
    counts.
    """
    if original_id not in pool:
        raise RankingError(f"document {original_id!r} not in pool for query {query.id!r}")
    docs = [substitute if e.doc_id == original_id else corpus[e.doc_id] for e in pool.entries]
    scores = ranker.score_batch(query, docs)
    counter.increment()
    reranked = make_ranked_list(query.id, [(d.id, s) for d, s in zip(docs, scores)])
    return reranked, reranked.rank_of(original_id)


@dataclass
class RemoteRankerConfig:
    base_url: str
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    session: requests.Session | None = field(default=None, repr=False)


class RemoteRanker(Ranker):
    """HTTP client for an external scoring service.

    Wire contract: POST ``{base_url}`` with ``{"query": str, "docs": [str, ...]}``
    and read back ``{"scores": [float, ...]}`` of the same length and order.
    Transport failures are retried with exponential backoff; contract
    violations are not retried.
    """

    def __init__(self, config: RemoteRankerConfig):
        if config.retries < 1:
            raise RankingError("retries must be >= 1")
        self.config = config
        self._session = config.session or requests.Session()

    def score(self, query: Query, doc: Document) -> float:
        return self.score_batch(query, [doc])[0]

    def score_batch(self, query: Query, docs: Sequence[Document]) -> list[float]:
        payload = {"query": query.text, "docs": [doc.text for doc in docs]}
        last_error: Exception | None = None
        for attempt in range(1, self.config.retries + 1):
            try:
                response = self._session.post(
                    self.config.base_url, json=payload, timeout=self.config.timeout
                )
                response.raise_for_status()
                return self._parse_scores(response, len(docs))
            except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as exc:
                last_error = exc
                if attempt < self.config.retries:
                    time.sleep(self.config.backoff * (2 ** (attempt - 1)))
        raise RemoteRankerError(f"remote ranker at {self.config.base_url} failed: {last_error}",
                                attempts=self.config.retries)

    @staticmethod
    def _parse_scores(response: requests.Response, expected: int) -> list[float]:
        try:
            body = response.json()
        except ValueError as exc:
            raise ProtocolError(f"remote ranker returned non-JSON body: {exc}") from exc
        scores = body.get("scores") if isinstance(body, dict) else None
        if not isinstance(scores, list):
            raise ProtocolError("remote ranker response missing 'scores' list")
        if len(scores) != expected:
            raise ProtocolError(f"remote ranker returned {len(scores)} scores for {expected} docs")
        try:
            return [float(s) for s in scores]
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"remote ranker returned non-numeric score: {exc}") from exc


def remote_ranker(config: RemoteRankerConfig) -> RemoteRanker:
    return RemoteRanker(config)
