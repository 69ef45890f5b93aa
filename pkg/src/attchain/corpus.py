"""Corpus ingestion plus the tokenization and sentence primitives shared by
every other module.

All word counting in the pipeline (ranking, budgets, spamicity) goes through
:func:`tokenize` so the different components never disagree about what a
"word" is.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

# Maximal runs of alphanumeric characters (unicode letters/digits, no underscore).
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
# Split points: after . ! ? when followed by whitespace; end-of-text needs no split.
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus/query input."""


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    body: str

    @property
    def text(self) -> str:
        """Full visible text: title and body joined by a single space."""
        if self.title and self.body:
            return f"{self.title} {self.body}"
        return self.title or self.body


@dataclass(frozen=True)
class Query:
    id: str
    text: str


class Corpus:
    """Immutable document collection with id lookup, insertion order preserved."""

    def __init__(self, documents: Iterable[Document]):
        self._documents = tuple(documents)
        if not self._documents:
            raise CorpusError("empty corpus")
        index: dict[str, Document] = {}
        for doc in self._documents:
            if doc.id in index:
                raise CorpusError(f"duplicate document id {doc.id!r}")
            index[doc.id] = doc
        self._index = index

    @property
    def documents(self) -> tuple[Document, ...]:
        return self._documents

    def __len__(self) -> int:
        return len(self._documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._index

    def __getitem__(self, doc_id: str) -> Document:
        try:
            return self._index[doc_id]
        except KeyError:
            raise KeyError(f"unknown document id {doc_id!r}") from None

    def get(self, doc_id: str) -> Document | None:
        return self._index.get(doc_id)


def tokenize(text: str) -> list[str]:
    """Lowercased maximal alphanumeric runs, in order; punctuation discarded."""
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    """Split after '.', '!' or '?' followed by whitespace or end-of-text.

    Fragments are trimmed and empty fragments dropped, so ``"v1.2 is out."``
    stays whole while ``"A b. C d? E"`` yields three sentences.
    """
    return [frag.strip() for frag in _SENTENCE_RE.split(text) if frag.strip()]


def snippet(doc: Document, k: int) -> str:
    """Title followed by the first ``k`` body sentences, space-joined.

    This is the short form of a document handed to the attacker in place of
    its full text.
    """
    if k < 0:
        raise ValueError("sentence count must be >= 0")
    parts = [doc.title] if doc.title else []
    parts.extend(split_sentences(doc.body)[:k])
    return " ".join(parts)


def _decoded_lines(path: Path) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, decoded line) so errors can cite the line."""
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                yield lineno, raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError as exc:
                raise CorpusError(f"{path}: invalid UTF-8 on line {lineno}: {exc}") from exc


def _check_record(path: Path, lineno: int, doc_id: str, title: str, body: str) -> Document:
    if not doc_id:
        raise CorpusError(f"{path}: empty document id on line {lineno}")
    if not title and not body:
        raise CorpusError(f"{path}: document {doc_id!r} on line {lineno} has neither title nor body")
    return Document(id=doc_id, title=title, body=body)


def load_corpus(path: str | Path, format: str = "tsv") -> Corpus:
    """Load documents from a TSV (``id<TAB>title<TAB>body``) or JSONL file."""
    path = Path(path)
    if format not in ("tsv", "jsonl"):
        raise ValueError(f"unknown corpus format {format!r}")
    documents: list[Document] = []
    seen: set[str] = set()
    for lineno, line in _decoded_lines(path):
        if not line.strip():
            continue
        if format == "tsv":
            fields = line.split("\t")
            if len(fields) != 3:
                raise CorpusError(f"{path}: expected 3 tab-separated fields on line {lineno}, got {len(fields)}")
            doc = _check_record(path, lineno, *fields)
        else:
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: invalid JSON on line {lineno}: {exc}") from exc
            if not isinstance(record, dict) or not {"id", "title", "body"} <= record.keys():
                raise CorpusError(f"{path}: line {lineno} must be an object with id/title/body keys")
            doc = _check_record(path, lineno, str(record["id"]), str(record["title"]), str(record["body"]))
        if doc.id in seen:
            raise CorpusError(f"{path}: duplicate document id {doc.id!r} on line {lineno}")
        seen.add(doc.id)
        documents.append(doc)
    if not documents:
        raise CorpusError(f"{path}: empty corpus")
    return Corpus(documents)


def load_queries(path: str | Path) -> list[Query]:
    """Load queries from a TSV file (``id<TAB>text``)."""
    path = Path(path)
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, line in _decoded_lines(path):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise CorpusError(f"{path}: expected 2 tab-separated fields on line {lineno}, got {len(fields)}")
        qid, text = fields
        if not qid:
            raise CorpusError(f"{path}: empty query id on line {lineno}")
        if qid in seen:
            raise CorpusError(f"{path}: duplicate query id {qid!r} on line {lineno}")
        if not tokenize(text):
            raise CorpusError(f"{path}: query {qid!r} on line {lineno} has no tokens")
        seen.add(qid)
        queries.append(Query(id=qid, text=text))
    if not queries:
        raise CorpusError(f"{path}: empty query file")
    return queries
