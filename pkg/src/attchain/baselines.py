"""Single-shot baseline attacks sharing the chain's outcome format."""

from __future__ import annotations

import random
from typing import Callable

from .corpus import Corpus, Document, Query, tokenize
from .evaluation import AttackOutcome
from .ranking import QueryCounter, RankedList, Ranker, rerank_with_substitute

PerturbFn = Callable[[Query, Document, random.Random], str]


def term_spamming(query: Query, doc: Document, epsilon: int, rng: random.Random) -> str:
    """Overwrite a random contiguous token window with the query's terms,
    repeated cyclically to fill the window."""
    if epsilon < 1:
        raise ValueError(f"epsilon must be >= 1, got {epsilon}")
    tokens = tokenize(doc.text)
    query_tokens = tokenize(query.text)
    if not tokens:
        spam = [query_tokens[i % len(query_tokens)] for i in range(epsilon)]
        return " ".join(spam + ([doc.text] if doc.text else []))
    width = min(epsilon, len(tokens))
    start = rng.randint(0, max(0, len(tokens) - epsilon))
    for offset in range(width):
        tokens[start + offset] = query_tokens[offset % len(query_tokens)]
    return " ".join(tokens)


def identity_perturbation(query: Query, doc: Document, rng: random.Random) -> str:
    return doc.text


def run_baseline(
    query: Query,
    target: Document,
    pool: RankedList,
    corpus: Corpus,
    ranker: Ranker,
    method: PerturbFn,
    rng: random.Random,
    counter: QueryCounter | None = None,
) -> AttackOutcome:
    """One perturbation, one re-ranking: queries_used is always 1."""
    counter = counter if counter is not None else QueryCounter()
    queries_before = counter.count
    original_rank = pool.rank_of(target.id)
    perturbed = method(query, target, rng)
    substitute = Document(id=target.id, title="", body=perturbed)
    _, final_rank = rerank_with_substitute(ranker, query, pool, corpus, target.id, substitute, counter)
    return AttackOutcome(
        query_id=query.id,
        doc_id=target.id,
        original_rank=original_rank,
        final_rank=final_rank,
        queries_used=counter.count - queries_before,
        final_text=perturbed,
    )
