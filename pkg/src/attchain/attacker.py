"""Attackers: prompt construction, response parsing, the chat-completion
client, and a deterministic lexical heuristic used as the offline stand-in
for a live model.

Both attackers speak the same two-step protocol the chain module drives:
``select_anchors`` picks guidance documents from a candidate set, ``perturb``
rewrites the target text against a single anchor under a word budget.
"""

from __future__ import annotations

import os
import re
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import requests

from .corpus import Query, tokenize

API_KEY_ENV = "ATTCHAIN_LLM_API_KEY"

_DOCUMENT_RE = re.compile(r"<document>(.*?)</document>", re.DOTALL)


def _load_template(name: str) -> str:
    return resources.files("attchain").joinpath(f"templates/{name}").read_text(encoding="utf-8")


ANCHOR_SELECTION_TEMPLATE = _load_template("anchor_selection.txt")
PERTURBATION_TEMPLATE = _load_template("perturbation.txt")


class DocumentParseError(ValueError):
    """Model response carries no <document>...</document> span."""


class ChatTransportError(RuntimeError):
    """Chat endpoint unreachable or returned an unusable response."""


class PerturbationFailed(RuntimeError):
    """A node's perturbation could not be obtained; the chain treats the node
    as failed and keeps going with the others."""

    def __init__(self, anchor_id: str, attempts: int, reason: str):
        super().__init__(f"perturbation against anchor {anchor_id!r} failed after {attempts} attempts: {reason}")
        self.anchor_id = anchor_id
        self.attempts = attempts


@dataclass(frozen=True)
class AnchorRef:
    doc_id: str
    snippet: str
    rank: int


@dataclass(frozen=True)
class PromptContext:
    """Everything a prompt can mention: the query, the target's current text,
    the anchor snippets with their ranks, places moved so far, and the word
    budget for the node being perturbed."""

    query: Query
    target_doc_text: str
    anchors: tuple[AnchorRef, ...]
    rank_gain_x: int = 0
    word_budget: int = 0


def build_anchor_selection_prompt(ctx: PromptContext, m: int, n: int) -> str:
    if not (1 <= n <= m):
        raise ValueError(f"need 1 <= n <= m, got n={n}, m={m}")
    if len(ctx.anchors) != m:
        raise ValueError(f"context carries {len(ctx.anchors)} anchors, expected m={m}")
    anchor_block = "\n".join(f"[{a.doc_id}] {a.snippet}" for a in ctx.anchors)
    return ANCHOR_SELECTION_TEMPLATE.format(
        m=m,
        n=n,
        x=ctx.rank_gain_x,
        target_query=ctx.query.text,
        target_document=ctx.target_doc_text,
        anchor_documents=anchor_block,
    )


def build_perturbation_prompt(ctx: PromptContext) -> str:
    if ctx.word_budget < 1:
        raise ValueError(f"word budget must be >= 1, got {ctx.word_budget}")
    if len(ctx.anchors) != 1:
        raise ValueError(f"perturbation needs exactly one anchor, got {len(ctx.anchors)}")
    return PERTURBATION_TEMPLATE.format(
        x=ctx.rank_gain_x,
        word_budget=ctx.word_budget,
        target_query=ctx.query.text,
        anchor_document=ctx.anchors[0].snippet,
        target_document=ctx.target_doc_text,
    )


def parse_anchor_selection(
    response: str,
    candidates: Sequence[str],
    n: int,
    fallback_order: Sequence[str],
) -> tuple[list[str], bool]:
    """First ``n`` distinct response lines matching candidate ids; parsing is
    total: anything missing is filled from ``fallback_order`` (best rank
    first). Returns the ids and whether the fallback fired."""
    candidate_set = set(candidates)
    if len(candidate_set) < n:
        raise ValueError(f"need at least {n} candidates, got {len(candidate_set)}")
    chosen: list[str] = []
    for line in response.splitlines():
        token = line.strip()
        if token.startswith("[") and token.endswith("]"):
            token = token[1:-1].strip()
        if token in candidate_set and token not in chosen:
            chosen.append(token)
            if len(chosen) == n:
                return chosen, False
    for doc_id in fallback_order:
        if len(chosen) == n:
            break
        if doc_id in candidate_set and doc_id not in chosen:
            chosen.append(doc_id)
    if len(chosen) != n:
        raise ValueError("fallback order does not cover the candidate set")
    return chosen, True


def parse_perturbed_document(response: str) -> str:
    """Content of the first <document>...</document> span, trimmed."""
    match = _DOCUMENT_RE.search(response)
    if match is None:
        raise DocumentParseError("no <document>...</document> span in response")
    return match.group(1).strip()


def word_diff_count(original: str, perturbed: str) -> int:
    """Token-level Levenshtein distance (unit costs) between the two texts."""
    a = tokenize(original)
    b = tokenize(perturbed)
    # Trim the common prefix/suffix before the quadratic part.
    start = 0
    while start < len(a) and start < len(b) and a[start] == b[start]:
        start += 1
    end_a, end_b = len(a), len(b)
    while end_a > start and end_b > start and a[end_a - 1] == b[end_b - 1]:
        end_a -= 1
        end_b -= 1
    a, b = a[start:end_a], b[start:end_b]
    if not a:
        return len(b)
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        current = [i] + [0] * len(b)
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            current[j] = min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost)
        previous = current
    return previous[-1]


class Attacker(ABC):
    """Contract the chain drives: anchor selection and budgeted perturbation."""

    @abstractmethod
    def select_anchors(self, ctx: PromptContext, n: int) -> list[str]:
        """Exactly ``n`` distinct ids drawn from ``ctx.anchors``."""

    @abstractmethod
    def perturb(self, ctx: PromptContext) -> str:
        """Perturbed target text (non-empty); raises PerturbationFailed."""


@dataclass
class ChatEndpointConfig:
    """OpenAI-compatible chat-completions endpoint.

    ``base_url`` is the full completions URL; the API key is read from the
    ``ATTCHAIN_LLM_API_KEY`` environment variable unless given explicitly.
    """

    base_url: str
    model: str
    temperature: float = 0.0
    timeout: float = 60.0
    max_concurrency: int = 4
    api_key: str | None = None
    session: requests.Session | None = field(default=None, repr=False)


class ChatClient:
    """Single-attempt chat completion; retry policy lives in the attacker."""

    def __init__(self, config: ChatEndpointConfig):
        key = config.api_key if config.api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise ChatTransportError(f"no API key: set {API_KEY_ENV} or pass api_key")
        self.config = config
        self._key = key
        self._session = config.session or requests.Session()
        self._semaphore = threading.Semaphore(max(1, config.max_concurrency))

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        }
        headers = {"Authorization": f"Bearer {self._key}"}
        with self._semaphore:
            try:
                response = self._session.post(
                    self.config.base_url, json=payload, headers=headers, timeout=self.config.timeout
                )
                response.raise_for_status()
                body = response.json()
                content = body["choices"][0]["message"]["content"]
            except (requests.RequestException, ValueError, KeyError, IndexError, TypeError) as exc:
                raise ChatTransportError(f"chat completion failed: {exc}") from exc
        if not isinstance(content, str):
            raise ChatTransportError("chat completion returned non-string content")
        return content


class LlmAttacker(Attacker):
    """Drives a chat model through the two prompts and parses its replies.

    Each call gets ``retries`` additional attempts covering both transport and
    parse failures. A selection that never parses falls back to the
    best-ranked candidates so the chain can continue; a perturbation that
    never parses raises :class:`PerturbationFailed` for that node only.
    """

    def __init__(self, client: ChatClient, retries: int = 2, retry_backoff: float = 0.0):
        if retries < 0:
            raise ValueError("retries must be >= 0")
        self._client = client
        self._retries = retries
        self._backoff = retry_backoff
        self.selection_fallbacks = 0
        self.retry_count = 0

    def _attempts(self) -> int:
        return self._retries + 1

    def select_anchors(self, ctx: PromptContext, n: int) -> list[str]:
        prompt = build_anchor_selection_prompt(ctx, m=len(ctx.anchors), n=n)
        candidates = [a.doc_id for a in ctx.anchors]
        by_rank = [a.doc_id for a in sorted(ctx.anchors, key=lambda a: a.rank)]
        response = None
        for attempt in range(self._attempts()):
            try:
                response = self._client.complete(prompt)
                break
            except ChatTransportError:
                self.retry_count += 1
                if self._backoff and attempt < self._retries:
                    time.sleep(self._backoff * (2**attempt))
        if response is None:
            # Endpoint down: degrade to the best-ranked candidates.
            self.selection_fallbacks += 1
            return by_rank[:n]
        ids, fell_back = parse_anchor_selection(response, candidates, n, by_rank)
        if fell_back:
            self.selection_fallbacks += 1
        return ids

    def perturb(self, ctx: PromptContext) -> str:
        prompt = build_perturbation_prompt(ctx)
        anchor_id = ctx.anchors[0].doc_id
        reason = "no attempts made"
        for attempt in range(self._attempts()):
            if attempt:
                self.retry_count += 1
                if self._backoff:
                    time.sleep(self._backoff * (2 ** (attempt - 1)))
            try:
                response = self._client.complete(prompt)
            except ChatTransportError as exc:
                reason = str(exc)
                continue
            try:
                text = parse_perturbed_document(response)
            except DocumentParseError as exc:
                reason = str(exc)
                continue
            if text:
                return text
            reason = "empty perturbed document"
        raise PerturbationFailed(anchor_id, attempts=self._attempts(), reason=reason)


def llm_attacker(config: ChatEndpointConfig, retries: int = 2, retry_backoff: float = 0.0) -> LlmAttacker:
    return LlmAttacker(ChatClient(config), retries=retries, retry_backoff=retry_backoff)


class HeuristicAttacker(Attacker):
    """Deterministic lexical attacker used as the offline oracle.

    Anchor selection keeps the candidates whose snippets share the most query
    tokens. Perturbation swaps the target's rarest non-query tokens (earliest
    position first among equals) for the anchor's most valuable tokens: query
    overlaps first, then the anchor's rarest terms. Rarity is document
    frequency over the texts visible in the context, so the attacker stays
    strictly black-box.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed  # reserved for randomized tie-breaking; current rules are total

    @staticmethod
    def _context_df(ctx: PromptContext) -> Counter[str]:
        df: Counter[str] = Counter()
        texts = [ctx.target_doc_text] + [a.snippet for a in ctx.anchors]
        for text in texts:
            df.update(set(tokenize(text)))
        return df

    def select_anchors(self, ctx: PromptContext, n: int) -> list[str]:
        if not (1 <= n <= len(ctx.anchors)):
            raise ValueError(f"need 1 <= n <= {len(ctx.anchors)}, got n={n}")
        query_tokens = set(tokenize(ctx.query.text))

        def overlap(anchor: AnchorRef) -> int:
            return len(query_tokens & set(tokenize(anchor.snippet)))

        ordered = sorted(ctx.anchors, key=lambda a: (-overlap(a), a.rank, a.doc_id))
        return [a.doc_id for a in ordered[:n]]

    def perturb(self, ctx: PromptContext) -> str:
        if ctx.word_budget < 1:
            raise ValueError(f"word budget must be >= 1, got {ctx.word_budget}")
        if len(ctx.anchors) != 1:
            raise ValueError(f"perturbation needs exactly one anchor, got {len(ctx.anchors)}")
        target_tokens = tokenize(ctx.target_doc_text)
        if not target_tokens:
            return ctx.target_doc_text
        query_tokens = set(tokenize(ctx.query.text))
        df = self._context_df(ctx)

        # Replacement values: anchor tokens, query overlaps first, rare next.
        anchor_tokens = []
        seen: set[str] = set()
        for token in tokenize(ctx.anchors[0].snippet):
            if token not in seen:
                seen.add(token)
                anchor_tokens.append(token)
        anchor_tokens.sort(key=lambda t: (t not in query_tokens, df[t], t))
        if not anchor_tokens:
            return ctx.target_doc_text

        # Replacement slots: non-query target positions, rarest token first,
        # earliest position among equals.
        slots = [i for i, tok in enumerate(target_tokens) if tok not in query_tokens]
        slots.sort(key=lambda i: (df[target_tokens[i]], i))
        slots = slots[: ctx.word_budget]

        perturbed = list(target_tokens)
        for k, position in enumerate(slots):
            perturbed[position] = anchor_tokens[k % len(anchor_tokens)]
        return " ".join(perturbed)


def heuristic_attacker(seed: int = 0) -> HeuristicAttacker:
    return HeuristicAttacker(seed=seed)
