"""The attack chain: rank-weighted candidate filtering, discrepancy-oriented
word budgets, and the per-round perturb-verify-adopt loop.

Each round perturbs the target once per anchor, verifies every perturbation
with one pool re-ranking, adopts the best strictly-improving node, and feeds
the updated ranking into the next round. Ranks therefore never regress across
adopted states, and the cumulative adopted word changes never exceed the
attack budget.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .attacker import AnchorRef, Attacker, PerturbationFailed, PromptContext, word_diff_count
from .corpus import Corpus, Document, Query, snippet
from .evaluation import AttackOutcome
from .ranking import QueryCounter, RankedList, Ranker, rerank_with_substitute

SNIPPET_SENTENCES = 3
ROTATION_POOL_SIZE = 5

VARIANTS = ("full", "no_cot", "no_dynamic")


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    m: int = 20
    n: int = 5
    s: float = 2.0
    epsilon: int = 25
    rounds: int = 5
    variant: str = "full"
    seed: int = 0

    def __post_init__(self) -> None:
        if not (1 <= self.n <= self.m):
            raise ChainError(f"need 1 <= n <= m, got n={self.n}, m={self.m}")
        if self.s < 0:
            raise ChainError(f"s must be >= 0, got {self.s}")
        if self.epsilon < 1:
            raise ChainError(f"epsilon must be >= 1, got {self.epsilon}")
        if self.rounds < 1:
            raise ChainError(f"rounds must be >= 1, got {self.rounds}")
        if self.variant not in VARIANTS:
            raise ChainError(f"unknown variant {self.variant!r}")


@dataclass
class NodeResult:
    anchor_id: str
    anchor_rank: int
    assigned_budget: int
    perturbed_text: str | None
    new_rank: int
    words_used: int
    failed: bool = False


@dataclass
class RoundRecord:
    step: int
    candidate_ids: list[str]
    chosen_anchor_ids: list[str]
    nodes: list[NodeResult]
    adopted: bool
    current_rank: int
    budget_spent: int

    def to_trace_dict(self) -> dict:
        return {
            "step": self.step,
            "candidate_ids": self.candidate_ids,
            "chosen_anchor_ids": self.chosen_anchor_ids,
            "nodes": [
                {
                    "anchor_id": n.anchor_id,
                    "budget": n.assigned_budget,
                    "new_rank": n.new_rank,
                    "failed": n.failed,
                }
                for n in self.nodes
            ],
            "adopted": self.adopted,
            "current_rank": self.current_rank,
            "budget_spent": self.budget_spent,
        }


@dataclass
class ChainState:
    target_doc_id: str
    current_text: str
    current_rank: int
    original_rank: int
    current_list: RankedList
    step: int = 0
    budget_spent: int = 0
    trace: list[RoundRecord] = field(default_factory=list)

    @property
    def rank_gain(self) -> int:
        return self.original_rank - self.current_rank


def filter_candidates(
    ranked: RankedList, current_rank: int, m: int, s: float, rng: random.Random
) -> list[tuple[str, int]]:
    """Sample up to ``m`` distinct anchor candidates from the documents ranked
    strictly above ``current_rank``, drawing rank r with weight r**(-s) and
    renormalizing after each draw. Returns (doc_id, rank) pairs in draw order;
    empty when the target already leads the list."""
    if current_rank < 1:
        raise ChainError(f"current rank must be >= 1, got {current_rank}")
    eligible = list(ranked.entries[: current_rank - 1])
    if not eligible:
        return []
    weights = [entry.rank ** (-s) for entry in eligible]
    draws = min(m, len(eligible))
    chosen: list[tuple[str, int]] = []
    for _ in range(draws):
        total = sum(weights)
        x = rng.random() * total
        acc = 0.0
        pick = len(weights) - 1
        for idx, w in enumerate(weights):
            acc += w
            if x < acc:
                pick = idx
                break
        entry = eligible.pop(pick)
        weights.pop(pick)
        chosen.append((entry.doc_id, entry.rank))
    return chosen


def assign_budget(
    current_rank: int, anchor_rank: int, original_rank: int, epsilon: int, remaining_budget: int
) -> int:
    """Word budget for one node: the rank gap to the anchor, as a fraction of
    the original rank, times the total budget; floored and clamped to
    [1, remaining]. A spent budget (remaining 0) skips the node."""
    if anchor_rank >= current_rank:
        raise ChainError(f"anchor rank {anchor_rank} must outrank current rank {current_rank}")
    if original_rank < 1:
        raise ChainError(f"original rank must be >= 1, got {original_rank}")
    if remaining_budget < 0:
        raise ChainError(f"remaining budget must be >= 0, got {remaining_budget}")
    if remaining_budget == 0:
        return 0
    raw = (current_rank - anchor_rank) / original_rank * epsilon
    return max(1, min(math.floor(raw), remaining_budget))


def static_budget(epsilon: int, rounds: int, remaining_budget: int) -> int:
    """Per-node budget for the no_dynamic variant: an even epsilon/rounds
    split regardless of rank discrepancy, same clamping as assign_budget."""
    if remaining_budget == 0:
        return 0
    return max(1, min(math.floor(epsilon / rounds), remaining_budget))


def rotating_top_anchors(
    ranked: RankedList, current_rank: int, round_index: int, limit: int = ROTATION_POOL_SIZE
) -> list[tuple[str, int]]:
    """Anchors for the no_cot variant: the top documents of the current list
    (at most ``limit``, fewer when the target is near the top), with the lead
    anchor rotating by round index."""
    top = list(ranked.entries[: min(limit, current_rank - 1)])
    if not top:
        return []
    offset = (round_index - 1) % len(top)
    rotated = top[offset:] + top[:offset]
    return [(entry.doc_id, entry.rank) for entry in rotated]


def _node_budget(config: ChainConfig, state: ChainState, anchor_rank: int, remaining: int) -> int:
    if config.variant == "no_dynamic":
        return static_budget(config.epsilon, config.rounds, remaining)
    return assign_budget(state.current_rank, anchor_rank, state.original_rank, config.epsilon, remaining)


def run_round(
    state: ChainState,
    anchors: list[AnchorRef],
    attacker: Attacker,
    ranker: Ranker,
    corpus: Corpus,
    counter: QueryCounter,
    config: ChainConfig,
    query: Query,
    candidate_ids: list[str],
) -> tuple[NodeResult | None, ChainState]:
    """Perturb the target once per anchor, verify each with one re-ranking,
    and adopt the best strictly-improving node.

    Failed nodes (unparseable or over-budget perturbations) are verified with
    the unmodified text so every attempted anchor costs exactly one query.
    """
    if not anchors:
        raise ChainError("run_round needs at least one anchor")
    remaining = config.epsilon - state.budget_spent
    results: list[NodeResult] = []
    lists: dict[int, RankedList] = {}
    for anchor in anchors:
        budget = _node_budget(config, state, anchor.rank, remaining)
        if budget == 0:
            continue
        ctx = PromptContext(
            query=query,
            target_doc_text=state.current_text,
            anchors=(anchor,),
            rank_gain_x=state.rank_gain,
            word_budget=budget,
        )
        perturbed: str | None = None
        try:
            candidate_text = attacker.perturb(ctx)
            words = word_diff_count(state.current_text, candidate_text)
            if words <= budget:
                perturbed = candidate_text
        except PerturbationFailed:
            pass
        if perturbed is None:
            # Charge the verification query with the unmodified text.
            substitute = Document(id=state.target_doc_id, title="", body=state.current_text)
            _, new_rank = rerank_with_substitute(
                ranker, query, state.current_list, corpus, state.target_doc_id, substitute, counter
            )
            results.append(
                NodeResult(anchor.doc_id, anchor.rank, budget, None, new_rank, 0, failed=True)
            )
            continue
        substitute = Document(id=state.target_doc_id, title="", body=perturbed)
        new_list, new_rank = rerank_with_substitute(
            ranker, query, state.current_list, corpus, state.target_doc_id, substitute, counter
        )
        node = NodeResult(anchor.doc_id, anchor.rank, budget, perturbed, new_rank, words)
        lists[len(results)] = new_list
        results.append(node)

    best: NodeResult | None = None
    best_index = -1
    for idx, node in enumerate(results):
        if node.failed:
            continue
        if best is None or (node.new_rank, node.anchor_rank, node.anchor_id) < (
            best.new_rank,
            best.anchor_rank,
            best.anchor_id,
        ):
            best = node
            best_index = idx

    adopted = best is not None and best.new_rank < state.current_rank
    if adopted:
        assert best is not None and best.perturbed_text is not None
        state.current_text = best.perturbed_text
        state.current_rank = best.new_rank
        state.current_list = lists[best_index]
        state.budget_spent += best.words_used
    state.trace.append(
        RoundRecord(
            step=state.step,
            candidate_ids=list(candidate_ids),
            chosen_anchor_ids=[a.doc_id for a in anchors],
            nodes=results,
            adopted=adopted,
            current_rank=state.current_rank,
            budget_spent=state.budget_spent,
        )
    )
    return best, state


def _anchor_refs(corpus: Corpus, pairs: list[tuple[str, int]]) -> list[AnchorRef]:
    return [
        AnchorRef(doc_id=doc_id, snippet=snippet(corpus[doc_id], SNIPPET_SENTENCES), rank=rank)
        for doc_id, rank in pairs
    ]


def run_chain(
    query: Query,
    target: Document,
    pool: RankedList,
    config: ChainConfig,
    attacker: Attacker,
    ranker: Ranker,
    corpus: Corpus,
    counter: QueryCounter | None = None,
) -> AttackOutcome:
    """Run the full multi-round attack against one (query, target) pair.

    Stops early when the target reaches rank 1, no documents outrank it, or
    the word budget is exhausted.
    """
    counter = counter if counter is not None else QueryCounter()
    queries_before = counter.count
    rng = random.Random(config.seed)
    original_rank = pool.rank_of(target.id)
    state = ChainState(
        target_doc_id=target.id,
        current_text=target.text,
        current_rank=original_rank,
        original_rank=original_rank,
        current_list=pool,
    )
    for step in range(1, config.rounds + 1):
        if state.current_rank == 1:
            break
        if config.epsilon - state.budget_spent <= 0:
            break
        state.step = step
        if config.variant == "no_cot":
            pairs = rotating_top_anchors(state.current_list, state.current_rank, step)
            if not pairs:
                break
            anchors = _anchor_refs(corpus, pairs)
            candidate_ids = [a.doc_id for a in anchors]
        else:
            candidate_pairs = filter_candidates(state.current_list, state.current_rank, config.m, config.s, rng)
            if not candidate_pairs:
                break
            candidates = _anchor_refs(corpus, candidate_pairs)
            candidate_ids = [c.doc_id for c in candidates]
            n_effective = min(config.n, len(candidates))
            ctx = PromptContext(
                query=query,
                target_doc_text=state.current_text,
                anchors=tuple(candidates),
                rank_gain_x=state.rank_gain,
            )
            chosen_ids = attacker.select_anchors(ctx, n_effective)
            by_id = {c.doc_id: c for c in candidates}
            anchors = [by_id[doc_id] for doc_id in chosen_ids]
        run_round(state, anchors, attacker, ranker, corpus, counter, config, query, candidate_ids)
    return AttackOutcome(
        query_id=query.id,
        doc_id=target.id,
        original_rank=original_rank,
        final_rank=state.current_rank,
        queries_used=counter.count - queries_before,
        final_text=state.current_text,
        rounds=state.trace,
    )
