"""Target sampling, attack metrics, the spamicity proxy detector, and
embedding similarity.

The spamicity score is a windowed query-term density, a stand-in for
utility-based spam detectors: it is monotone in term stuffing and comparable
across methods, but it is a proxy and reports label it as such.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests

from .corpus import Query, tokenize
from .ranking import ProtocolError, RankedList

LEVELS = ("Easy", "Hard", "Mixture")
EASY_RANK_RANGE = (30, 60)
TARGETS_PER_LEVEL = 5
SPAM_WINDOW = 50
DEFAULT_SPAM_THRESHOLDS = (0.08, 0.06, 0.04, 0.02)
EMBEDDING_BUCKETS = 1024

Embedder = Callable[[str], Sequence[float]]


class EvaluationError(ValueError):
    pass


@dataclass
class AttackOutcome:
    """Per-target result of one attack run."""

    query_id: str
    doc_id: str
    original_rank: int
    final_rank: int
    queries_used: int
    final_text: str
    method: str = ""
    level: str = ""
    spamicity: float | None = None
    similarity: float | None = None
    rounds: list = field(default_factory=list, repr=False)

    @property
    def boosted(self) -> bool:
        return self.final_rank < self.original_rank

    @property
    def boost(self) -> int:
        return self.original_rank - self.final_rank

    def to_record(self) -> dict:
        """The documented outcome JSONL record."""
        return {
            "query_id": self.query_id,
            "doc_id": self.doc_id,
            "method": self.method,
            "level": self.level,
            "original_rank": self.original_rank,
            "final_rank": self.final_rank,
            "queries_used": self.queries_used,
            "spamicity": self.spamicity,
            "similarity": self.similarity,
        }


@dataclass
class MetricsReport:
    n: int
    asr: float
    boost: float
    boost_successful_only: float | None
    t10r: float
    qrs: float
    levels: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        record = {
            "n": self.n,
            "asr": self.asr,
            "boost": self.boost,
            "boost_successful_only": self.boost_successful_only,
            "t10r": self.t10r,
            "qrs": self.qrs,
        }
        if self.levels:
            record["levels"] = {level: report.to_dict() for level, report in self.levels.items()}
        return record


def select_targets(ranked: RankedList, level: str, rng: random.Random) -> list[str]:
    """Pick the five target documents for one query at the given level.

    Easy draws from ranks 30..60, Hard takes the bottom five, Mixture draws
    from the union of the query's Easy and Hard selections. Mixture consumes
    the generator exactly like Easy first, so an identically seeded generator
    yields consistent Easy/Mixture sets for the same query.
    """
    if level not in LEVELS:
        raise EvaluationError(f"unknown target level {level!r}")
    lo, hi = EASY_RANK_RANGE
    if level in ("Easy", "Mixture") and len(ranked) < hi:
        raise EvaluationError(f"{level} targets need a ranked list of >= {hi} entries, got {len(ranked)}")
    if len(ranked) < TARGETS_PER_LEVEL:
        raise EvaluationError(f"{level} targets need >= {TARGETS_PER_LEVEL} entries, got {len(ranked)}")
    by_rank = {entry.rank: entry.doc_id for entry in ranked.entries}

    def easy() -> list[str]:
        return [by_rank[rank] for rank in rng.sample(range(lo, hi + 1), TARGETS_PER_LEVEL)]

    def hard() -> list[str]:
        return [entry.doc_id for entry in ranked.entries[-TARGETS_PER_LEVEL:]]

    if level == "Easy":
        return easy()
    if level == "Hard":
        return hard()
    easy_ids = easy()
    union = easy_ids + [doc_id for doc_id in hard() if doc_id not in easy_ids]
    return rng.sample(union, TARGETS_PER_LEVEL)


def _metrics(outcomes: Sequence[AttackOutcome]) -> MetricsReport:
    n = len(outcomes)
    boosted = [o for o in outcomes if o.boosted]
    asr = 100.0 * len(boosted) / n
    boost = sum(o.boost for o in outcomes) / n
    boost_success = sum(o.boost for o in boosted) / len(boosted) if boosted else None
    t10r = 100.0 * sum(1 for o in outcomes if o.final_rank <= 10) / n
    qrs = sum(o.queries_used for o in outcomes) / n
    return MetricsReport(n=n, asr=asr, boost=boost, boost_successful_only=boost_success, t10r=t10r, qrs=qrs)


def compute_metrics(outcomes: Iterable[AttackOutcome]) -> MetricsReport:
    """ASR, mean Boost, T10R, and mean queries over a set of outcomes, with a
    per-level breakdown when outcomes carry level labels."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EvaluationError("no outcomes to evaluate")
    report = _metrics(outcomes)
    levels = sorted({o.level for o in outcomes if o.level})
    for level in levels:
        report.levels[level] = _metrics([o for o in outcomes if o.level == level])
    return report


def spamicity_score(query: Query, text: str) -> float:
    """Highest query-token density over all windows of min(50, len) tokens."""
    tokens = tokenize(text)
    if not tokens:
        return 0.0
    query_tokens = set(tokenize(query.text))
    window = min(SPAM_WINDOW, len(tokens))
    hits = [1 if tok in query_tokens else 0 for tok in tokens]
    current = sum(hits[:window])
    best = current
    for i in range(window, len(hits)):
        current += hits[i] - hits[i - window]
        if current > best:
            best = current
    return best / window


def detect(score: float, threshold: float) -> bool:
    return score >= threshold


def hashed_bag_embedder(text: str, buckets: int = EMBEDDING_BUCKETS) -> list[float]:
    """Deterministic bag-of-tokens embedding: each token is hashed into one of
    ``buckets`` dimensions and counted."""
    vector = [0.0] * buckets
    for token in tokenize(text):
        digest = hashlib.sha1(token.encode("utf-8")).digest()
        vector[int.from_bytes(digest[:4], "big") % buckets] += 1.0
    return vector


def semantic_similarity(a: str, b: str, embedder: Embedder = hashed_bag_embedder) -> float:
    """Normalized cosine similarity (cos + 1) / 2 between the two embeddings."""
    va = list(embedder(a))
    vb = list(embedder(b))
    if len(va) != len(vb):
        raise EvaluationError(f"embedder returned mismatched dimensions {len(va)} and {len(vb)}")
    norm_a = math.sqrt(sum(x * x for x in va))
    norm_b = math.sqrt(sum(x * x for x in vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise EvaluationError("degenerate embedding")
    cosine = sum(x * y for x, y in zip(va, vb)) / (norm_a * norm_b)
    return (cosine + 1.0) / 2.0


class RemoteEmbedder:
    """HTTP embedder: POST {"texts": [str, ...]} -> {"embeddings": [[...], ...]}."""

    def __init__(self, base_url: str, timeout: float = 30.0, session: requests.Session | None = None):
        self.base_url = base_url
        self.timeout = timeout
        self._session = session or requests.Session()

    def __call__(self, text: str) -> list[float]:
        response = self._session.post(self.base_url, json={"texts": [text]}, timeout=self.timeout)
        response.raise_for_status()
        body = response.json()
        embeddings = body.get("embeddings") if isinstance(body, dict) else None
        if not isinstance(embeddings, list) or len(embeddings) != 1:
            raise ProtocolError("remote embedder response missing 'embeddings' list of length 1")
        return [float(x) for x in embeddings[0]]


def detection_rates(
    outcomes: Sequence[AttackOutcome], thresholds: Sequence[float] = DEFAULT_SPAM_THRESHOLDS
) -> dict[str, float]:
    """Percentage of outcomes flagged at each threshold (keys are the
    thresholds as strings); outcomes without a spamicity score are skipped."""
    scored = [o for o in outcomes if o.spamicity is not None]
    rates: dict[str, float] = {}
    for threshold in thresholds:
        if scored:
            flagged = sum(1 for o in scored if detect(o.spamicity, threshold))
            rates[f"{threshold:g}"] = 100.0 * flagged / len(scored)
        else:
            rates[f"{threshold:g}"] = 0.0
    return rates


def _fmt(value: float | None, digits: int = 1) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def emit_report(
    outcomes: Sequence[AttackOutcome],
    out_dir: str | Path,
    thresholds: Sequence[float] = DEFAULT_SPAM_THRESHOLDS,
    external: dict | None = None,
) -> dict[str, Path]:
    """Write outcomes.jsonl, metrics.json, and a Markdown summary.

    The summary has one row per method and level; ``external`` may supply
    extra rows of the same shape for methods computed elsewhere
    ({method: {level: {asr, boost, t10r, qrs, ...}}}).
    """
    outcomes = list(outcomes)
    if not outcomes:
        raise EvaluationError("no outcomes to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    outcomes_path = out_dir / "outcomes.jsonl"
    ordered = sorted(outcomes, key=lambda o: (o.method, o.level, o.query_id, o.doc_id))
    with open(outcomes_path, "w", encoding="utf-8") as fh:
        for outcome in ordered:
            fh.write(json.dumps(outcome.to_record(), sort_keys=True) + "\n")

    methods = sorted({o.method for o in outcomes})
    metrics = {method: compute_metrics([o for o in outcomes if o.method == method]) for method in methods}
    rates = {method: detection_rates([o for o in outcomes if o.method == method], thresholds) for method in methods}
    metrics_path = out_dir / "metrics.json"
    payload = {
        "methods": {m: metrics[m].to_dict() for m in methods},
        "spamicity_detection_rates": rates,
        "spamicity_thresholds": list(thresholds),
    }
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["# Attack results", "", "| method | level | n | ASR | Boost | Boost (boosted only) | T10R | Qrs |",
             "|---|---|---|---|---|---|---|---|"]
    for method in methods:
        report = metrics[method]
        by_level = report.levels or {"all": report}
        for level in sorted(by_level):
            sub = by_level[level]
            lines.append(
                f"| {method} | {level} | {sub.n} | {_fmt(sub.asr)} | {_fmt(sub.boost)} "
                f"| {_fmt(sub.boost_successful_only)} | {_fmt(sub.t10r)} | {_fmt(sub.qrs)} |"
            )
    for method, levels in sorted((external or {}).items()):
        for level, values in sorted(levels.items()):
            lines.append(
                f"| {method} (external) | {level} | {values.get('n', '-')} | {_fmt(values.get('asr'))} "
                f"| {_fmt(values.get('boost'))} | {_fmt(values.get('boost_successful_only'))} "
                f"| {_fmt(values.get('t10r'))} | {_fmt(values.get('qrs'))} |"
            )

    lines += ["", "## Spamicity detection rate (%) by threshold (proxy detector, not OSD)", ""]
    header = "| method | " + " | ".join(f"{t:g}" for t in thresholds) + " |"
    lines += [header, "|---|" + "---|" * len(thresholds)]
    for method in methods:
        row = " | ".join(_fmt(rates[method][f"{t:g}"]) for t in thresholds)
        lines.append(f"| {method} | {row} |")
    summary_path = out_dir / "summary.md"
    summary_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    return {"outcomes": outcomes_path, "metrics": metrics_path, "summary": summary_path}
