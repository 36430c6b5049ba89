"""Retrieval metrics: truncated mAP, grouped reporting, negative baselines,
and per-query re-ranking latency summaries."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import errors
from .core import Qrels


def ap_at_k(ranked_ids, positives, k: int) -> float:
    """Average precision truncated at rank k.

    Sum of precision-at-hit over the top k, normalized by min(|positives|, k)
    so a perfect truncated ranking scores 1.0.
    """
    if k < 1:
        raise errors.OutOfRange(f"k={k} must be >= 1")
    positives = set(positives)
    if not positives:
        raise errors.NoPositives("no positive images for query")
    hits = 0
    score = 0.0
    for rank, image_id in enumerate(ranked_ids[:k], start=1):
        if image_id in positives:
            hits += 1
            score += hits / rank
    return score / min(len(positives), k)


@dataclass(frozen=True)
class TimingSummary:
    count: int
    mean_s: float | None
    p50_s: float | None
    p95_s: float | None


@dataclass(frozen=True)
class EvalReport:
    k: int
    map_at_k: float
    per_query: dict[str, float]
    per_group: dict[str, float] | None = None
    timing: TimingSummary | None = None


def evaluate(ranked_lists, qrels: Qrels, k: int, with_groups: bool = False) -> EvalReport:
    """Mean AP@k over queries, optionally split by qrels group labels.

    A group's mean runs over the queries that have at least one positive
    carrying that label; the per-query AP is the query's overall AP.
    """
    per_query: dict[str, float] = {}
    for ranked in ranked_lists:
        if ranked.query_id not in qrels:
            raise errors.MissingQrels(f"query {ranked.query_id!r} missing from qrels")
        per_query[ranked.query_id] = ap_at_k(
            ranked.image_ids(), qrels.positives(ranked.query_id), k
        )
    if not per_query:
        raise errors.EmptyCorpus("no ranked lists to evaluate")
    map_at_k = float(np.mean(list(per_query.values())))
    per_group = None
    if with_groups:
        per_group = {}
        for label in qrels.group_labels():
            members = [q for q in qrels.queries_in_group(label) if q in per_query]
            if members:
                per_group[label] = float(np.mean([per_query[q] for q in members]))
    return EvalReport(k=k, map_at_k=map_at_k, per_query=per_query, per_group=per_group)


def negative_baseline(per_query_scores: dict) -> float:
    """Mean across queries of the per-query 5th percentile of negative scores.

    Percentiles interpolate linearly between order statistics.
    """
    if not per_query_scores:
        raise errors.EmptyScores("no queries")
    baselines = []
    for query_id, scores in per_query_scores.items():
        scores = np.asarray(list(scores), dtype=np.float64)
        if scores.size == 0:
            raise errors.EmptyScores(f"query {query_id!r} has no negative scores")
        baselines.append(np.percentile(scores, 5.0))
    return float(np.mean(baselines))


def time_rerank(rerank_query, queries, k: int) -> TimingSummary:
    """Wall-clock the per-query re-rank callable over a set of queries.

    ``rerank_query(query, k)`` should run scoring + fusion + sorting for one
    query; index building stays outside the timed region.
    """
    samples = []
    for query in queries:
        start = time.perf_counter()
        rerank_query(query, k)
        samples.append(time.perf_counter() - start)
    if not samples:
        return TimingSummary(0, None, None, None)
    arr = np.asarray(samples)
    return TimingSummary(
        count=len(samples),
        mean_s=float(arr.mean()),
        p50_s=float(np.percentile(arr, 50.0)),
        p95_s=float(np.percentile(arr, 95.0)),
    )


def report_to_csv(report: EvalReport) -> str:
    """Serialize a report: one summary row, then query rows, then group rows."""
    lines = []
    if report.timing and report.timing.count:
        t = report.timing
        lines.append(
            f"summary,{report.k},{report.map_at_k!r},{t.mean_s!r},{t.p50_s!r},{t.p95_s!r}"
        )
    else:
        lines.append(f"summary,{report.k},{report.map_at_k!r},,,")
    for query_id in sorted(report.per_query):
        lines.append(f"query,{query_id},{report.per_query[query_id]!r}")
    if report.per_group is not None:
        for label in sorted(report.per_group):
            lines.append(f"group,{label},{report.per_group[label]!r}")
    return "\n".join(lines) + "\n"
