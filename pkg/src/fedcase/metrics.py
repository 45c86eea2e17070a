"""F1 for classification, DCG / nDCG for explanation rankings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .errors import DegenerateRankingError, RankingMismatchError

DEFAULT_P = 9


def f1_score(predictions: Sequence[int], truths: Sequence[int]) -> float:
    """F1 of the positive class; 0 when precision + recall is 0."""
    pred = np.asarray(predictions).astype(np.int64)
    true = np.asarray(truths).astype(np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise ValueError("f1_score needs at least one example")
    tp = int(np.count_nonzero((pred == 1) & (true == 1)))
    fp = int(np.count_nonzero((pred == 1) & (true == 0)))
    fn = int(np.count_nonzero((pred == 0) & (true == 1)))
    # 2PR/(P+R) written in counts
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def assign_relevance(rank: int, p: int) -> int:
    """Relevance for 1-based ground-truth rank: 5 for the most similar, 1 for the least.

    Linear in the rank with round-half-up.
    """
    if p < 2:
        raise DegenerateRankingError(f"need at least 2 ranked items, got p={p}")
    if not 1 <= rank <= p:
        raise ValueError(f"rank {rank} outside 1..{p}")
    # exact integer form of 1 + floor(4 (p - rank) / (p - 1) + 1/2)
    return 1 + (8 * (p - rank) + (p - 1)) // (2 * (p - 1))


def dcg(relevances: Sequence[float]) -> float:
    rel = np.asarray(relevances, dtype=np.float64)
    if rel.size == 0:
        raise ValueError("dcg of an empty ranking")
    discounts = np.log2(np.arange(2, rel.size + 2, dtype=np.float64))
    return float(np.sum((2.0 ** rel - 1.0) / discounts))


@dataclass
class RankingEval:
    query_id: int
    p: int
    ground_truth_order: list
    method_order: list
    relevances: list  # in method order
    dcg: float
    idcg: float
    ndcg: float


def evaluate_ranking(method_order: Sequence[Hashable], ground_truth_order: Sequence[Hashable],
                     p: int | None = None, query_id: int = -1) -> RankingEval:
    method_order = list(method_order)
    ground_truth_order = list(ground_truth_order)
    p = len(ground_truth_order) if p is None else p
    if len(method_order) != p or len(ground_truth_order) != p:
        raise RankingMismatchError(
            f"both orders must hold p={p} items (got {len(method_order)} and {len(ground_truth_order)})")
    if len(set(ground_truth_order)) != p or set(method_order) != set(ground_truth_order):
        raise RankingMismatchError("method order is not a permutation of the ground-truth items")
    rel_of = {item: assign_relevance(i + 1, p) for i, item in enumerate(ground_truth_order)}
    rels = [rel_of[item] for item in method_order]
    d = dcg(rels)
    ideal = dcg([rel_of[item] for item in ground_truth_order])
    return RankingEval(query_id, p, ground_truth_order, method_order, rels, d, ideal, d / ideal)


def ndcg(method_order, ground_truth_order, p: int | None = None) -> float:
    return evaluate_ranking(method_order, ground_truth_order, p).ndcg


def severity_ground_truth(query_severity: float, candidates: Sequence[tuple[int, float]]) -> list[int]:
    """Candidate ids ordered by |severity difference| to the query, ties by id."""
    return [cid for cid, _ in sorted(candidates, key=lambda c: (abs(query_severity - c[1]), c[0]))]
