"""Offline ranking metrics: NDCG@K, Recall@K and truncated Rank-Biased Overlap.

Gains are derived from the label permutation itself: a document at 1-indexed
label position ``j`` gains ``n - j`` if it is inside the label's top-K and 0
otherwise. RBO is the finite sum over depths 1..n with no residual term, so two
identical lists of length n score ``1 - p**n`` rather than 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import Ranking, as_ids

DEFAULT_RBO_P = 0.9


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    k: int = 10
    rbo_p: float = DEFAULT_RBO_P

    def __post_init__(self) -> None:
        if self.k < 1:
            raise MetricError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.rbo_p < 1.0:
            raise MetricError(f"rbo_p must lie in (0, 1), got {self.rbo_p}")


RankingLike = Ranking | Sequence[str]


def _check_pair(pred: RankingLike, label: RankingLike) -> tuple[tuple[str, ...], tuple[str, ...]]:
    p, l = as_ids(pred), as_ids(label)
    if len(set(l)) != len(l):
        raise MetricError("label ranking contains duplicate ids")
    if len(p) != len(l) or set(p) != set(l) or len(set(p)) != len(p):
        raise MetricError("prediction and label are not permutations of the same id set")
    return p, l


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise MetricError(f"cutoff k={k} outside [1, {n}]")


def relevance_gain(doc_id: str, label: RankingLike, k: int) -> int:
    ids = as_ids(label)
    n = len(ids)
    _check_k(k, n)
    try:
        position = ids.index(doc_id) + 1
    except ValueError:
        raise MetricError(f"id not in label ranking: {doc_id!r}") from None
    return n - position if position <= k else 0


def _dcg(ids: Sequence[str], gains: dict[str, int], k: int) -> float:
    return sum(gains.get(d, 0) / math.log2(i + 2) for i, d in enumerate(ids[:k]))


def ndcg_at_k(pred: RankingLike, label: RankingLike, k: int) -> float:
    p, l = _check_pair(pred, label)
    n = len(l)
    _check_k(k, n)
    if n == 1:
        return 1.0
    gains = {d: n - (j + 1) for j, d in enumerate(l[:k])}
    return _dcg(p, gains, k) / _dcg(l, gains, k)


def recall_at_k(pred: RankingLike, label: RankingLike, k: int) -> float:
    p, l = _check_pair(pred, label)
    _check_k(k, len(l))
    return len(set(p[:k]) & set(l[:k])) / k


def _rbo_sum(a: Sequence[str], b: Sequence[str], p: float) -> float:
    seen_a: set[str] = set()
    seen_b: set[str] = set()
    overlap = 0
    total = 0.0
    weight = 1.0
    for depth, (x, y) in enumerate(zip(a, b), start=1):
        if x == y:
            overlap += 1
        else:
            overlap += (x in seen_b) + (y in seen_a)
        seen_a.add(x)
        seen_b.add(y)
        total += weight * overlap / depth
        weight *= p
    return (1.0 - p) * total


def rbo(pred: RankingLike, label: RankingLike, p: float = DEFAULT_RBO_P) -> float:
    """Truncated RBO over rankings of the same id set."""
    if not 0.0 < p < 1.0:
        raise MetricError(f"rbo persistence p must lie in (0, 1), got {p}")
    a, b = _check_pair(pred, label)
    return _rbo_sum(a, b, p)


def rbo_pairwise(a: RankingLike, b: RankingLike, p: float = DEFAULT_RBO_P) -> float:
    """Truncated RBO between two equal-length, duplicate-free lists.

    Unlike :func:`rbo` the id sets may differ (disjoint lists score 0.0).
    """
    if not 0.0 < p < 1.0:
        raise MetricError(f"rbo persistence p must lie in (0, 1), got {p}")
    x, y = as_ids(a), as_ids(b)
    if len(x) != len(y):
        raise MetricError("rbo requires equal-length rankings")
    if len(set(x)) != len(x) or len(set(y)) != len(y):
        raise MetricError("rbo requires duplicate-free rankings")
    return _rbo_sum(x, y, p)


def rbo_normalized(pred: RankingLike, label: RankingLike, p: float = DEFAULT_RBO_P) -> float:
    """RBO rescaled by ``1 - p**n`` so identical lists score 1. Not used for rewards."""
    n = len(as_ids(label))
    return rbo(pred, label, p) / (1.0 - p**n)


def clamp_k(k: int, n: int) -> int:
    return max(1, min(k, n))
