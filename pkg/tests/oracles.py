"""Independent reference implementations used to freeze expected values.

These deliberately avoid the package's metric code: position lookups are
done by linear search and sums are taken in arbitrary precision.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import mpmath

mpmath.mp.dps = 50


def oracle_gain(doc, label, k):
    n = len(label)
    for pos, d in enumerate(label, start=1):
        if d == doc:
            return n - pos if pos <= k else 0
    raise KeyError(doc)


def oracle_ndcg(pred, label, k):
    if len(label) == 1:
        return mpmath.mpf(1)
    dcg = mpmath.fsum(oracle_gain(d, label, k) / mpmath.log(i + 1, 2) for i, d in enumerate(pred[:k], start=1))
    idcg = mpmath.fsum(oracle_gain(d, label, k) / mpmath.log(i + 1, 2) for i, d in enumerate(label[:k], start=1))
    return dcg / idcg


def oracle_recall(pred, label, k):
    return Fraction(len(set(pred[:k]) & set(label[:k])), k)


def oracle_rbo(a, b, p):
    p = Fraction(p)
    total = Fraction(0)
    for d in range(1, len(a) + 1):
        agreement = Fraction(len(set(a[:d]) & set(b[:d])), d)
        total += p ** (d - 1) * agreement
    return (1 - p) * total


def oracle_grading_reward(pred, truth):
    gap = abs(pred - truth)
    if gap == 0:
        return 1.0
    if gap >= 2:
        return 0.0
    low = {1, 2}
    return 0.7 if (pred in low) == (truth in low) else 0.4


def oracle_pl_logprob(scores, order):
    # Sequential choice probabilities, evaluated in high precision.
    remaining = list(range(len(scores)))
    total = mpmath.mpf(0)
    for idx in order:
        denom = mpmath.fsum(mpmath.exp(scores[j]) for j in remaining)
        total += scores[idx] - mpmath.log(denom)
        remaining.remove(idx)
    return total


def all_perms(items):
    return [tuple(p) for p in itertools.permutations(items)]
