"""Reward functions for cover grading and listwise re-ranking responses.

Overall reward for one response is ``format + task``. Grading responses earn
0.0 / 0.3 / 0.5 for format and a piecewise task reward that punishes crossing
the 2|3 preference boundary. Re-ranking responses earn 0.0 / 0.2 / 0.5 for
format and a gamma-weighted blend of NDCG@10, Recall@10, RBO, NDCG@4 and
Recall@4 for the task, which is only computed for complete permutations.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

from .core import CandidateSet, Grade, Ranking, as_ids, crosses_boundary, is_permutation
from .metrics import DEFAULT_RBO_P, clamp_k, ndcg_at_k, rbo, recall_at_k
from .parsing import GradingFormat, ParsedGradingResponse, ParsedRerankResponse

GRADING_FORMAT_REWARD = {
    GradingFormat.NO_VALID_ANSWER: 0.0,
    GradingFormat.NON_INTEGER_ANSWER: 0.3,
    GradingFormat.VALID_ANSWER: 0.5,
}

RERANK_NO_ANSWER = 0.0
RERANK_DEGENERATE = 0.2
RERANK_VALID = 0.5


class TaskKind(str, enum.Enum):
    RELEVANCE = "relevance"
    QUALITY = "quality"
    RERANK = "rerank"


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class GammaWeights:
    ndcg10: float = 0.2
    recall10: float = 0.2
    rbo: float = 0.2
    ndcg4: float = 0.2
    recall4: float = 0.2

    def __post_init__(self) -> None:
        values = self.as_tuple()
        if not all(math.isfinite(g) and g >= 0 for g in values):
            raise RewardError(f"gamma weights must be finite and >= 0, got {values}")
        if not any(g > 0 for g in values):
            raise RewardError("at least one gamma weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.ndcg10, self.recall10, self.rbo, self.ndcg4, self.recall4)

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> GammaWeights:
        if len(values) != 5:
            raise RewardError(f"expected 5 gamma weights, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class RewardBreakdown:
    kind: TaskKind
    format_reward: float
    task_reward: float
    total: float
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "format_reward": self.format_reward,
            "task_reward": self.task_reward,
            "total": self.total,
            "flags": list(self.flags),
        }


def grading_format_reward(parse: ParsedGradingResponse) -> float:
    return GRADING_FORMAT_REWARD[parse.format_class]


def grading_task_reward(pred: Grade | int, truth: Grade | int) -> float:
    """Piecewise grade reward: 1.0 exact, 0.7 adjacent, 0.4 adjacent across 2|3, else 0.

    Predictions outside 1..4 score 0 regardless of distance.
    """
    if isinstance(pred, Grade) and isinstance(truth, Grade) and pred.dimension is not truth.dimension:
        raise RewardError(
            f"grade dimension mismatch: {pred.dimension.value} vs {truth.dimension.value}"
        )
    p = pred.value if isinstance(pred, Grade) else pred
    t = truth.value if isinstance(truth, Grade) else truth
    if not 1 <= t <= 4:
        raise RewardError(f"ground-truth grade {t} outside [1, 4]")
    if not 1 <= p <= 4:
        return 0.0
    diff = abs(p - t)
    if diff == 0:
        return 1.0
    if diff == 1:
        return 0.4 if crosses_boundary(p, t) else 0.7
    return 0.0


def rerank_format_reward(parse: ParsedRerankResponse, cset: CandidateSet | Sequence[str]) -> float:
    if parse.ids is None:
        return RERANK_NO_ANSWER
    if is_permutation(parse.ids, cset):
        return RERANK_VALID
    return RERANK_DEGENERATE


@dataclass(frozen=True)
class TaskReward:
    value: float
    flag: str | None = None


def rerank_task_reward_detail(
    pred: Ranking | Sequence[str] | None,
    label: Ranking | Sequence[str],
    gammas: GammaWeights = GammaWeights(),
    rbo_p: float = DEFAULT_RBO_P,
) -> TaskReward:
    if pred is None or not is_permutation(pred, as_ids(label)):
        return TaskReward(0.0, "incomplete-prediction")
    n = len(as_ids(label))
    k10, k4 = clamp_k(10, n), clamp_k(4, n)
    g = gammas
    value = (
        g.ndcg10 * ndcg_at_k(pred, label, k10)
        + g.recall10 * recall_at_k(pred, label, k10)
        + g.rbo * rbo(pred, label, rbo_p)
        + g.ndcg4 * ndcg_at_k(pred, label, k4)
        + g.recall4 * recall_at_k(pred, label, k4)
    )
    return TaskReward(value)


def rerank_task_reward(
    pred: Ranking | Sequence[str] | None,
    label: Ranking | Sequence[str],
    gammas: GammaWeights = GammaWeights(),
    rbo_p: float = DEFAULT_RBO_P,
) -> float:
    """Gamma-weighted list reward; 0.0 for anything that is not a full permutation."""
    return rerank_task_reward_detail(pred, label, gammas, rbo_p).value


def overall_reward(
    kind: TaskKind, format_r: float, task_r: float, flags: Sequence[str] = ()
) -> RewardBreakdown:
    return RewardBreakdown(TaskKind(kind), format_r, task_r, format_r + task_r, tuple(flags))


def score_grading_response(text: str, truth: Grade | int, kind: TaskKind) -> RewardBreakdown:
    from .parsing import parse_grading

    parse = parse_grading(text)
    fmt = grading_format_reward(parse)
    if parse.grade is None:
        return overall_reward(kind, fmt, 0.0, [parse.format_class.value])
    return overall_reward(kind, fmt, grading_task_reward(parse.grade, truth))


def score_rerank_response(
    text: str,
    label: Ranking | Sequence[str],
    gammas: GammaWeights = GammaWeights(),
    rbo_p: float = DEFAULT_RBO_P,
) -> RewardBreakdown:
    from .parsing import parse_rerank

    target = as_ids(label)
    parse = parse_rerank(text, target)
    fmt = rerank_format_reward(parse, target)
    detail = rerank_task_reward_detail(parse.ids, target, gammas, rbo_p)
    flags = [detail.flag] if detail.flag else []
    return overall_reward(TaskKind.RERANK, fmt, detail.value, flags)
