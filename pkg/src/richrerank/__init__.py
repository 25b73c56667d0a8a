"""Rich-media listwise re-ranking: metrics, rewards, GRPO, parsing, planning and pipeline."""

from .core import (
    Candidate,
    CandidateSet,
    Grade,
    GradeDimension,
    IntentDimension,
    Query,
    QueryType,
    Ranking,
    SideInfo,
    SubQuery,
    is_permutation,
    validate_candidate_set,
)
from .metrics import ndcg_at_k, rbo, rbo_normalized, recall_at_k
from .parsing import parse_grading, parse_rerank
from .rewards import GammaWeights, grading_task_reward, rerank_task_reward

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CandidateSet",
    "GammaWeights",
    "Grade",
    "GradeDimension",
    "IntentDimension",
    "Query",
    "QueryType",
    "Ranking",
    "SideInfo",
    "SubQuery",
    "grading_task_reward",
    "is_permutation",
    "ndcg_at_k",
    "parse_grading",
    "parse_rerank",
    "rbo",
    "rbo_normalized",
    "recall_at_k",
    "rerank_task_reward",
    "validate_candidate_set",
]
