"""Deterministic synthetic corpora and datasets for demos and tests."""

from __future__ import annotations

import numpy as np

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
)
from .grpo import candidate_features

# Hidden preference used to order "learnable" labels: grades, engagement, recency.
HIDDEN_THETA = np.array([0.8, 0.5, 2.0, 1.5, 1.0])

BASE_TIME = 1_700_000_000

_TOPICS = [
    "phone camera", "battery life", "budget travel", "street food", "city museums",
    "python tutorial", "weather forecast", "marathon training", "home coffee",
    "indoor plants", "electric cars", "study tips", "hiking trails", "film reviews",
]

_QUERIES = {
    QueryType.COMPLEX: [
        "iPhone 15 vs Huawei Mate 60",
        "which is better, Kindle or Kobo",
        "Tesla Model 3 vs BYD Seal",
        "which is cheaper to visit, Tokyo or Seoul",
    ],
    QueryType.BROAD_NEEDS: [
        "Beijing travel guide",
        "Shanghai food guide",
        "marathon tips",
        "Chengdu travel",
    ],
    QueryType.SIMPLE: [
        "weather today",
        "Python tutorial",
        "latest news",
        "coffee grinder review",
    ],
}


def random_candidate(
    rng: np.random.Generator, cid: str, topic: str, covered: bool = True, graded: bool = True
) -> Candidate:
    rel = int(rng.integers(1, 5))
    qual = int(rng.integers(1, 5))
    return Candidate(
        id=cid,
        title=f"{topic.title()} notes #{cid}",
        content=f"A write-up about {topic} ({cid}).",
        side=SideInfo(
            publish_time=BASE_TIME + int(rng.integers(0, 90 * 86400)),
            click_through_rate=round(float(rng.uniform(0.0, 0.3)), 4),
            completion_rate=round(float(rng.uniform(0.1, 1.0)), 4),
        ),
        cover_image_ref=f"img://{topic.replace(' ', '-')}/{cid}.jpg" if covered else None,
        relevance_grade=Grade(rel, GradeDimension.RELEVANCE) if covered and graded else None,
        quality_grade=Grade(qual, GradeDimension.QUALITY) if covered and graded else None,
        source_subquery_dimensions=frozenset(
            d for d in IntentDimension if rng.random() < 0.4 and graded
        ),
    )


def random_candidate_set(rng: np.random.Generator, n: int, query: str, prefix: str = "d") -> CandidateSet:
    topic = _TOPICS[int(rng.integers(len(_TOPICS)))]
    cands = tuple(random_candidate(rng, f"{prefix}{i}", topic) for i in range(n))
    return CandidateSet(Query(query), cands)


def feature_order_label(cset: CandidateSet, theta: np.ndarray = HIDDEN_THETA) -> Ranking:
    """Label = candidates sorted by ``theta . features`` (ties broken by id)."""
    scores = candidate_features(cset) @ theta
    order = sorted(range(len(cset)), key=lambda i: (-scores[i], cset.ids[i]))
    return Ranking(tuple(cset.ids[i] for i in order))


def learnable_dataset(
    n_queries: int = 20, n_candidates: int = 8, seed: int = 7
) -> list[tuple[CandidateSet, Ranking]]:
    rng = np.random.default_rng(seed)
    out = []
    for q in range(n_queries):
        cset = random_candidate_set(rng, n_candidates, f"synthetic query {q}")
        out.append((cset, feature_order_label(cset)))
    return out


def eval_dataset(n_queries: int = 50, seed: int = 11) -> list[dict]:
    """Records with a label, a query type, and a noisy stored prediction."""
    rng = np.random.default_rng(seed)
    types = list(QueryType)
    records = []
    for q in range(n_queries):
        qtype = types[q % len(types)]
        texts = _QUERIES[qtype]
        text = texts[(q // len(types)) % len(texts)]
        n = int(rng.integers(6, 21))
        cset = random_candidate_set(rng, n, text, prefix=f"q{q}d")
        label = feature_order_label(cset)
        # Noisy prediction: perturb the label's rank positions.
        noise = rng.normal(0.0, 2.0, size=n)
        keyed = sorted(range(n), key=lambda i: i + noise[i])
        prediction = [label.ids[i] for i in keyed]
        records.append(
            {
                "query_id": f"q{q:03d}",
                "query_type": qtype.value,
                "candidate_set": cset.to_dict(),
                "label": list(label.ids),
                "prediction": prediction,
            }
        )
    return records


def demo_corpus(seed: int = 3, size: int = 60) -> list[Candidate]:
    """A small ungraded corpus; a third of the documents carry no cover image."""
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(size):
        topic = _TOPICS[i % len(_TOPICS)]
        corpus.append(random_candidate(rng, f"doc{i:03d}", topic, covered=(i % 3 != 2), graded=False))
    return corpus
