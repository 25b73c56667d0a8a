"""Shared data model: queries, candidates, grades, rankings.

All types are frozen dataclasses. Constructors are deliberately lenient for
fields that come from untrusted data (rates, grades, ids) so that a bad record
can still be represented and reported by :func:`validate_candidate_set`
instead of blowing up during decoding.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence


class IntentDimension(str, enum.Enum):
    HIGH_FRESHNESS = "HighFreshness"
    AUTHORITATIVENESS = "Authoritativeness"
    PERSONAL_EXPERIENCE = "PersonalExperience"


class QueryType(str, enum.Enum):
    COMPLEX = "Complex"
    BROAD_NEEDS = "BroadNeeds"
    SIMPLE = "Simple"


class GradeDimension(str, enum.Enum):
    RELEVANCE = "Relevance"
    QUALITY = "Quality"


GRADE_LABELS = {
    GradeDimension.RELEVANCE: {
        4: "Strongly Relevant",
        3: "Relevant",
        2: "Weakly Relevant",
        1: "Irrelevant",
    },
    GradeDimension.QUALITY: {
        4: "High Quality",
        3: "Average",
        2: "Poor",
        1: "Very Poor",
    },
}


def _dims(values: Iterable[Any]) -> frozenset[IntentDimension]:
    return frozenset(IntentDimension(v) for v in values)


def _sorted_dims(dims: Iterable[IntentDimension]) -> list[str]:
    return sorted(d.value for d in dims)


@dataclass(frozen=True)
class Query:
    text: str
    session: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError("query text must be non-empty")
        object.__setattr__(self, "session", tuple(self.session))

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "session": list(self.session)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Query:
        return cls(text=data["text"], session=tuple(data.get("session", ())))


@dataclass(frozen=True)
class SubQuery:
    text: str
    dimensions: frozenset[IntentDimension] = frozenset()

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValueError("sub-query text must be non-empty")
        object.__setattr__(self, "dimensions", _dims(self.dimensions))

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "dimensions": _sorted_dims(self.dimensions)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SubQuery:
        return cls(text=data["text"], dimensions=_dims(data.get("dimensions", ())))


@dataclass(frozen=True)
class Grade:
    """A four-tier cover grade. Values outside 1..4 are representable but invalid."""

    value: int
    dimension: GradeDimension

    def __post_init__(self) -> None:
        object.__setattr__(self, "dimension", GradeDimension(self.dimension))

    @property
    def is_valid(self) -> bool:
        return isinstance(self.value, int) and 1 <= self.value <= 4

    @property
    def is_favorable(self) -> bool:
        """Upper preference interval (3-4); grades 1-2 are the lower interval."""
        return self.value >= 3

    @property
    def label(self) -> str:
        return GRADE_LABELS[self.dimension].get(self.value, "Invalid")

    def to_dict(self) -> dict[str, Any]:
        return {"value": self.value, "dimension": self.dimension.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Grade:
        return cls(value=data["value"], dimension=GradeDimension(data["dimension"]))


def crosses_boundary(g1: int, g2: int) -> bool:
    """True iff exactly one of the two grades lies in the lower interval {1, 2}."""
    return (g1 <= 2) != (g2 <= 2)


@dataclass(frozen=True)
class SideInfo:
    publish_time: int = 0
    click_through_rate: float = 0.0
    completion_rate: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "publish_time": self.publish_time,
            "click_through_rate": self.click_through_rate,
            "completion_rate": self.completion_rate,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SideInfo:
        return cls(
            publish_time=int(data.get("publish_time", 0)),
            click_through_rate=float(data.get("click_through_rate", 0.0)),
            completion_rate=float(data.get("completion_rate", 0.0)),
        )


@dataclass(frozen=True)
class Candidate:
    id: str
    title: str = ""
    content: str = ""
    side: SideInfo = field(default_factory=SideInfo)
    cover_image_ref: str | None = None
    relevance_grade: Grade | None = None
    quality_grade: Grade | None = None
    source_subquery_dimensions: frozenset[IntentDimension] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "source_subquery_dimensions", _dims(self.source_subquery_dimensions)
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "title": self.title,
            "content": self.content,
            "side": self.side.to_dict(),
            "cover_image_ref": self.cover_image_ref,
            "relevance_grade": self.relevance_grade.to_dict() if self.relevance_grade else None,
            "quality_grade": self.quality_grade.to_dict() if self.quality_grade else None,
            "source_subquery_dimensions": _sorted_dims(self.source_subquery_dimensions),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Candidate:
        rel = data.get("relevance_grade")
        qual = data.get("quality_grade")
        return cls(
            id=str(data["id"]),
            title=data.get("title", ""),
            content=data.get("content", ""),
            side=SideInfo.from_dict(data.get("side", {})),
            cover_image_ref=data.get("cover_image_ref"),
            relevance_grade=Grade.from_dict(rel) if rel else None,
            quality_grade=Grade.from_dict(qual) if qual else None,
            source_subquery_dimensions=_dims(data.get("source_subquery_dimensions", ())),
        )


@dataclass(frozen=True)
class CandidateSet:
    query: Query
    candidates: tuple[Candidate, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    def by_id(self) -> dict[str, Candidate]:
        return {c.id: c for c in self.candidates}

    def reordered(self, ids: Sequence[str]) -> CandidateSet:
        lookup = self.by_id()
        return CandidateSet(self.query, tuple(lookup[i] for i in ids))

    def to_dict(self) -> dict[str, Any]:
        return {
            "query": self.query.to_dict(),
            "candidates": [c.to_dict() for c in self.candidates],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CandidateSet:
        return cls(
            query=Query.from_dict(data["query"]),
            candidates=tuple(Candidate.from_dict(c) for c in data["candidates"]),
        )


@dataclass(frozen=True)
class Ranking:
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def to_dict(self) -> dict[str, Any]:
        return {"ids": list(self.ids)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Ranking:
        return cls(ids=tuple(str(i) for i in data["ids"]))


def as_ids(ranking: Ranking | Sequence[str]) -> tuple[str, ...]:
    if isinstance(ranking, Ranking):
        return ranking.ids
    return tuple(ranking)


def _id_ok(cid: str) -> bool:
    # Ids must survive a round trip through "[a, b, c]" answer syntax.
    return (
        isinstance(cid, str)
        and cid == cid.strip()
        and cid != ""
        and not any(ch in cid for ch in ",[]\'\"")
    )


def _rate_ok(x: float) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x) and 0.0 <= x <= 1.0


def validate_candidate_set(cset: CandidateSet) -> list[str]:
    """Return every invariant violation in ``cset``; an empty list means ok."""
    violations: list[str] = []
    if not cset.candidates:
        violations.append("empty candidate set")
    counts = Counter(c.id for c in cset.candidates)
    for cid, count in counts.items():
        if count > 1:
            violations.append(f"duplicate id {cid}")
        if not _id_ok(cid):
            violations.append(f"id {cid!r} is not renderable in an answer list")
    for c in cset.candidates:
        for name in ("click_through_rate", "completion_rate"):
            value = getattr(c.side, name)
            if not _rate_ok(value):
                violations.append(f"candidate {c.id}: {name} {value!r} rate out of [0,1]")
        for name, expected in (
            ("relevance_grade", GradeDimension.RELEVANCE),
            ("quality_grade", GradeDimension.QUALITY),
        ):
            grade = getattr(c, name)
            if grade is None:
                continue
            if not grade.is_valid:
                violations.append(f"candidate {c.id}: {name} {grade.value!r} grade out of [1,4]")
            if grade.dimension is not expected:
                violations.append(f"candidate {c.id}: {name} has dimension {grade.dimension.value}")
    return violations


def is_permutation(ranking: Ranking | Sequence[str], cset: CandidateSet | Sequence[str]) -> bool:
    ids = as_ids(ranking)
    target = cset.ids if isinstance(cset, CandidateSet) else tuple(cset)
    return len(ids) == len(target) and len(set(ids)) == len(ids) and set(ids) == set(target)
