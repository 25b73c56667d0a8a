"""Session-aware query planning and candidate-set assembly.

``plan`` asks a planner backend to classify the query and decompose it into
sub-queries tagged with intent dimensions, then validates the answer.
``rule_stub_plan`` is the deterministic offline planner the stub backend uses.
"""

from __future__ import annotations

import difflib
import json
import re
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from .core import Candidate, CandidateSet, IntentDimension, Query, QueryType, SubQuery

A = IntentDimension.AUTHORITATIVENESS
HF = IntentDimension.HIGH_FRESHNESS
PE = IntentDimension.PERSONAL_EXPERIENCE

DEFAULT_RETRIEVAL_K = 10
STUB_MAX_SUBQUERIES = 4


class PlanValidationError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid plan: " + "; ".join(self.violations))


class NoCandidatesError(ValueError):
    pass


@dataclass(frozen=True)
class SubQueryPlan:
    original: Query
    query_type: QueryType
    subqueries: tuple[SubQuery, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "query_type", QueryType(self.query_type))
        object.__setattr__(self, "subqueries", tuple(self.subqueries))

    def to_dict(self) -> dict[str, Any]:
        return {
            "original": self.original.to_dict(),
            "query_type": self.query_type.value,
            "subqueries": [s.to_dict() for s in self.subqueries],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SubQueryPlan:
        return cls(
            original=Query.from_dict(data["original"]),
            query_type=QueryType(data["query_type"]),
            subqueries=tuple(SubQuery.from_dict(s) for s in data["subqueries"]),
        )


def plan_violations(p: SubQueryPlan, max_subqueries: int | None = None) -> list[str]:
    violations = []
    if not p.subqueries:
        violations.append("plan has no sub-queries")
    texts = [s.text.strip() for s in p.subqueries]
    if len(set(texts)) != len(texts):
        violations.append("duplicate sub-query text")
    if p.query_type is QueryType.SIMPLE and len(p.subqueries) != 1:
        violations.append("simple query must have exactly one sub-query")
    if max_subqueries is not None and len(p.subqueries) > max_subqueries:
        violations.append(f"more than {max_subqueries} sub-queries")
    return violations


def validate_plan(p: SubQueryPlan) -> SubQueryPlan:
    violations = plan_violations(p)
    if violations:
        raise PlanValidationError(violations)
    return p


# -- rule stub ---------------------------------------------------------------

_COMPARISON = re.compile(
    r"^(?:which\s+(?:one\s+)?is\s+\w+(?:\s+to\s+\w+)?\s*,?\s*)?(.+?)\s+(?:vs\.?|versus|or)\s+(.+?)\s*\??$",
    re.IGNORECASE,
)
_COMPLEX_HINT = re.compile(r"\b(vs\.?|versus|which is|compare)\b|\bor\b.*\bbetter\b|\bbetter\b.*\bor\b", re.IGNORECASE)
_BROAD_SUFFIX = ("guide", "travel", "tips", "ideas", "recommendations", "things to do")
_FRESH_WORDS = {"today", "latest", "now", "news", "upcoming", "tonight", "current", "schedule", "schedules", "this week", "recent"}
_EXPERIENCE_WORDS = {"cheap", "budget", "review", "reviews", "experience", "recommended", "best", "accommodation", "worth"}

# Lower-case words the stub may snap misspellings to.
_VOCABULARY = {
    "tutorial", "weather", "today", "guide", "travel", "review", "recipe", "price",
    "download", "install", "schedule", "restaurant", "hotel", "battery", "camera",
    "comparison", "beginner", "course", "news", "latest", "best", "cheap", "how",
    "what", "where", "when", "to", "the", "a", "in", "for", "of", "and",
}


def _correct_typos(text: str) -> str:
    words = []
    for word in text.split():
        if word.islower() and word.isalpha() and len(word) >= 5 and word not in _VOCABULARY:
            match = difflib.get_close_matches(word, _VOCABULARY, n=1, cutoff=0.85)
            words.append(match[0] if match else word)
        else:
            words.append(word)
    return " ".join(words)


def _contains_any(text: str, words: Iterable[str]) -> bool:
    lower = text.lower()
    return any(re.search(rf"\b{re.escape(w)}\b", lower) for w in words)


def _facet_dims(text: str) -> frozenset[IntentDimension]:
    dims = set()
    if _contains_any(text, _FRESH_WORDS):
        dims |= {A, HF}
    if _contains_any(text, _EXPERIENCE_WORDS):
        dims.add(PE)
    if _contains_any(text, ("how to", "get to", "transportation", "official", "guide")):
        dims.add(A)
    return frozenset(dims or {PE})


def _strip_entities(text: str, entities: Sequence[str]) -> str:
    out = text
    for e in entities:
        out = re.sub(re.escape(e), " ", out, flags=re.IGNORECASE)
    return " ".join(out.split())


def _dedupe(subqueries: Iterable[SubQuery], cap: int) -> tuple[SubQuery, ...]:
    seen: set[str] = set()
    out = []
    for s in subqueries:
        key = s.text.strip().lower()
        if key in seen:
            continue
        seen.add(key)
        out.append(s)
        if len(out) == cap:
            break
    return tuple(out)


def _complex_plan(query: Query) -> SubQueryPlan:
    text = query.text.strip()
    match = _COMPARISON.match(text)
    if not match:
        return SubQueryPlan(query, QueryType.COMPLEX, (SubQuery(text, {A}),))
    left, right = match.group(1).strip(" ,"), match.group(2).strip(" ,?")
    pair = f"{left} vs {right}"
    subs = []
    for hist in query.session:
        facet = _strip_entities(hist, (left, right))
        if facet:
            subs.append(SubQuery(f"{pair} {facet} comparison", {A, PE}))
    if not subs:
        subs.append(SubQuery(f"{pair} comparison", {A, PE}))
    subs = list(_dedupe(subs, STUB_MAX_SUBQUERIES - 1))
    subs.append(SubQuery(f"{pair} cost performance", {PE}))
    return SubQueryPlan(query, QueryType.COMPLEX, _dedupe(subs, STUB_MAX_SUBQUERIES))


def _broad_entity(text: str) -> str:
    entity = text
    for suffix in _BROAD_SUFFIX:
        entity = re.sub(rf"\b{re.escape(suffix)}\b", " ", entity, flags=re.IGNORECASE)
    return " ".join(entity.split()) or text


def _broad_plan(query: Query) -> SubQueryPlan:
    text = query.text.strip()
    entity = _broad_entity(text)
    subs = [SubQuery(f"Recommended {text}", {PE})]
    for hist in query.session:
        if entity.lower() in hist.lower():
            subs.append(SubQuery(hist.strip(), _facet_dims(hist)))
    if len(subs) == 1:
        subs.append(SubQuery(f"Latest {entity} updates", {A, HF}))
        subs.append(SubQuery(f"{entity} experience sharing", {PE}))
    return SubQueryPlan(query, QueryType.BROAD_NEEDS, _dedupe(subs, STUB_MAX_SUBQUERIES))


def _is_broad(text: str) -> bool:
    words = text.split()
    if len(words) > 4:
        return False
    lower = text.lower()
    if any(lower.endswith(s) for s in _BROAD_SUFFIX):
        return True
    # A bare capitalised entity ("Beijing", "Kyoto").
    return len(words) == 1 and words[0][:1].isupper()


def rule_stub_plan(query: Query) -> SubQueryPlan:
    """Deterministic keyword planner.

    Comparison wording makes a Complex plan (session entries become comparison
    facets, plus a cost-performance sub-query). Short guide-like head terms or
    bare entities make a BroadNeeds plan (session entries mentioning the entity
    become facets). Everything else is Simple: one sub-query, typo-corrected,
    tagged Authoritativeness plus HighFreshness when it is time-sensitive.
    Plans are capped at four sub-queries.
    """
    text = query.text.strip()
    if _COMPLEX_HINT.search(text):
        return _complex_plan(query)
    if _is_broad(text):
        return _broad_plan(query)
    rewritten = _correct_typos(text)
    dims = {A}
    if _contains_any(rewritten, _FRESH_WORDS):
        dims.add(HF)
    return SubQueryPlan(query, QueryType.SIMPLE, (SubQuery(rewritten, dims),))


# -- backend-driven planning -------------------------------------------------


def decode_plan(query: Query, raw_text: str) -> SubQueryPlan:
    """Decode a planner response body: ``{"query_type": ..., "subqueries": [...]}``."""
    try:
        data = json.loads(raw_text)
        qtype = QueryType(data["query_type"])
        subs = tuple(SubQuery.from_dict(s) for s in data["subqueries"])
    except (ValueError, KeyError, TypeError) as exc:
        raise PlanValidationError([f"undecodable planner response: {exc}"]) from exc
    return SubQueryPlan(query, qtype, subs)


def encode_plan_response(p: SubQueryPlan) -> str:
    return json.dumps(
        {"query_type": p.query_type.value, "subqueries": [s.to_dict() for s in p.subqueries]},
        ensure_ascii=False,
        sort_keys=True,
    )


def plan(query: Query, backend, gateway=None) -> SubQueryPlan:
    """Classify and decompose ``query`` through a planner backend, then validate.

    The request always carries the session; backends must ignore it for
    queries they classify as Simple.
    """
    from .backends import Gateway, planner_request

    gateway = gateway or Gateway()
    response = gateway.call(planner_request(query), backend)
    return validate_plan(decode_plan(query, response.raw_text))


def merge_candidates(
    retrievals: Sequence[tuple[SubQuery, Sequence[Candidate]]],
    k: int = DEFAULT_RETRIEVAL_K,
    query: Query | None = None,
) -> CandidateSet:
    """Union per-sub-query results by id; first occurrence wins, dimensions are unioned."""
    merged: dict[str, Candidate] = {}
    dims: dict[str, set[IntentDimension]] = {}
    for subquery, results in retrievals:
        if len(results) > k:
            raise ValueError(f"retrieval for {subquery.text!r} returned {len(results)} > k={k}")
        for cand in results:
            if cand.id not in merged:
                merged[cand.id] = cand
                dims[cand.id] = set()
            dims[cand.id] |= subquery.dimensions
    if not merged:
        raise NoCandidatesError("no candidates")
    if query is None:
        query = Query(retrievals[0][0].text)
    return CandidateSet(
        query,
        tuple(replace(c, source_subquery_dimensions=frozenset(dims[c.id])) for c in merged.values()),
    )
