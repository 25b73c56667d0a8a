"""Model backends for the planner, VLM evaluator and LLM re-ranker roles.

Every backend turns a :class:`BackendRequest` into raw model text. The
:class:`Gateway` adds timeouts, bounded retries with exponential backoff and a
cap on in-flight requests. Implementations:

* :class:`StubBackend` - deterministic offline answers for every role.
* :class:`ReplayBackend` / :class:`RecordingBackend` - serve or capture
  responses keyed by a canonical request digest (append-only JSONL store).
* :class:`HttpBackend` - JSON over HTTP to live model servers.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import string
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import httpx

from .core import Candidate, CandidateSet, Grade, GradeDimension, Query, Ranking
from .parsing import (
    GradingFormat,
    RerankFormat,
    parse_grading,
    parse_rerank,
    render_grade_answer,
    render_ranking_answer,
)

logger = logging.getLogger(__name__)


class Role(str, enum.Enum):
    PLANNER = "Planner"
    VLM_RELEVANCE = "VlmRelevance"
    VLM_QUALITY = "VlmQuality"
    RERANKER = "Reranker"


DEFAULT_TEMPLATES = {
    Role.PLANNER: "planner_v1",
    Role.VLM_RELEVANCE: "vlm_relevance_v1",
    Role.VLM_QUALITY: "vlm_quality_v1",
    Role.RERANKER: "reranker_v1",
}

REQUIRED_FIELDS = {
    Role.PLANNER: ("query", "session"),
    Role.VLM_RELEVANCE: ("query", "image"),
    Role.VLM_QUALITY: ("image",),
    Role.RERANKER: ("query", "candidates"),
}


# -- errors ------------------------------------------------------------------


class BackendError(Exception):
    retryable = False

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class BackendTimeout(BackendError):
    retryable = True


class TransportError(BackendError):
    retryable = True


class StatusError(BackendError):
    def __init__(self, status: int, message: str = "", attempts: int = 1):
        super().__init__(message or f"backend returned status {status}", attempts)
        self.status = status
        self.retryable = status == 429 or status >= 500


class ReplayMissError(BackendError):
    retryable = False


class InvalidRequestError(BackendError):
    retryable = False


# -- requests and responses --------------------------------------------------


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class BackendRequest:
    role: Role
    template_id: str
    payload: Mapping[str, Any]

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))

    def missing_fields(self) -> list[str]:
        return [f for f in REQUIRED_FIELDS[self.role] if self.payload.get(f) is None]

    def digest(self) -> str:
        body = canonical_json(
            {"role": self.role.value, "template_id": self.template_id, "payload": self.payload}
        )
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role.value, "template_id": self.template_id, "payload": dict(self.payload)}


@dataclass(frozen=True)
class BackendResponse:
    raw_text: str
    latency_ms: int
    backend_id: str


class Backend(Protocol):
    backend_id: str

    def send(self, request: BackendRequest, timeout: float) -> str | BackendResponse: ...


# -- templates ---------------------------------------------------------------


def load_template(template_id: str) -> str:
    try:
        return resources.files("richrerank.templates").joinpath(f"{template_id}.txt").read_text("utf-8")
    except FileNotFoundError:
        raise InvalidRequestError(f"unknown template {template_id!r}") from None


def render_prompt(request: BackendRequest) -> str:
    payload = dict(request.payload)
    values = {
        key: value if isinstance(value, str) else canonical_json(value)
        for key, value in payload.items()
    }
    return string.Template(load_template(request.template_id)).safe_substitute(values)


def planner_request(query: Query) -> BackendRequest:
    return BackendRequest(
        Role.PLANNER,
        DEFAULT_TEMPLATES[Role.PLANNER],
        {"query": query.text, "session": list(query.session)},
    )


def relevance_request(query: Query, image: str) -> BackendRequest:
    return BackendRequest(
        Role.VLM_RELEVANCE, DEFAULT_TEMPLATES[Role.VLM_RELEVANCE], {"query": query.text, "image": image}
    )


def quality_request(image: str) -> BackendRequest:
    return BackendRequest(Role.VLM_QUALITY, DEFAULT_TEMPLATES[Role.VLM_QUALITY], {"image": image})


def candidate_digest(c: Candidate) -> dict[str, Any]:
    """One candidate as the re-ranker sees it: text, side info, intent, cover grades."""
    return {
        "id": c.id,
        "title": c.title,
        "content": c.content,
        "side_info": c.side.to_dict(),
        "intent_dimensions": sorted(d.value for d in c.source_subquery_dimensions),
        "cover_relevance": c.relevance_grade.value if c.relevance_grade else None,
        "cover_quality": c.quality_grade.value if c.quality_grade else None,
    }


def rerank_request(cset: CandidateSet, query: Query, query_type: str | None = None) -> BackendRequest:
    return BackendRequest(
        Role.RERANKER,
        DEFAULT_TEMPLATES[Role.RERANKER],
        {
            "query": query.text,
            "query_type": query_type,
            "candidates": [candidate_digest(c) for c in cset.candidates],
        },
    )


# -- gateway -----------------------------------------------------------------


@dataclass
class Gateway:
    """Retry, timeout and concurrency policy shared by all backend calls."""

    retries: int = 2
    backoff_s: float = 0.05
    timeout_s: float = 30.0
    max_in_flight: int = 8
    sleep: Callable[[float], None] = time.sleep
    _slots: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(max(1, self.max_in_flight))

    def call(self, request: BackendRequest, backend: Backend) -> BackendResponse:
        missing = request.missing_fields()
        if missing:
            raise InvalidRequestError(f"{request.role.value} request missing {missing}")
        attempts = self.retries + 1
        for attempt in range(1, attempts + 1):
            try:
                with self._slots:
                    start = time.perf_counter()
                    result = backend.send(request, self.timeout_s)
                    elapsed = int((time.perf_counter() - start) * 1000)
            except BackendError as exc:
                exc.attempts = attempt
                if not exc.retryable or attempt == attempts:
                    raise
                logger.warning("%s call failed (%s); retry %d", request.role.value, exc, attempt)
                self.sleep(self.backoff_s * 2 ** (attempt - 1))
                continue
            if isinstance(result, BackendResponse):
                return result
            return BackendResponse(result, elapsed, backend.backend_id)
        raise AssertionError("unreachable")


# -- stub --------------------------------------------------------------------


def _hash_int(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()[:8], "big")


def _sort_key(c: Mapping[str, Any]):
    ctr = c.get("side_info", {}).get("click_through_rate", 0.0)
    return (-(c.get("cover_relevance") or 0), -(c.get("cover_quality") or 0), -ctr, c["id"])


class StubBackend:
    """Deterministic answers for every role.

    The re-ranker sorts by (cover relevance, cover quality, CTR) descending with
    id as tie-break, so its answer does not depend on the input order. With
    ``malformed_rate > 0`` a digest-keyed fraction of re-rank answers is
    replaced by one of several malformed responses.
    """

    backend_id = "stub"

    def __init__(self, seed: int = 0, malformed_rate: float = 0.0):
        self.seed = seed
        self.malformed_rate = malformed_rate

    def _malformed(self, request: BackendRequest) -> str | None:
        if self.malformed_rate <= 0:
            return None
        h = _hash_int(str(self.seed), request.digest())
        if (h % 1_000_000) / 1_000_000 >= self.malformed_rate:
            return None
        ids = [c["id"] for c in request.payload["candidates"]]
        variants = [
            "I would put the first result on top.",
            render_ranking_answer(ids[:1] * len(ids), "duplicated"),
            render_ranking_answer(ids[:-1], "dropped one"),
            "<think>unsure</think><answer>the best one first</answer>",
        ]
        return variants[(h >> 24) % len(variants)]

    def send(self, request: BackendRequest, timeout: float) -> str:
        from .planner import encode_plan_response, rule_stub_plan

        p = request.payload
        if request.role is Role.PLANNER:
            query = Query(p["query"], tuple(p.get("session", ())))
            return encode_plan_response(rule_stub_plan(query))
        if request.role is Role.VLM_RELEVANCE:
            grade = 1 + _hash_int(str(self.seed), p["query"], p["image"]) % 4
            return render_grade_answer(grade, "stub relevance assessment")
        if request.role is Role.VLM_QUALITY:
            grade = 1 + _hash_int(str(self.seed), p["image"]) % 4
            return render_grade_answer(grade, "stub quality assessment")
        bad = self._malformed(request)
        if bad is not None:
            return bad
        ordered = sorted(p["candidates"], key=_sort_key)
        return render_ranking_answer([c["id"] for c in ordered], "sorted by cover grades and CTR")


class EchoRerankBackend:
    """Re-ranker that returns candidates in the order it was given them."""

    backend_id = "echo"

    def send(self, request: BackendRequest, timeout: float) -> str:
        return render_ranking_answer([c["id"] for c in request.payload["candidates"]], "echo")


# -- record / replay ---------------------------------------------------------


class ReplayStore:
    """Append-only JSONL of ``{digest, role, raw_text, backend_id}``; first record wins."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, dict[str, Any]] = {}
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._records.setdefault(rec["digest"], rec)

    def __contains__(self, digest: str) -> bool:
        return digest in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, digest: str) -> dict[str, Any] | None:
        return self._records.get(digest)

    def append(self, request: BackendRequest, response: BackendResponse) -> None:
        digest = request.digest()
        with self._lock:
            if digest in self._records:
                return
            rec = {
                "digest": digest,
                "role": request.role.value,
                "template_id": request.template_id,
                "raw_text": response.raw_text,
                "backend_id": response.backend_id,
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(canonical_json(rec) + "\n")
            self._records[digest] = rec


class ReplayBackend:
    backend_id = "replay"

    def __init__(self, store: ReplayStore):
        self.store = store

    def send(self, request: BackendRequest, timeout: float) -> BackendResponse:
        rec = self.store.get(request.digest())
        if rec is None:
            raise ReplayMissError(f"no recorded response for {request.role.value} request")
        return BackendResponse(rec["raw_text"], 0, f"replay:{rec['backend_id']}")


class RecordingBackend:
    def __init__(self, inner: Backend, store: ReplayStore):
        self.inner = inner
        self.store = store
        self.backend_id = inner.backend_id

    def send(self, request: BackendRequest, timeout: float) -> BackendResponse:
        start = time.perf_counter()
        result = self.inner.send(request, timeout)
        if not isinstance(result, BackendResponse):
            result = BackendResponse(
                result, int((time.perf_counter() - start) * 1000), self.inner.backend_id
            )
        self.store.append(request, result)
        return result


# -- live HTTP ---------------------------------------------------------------


class HttpBackend:
    """POSTs ``{role, template_id, prompt, payload}`` and expects ``{"text": ...}`` back."""

    def __init__(
        self,
        endpoints: Mapping[str, str],
        client: httpx.Client | None = None,
        backend_id: str = "http",
    ):
        self.endpoints = {Role(k): v for k, v in endpoints.items()}
        self.client = client or httpx.Client()
        self.backend_id = backend_id

    def send(self, request: BackendRequest, timeout: float) -> str:
        url = self.endpoints.get(request.role)
        if url is None:
            raise InvalidRequestError(f"no endpoint configured for {request.role.value}")
        body = {**request.to_dict(), "prompt": render_prompt(request)}
        try:
            resp = self.client.post(url, json=body, timeout=timeout)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"timeout calling {url}: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransportError(f"transport failure calling {url}: {exc}") from exc
        if resp.status_code != 200:
            raise StatusError(resp.status_code)
        try:
            return resp.json()["text"]
        except (ValueError, KeyError, TypeError) as exc:
            raise StatusError(resp.status_code, f"malformed response body: {exc}") from exc


# -- role operations ---------------------------------------------------------


@dataclass(frozen=True)
class CoverAssessment:
    relevance: Grade | None
    quality: Grade | None
    issues: tuple[str, ...] = ()
    backend_ids: tuple[str, ...] = ()


def _grade_from(text: str, dimension: GradeDimension) -> tuple[Grade | None, str | None]:
    parsed = parse_grading(text)
    if parsed.format_class is not GradingFormat.VALID_ANSWER:
        return None, f"{dimension.value}: {parsed.format_class.value}"
    grade = Grade(parsed.grade, dimension)
    if not grade.is_valid:
        return None, f"{dimension.value}: grade {parsed.grade} out of range"
    return grade, None


def evaluate_cover(
    candidate: Candidate, query: Query, backend: Backend, gateway: Gateway | None = None
) -> CoverAssessment:
    """Grade a candidate's cover image for relevance (query + image) and quality (image).

    Unparseable grades stay absent and are reported in ``issues``.
    """
    if not candidate.cover_image_ref:
        return CoverAssessment(None, None, ("no cover",))
    gateway = gateway or Gateway()
    rel_resp = gateway.call(relevance_request(query, candidate.cover_image_ref), backend)
    qual_resp = gateway.call(quality_request(candidate.cover_image_ref), backend)
    relevance, rel_issue = _grade_from(rel_resp.raw_text, GradeDimension.RELEVANCE)
    quality, qual_issue = _grade_from(qual_resp.raw_text, GradeDimension.QUALITY)
    issues = tuple(i for i in (rel_issue, qual_issue) if i)
    for issue in issues:
        logger.info("candidate %s: unusable grade (%s)", candidate.id, issue)
    return CoverAssessment(relevance, quality, issues, (rel_resp.backend_id, qual_resp.backend_id))


@dataclass(frozen=True)
class RerankOutcome:
    ranking: Ranking
    fallback: bool
    format_class: RerankFormat
    raw_text: str
    backend_id: str
    digest: str


def rerank(
    cset: CandidateSet,
    query: Query,
    plan=None,
    backend: Backend | None = None,
    gateway: Gateway | None = None,
) -> RerankOutcome:
    """Listwise re-rank through the Reranker role.

    Anything but a complete permutation falls back to the input order with
    ``fallback=True``; the output is always a permutation of ``cset``.
    """
    if backend is None:
        raise InvalidRequestError("rerank needs a backend")
    gateway = gateway or Gateway()
    query_type = plan.query_type.value if plan is not None else None
    request = rerank_request(cset, query, query_type)
    response = gateway.call(request, backend)
    parsed = parse_rerank(response.raw_text, cset)
    if parsed.format_class is RerankFormat.VALID_ANSWER:
        ranking, fallback = Ranking(parsed.ids), False
    else:
        logger.info("re-rank fallback for %r: %s", query.text, parsed.format_class.value)
        ranking, fallback = Ranking(cset.ids), True
    return RerankOutcome(
        ranking, fallback, parsed.format_class, response.raw_text, response.backend_id, request.digest()
    )
