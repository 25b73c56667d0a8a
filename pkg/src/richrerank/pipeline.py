"""End-to-end orchestration, offline evaluation, and teacher-data synthesis.

Per query the stages run strictly in order: plan -> retrieve per sub-query ->
merge -> grade covers -> re-rank. Batches fan out across queries only, and
every aggregate is an ordered reduction so reports are reproducible.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .backends import (
    Backend,
    BackendError,
    Gateway,
    StubBackend,
    evaluate_cover,
    rerank,
    rerank_request,
)
from .core import Candidate, CandidateSet, Query, QueryType, Ranking, SubQuery, is_permutation, validate_candidate_set
from .metrics import DEFAULT_RBO_P, MetricError, clamp_k, ndcg_at_k, rbo, recall_at_k
from .parsing import RerankFormat, parse_rerank
from .planner import DEFAULT_RETRIEVAL_K, merge_candidates, plan
from .rewards import GammaWeights

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("N@4", "N@10", "R@4", "R@10", "RBO")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class StageError(RuntimeError):
    """A component failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


# -- config ------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    retrieval_k: int = DEFAULT_RETRIEVAL_K
    gammas: GammaWeights = GammaWeights()
    rbo_p: float = DEFAULT_RBO_P
    consistency_threshold: float = 0.9
    consistency_normalized: bool = True
    consistency_samples: int = 4
    endpoints: Mapping[str, str] = field(default_factory=dict)
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 0.05
    concurrency: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        if self.retrieval_k < 1:
            problems.append("retrieval_k must be >= 1")
        if not 0.0 < self.rbo_p < 1.0:
            problems.append("rbo_p must lie in (0, 1)")
        if not 0.0 < self.consistency_threshold <= 1.0:
            problems.append("consistency_threshold must lie in (0, 1]")
        if self.consistency_samples < 2:
            problems.append("consistency_samples must be >= 2")
        if not self.timeout_s > 0:
            problems.append("timeout_s must be > 0")
        if self.retries < 0:
            problems.append("retries must be >= 0")
        if self.concurrency < 1:
            problems.append("concurrency must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PipelineConfig:
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known - {"grpo"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data.pop("grpo", None)
        try:
            if "gammas" in data:
                g = data["gammas"]
                data["gammas"] = GammaWeights(**g) if isinstance(g, Mapping) else GammaWeights.from_sequence(g)
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> PipelineConfig:
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def gateway(self) -> Gateway:
        return Gateway(
            retries=self.retries,
            backoff_s=self.backoff_s,
            timeout_s=self.timeout_s,
            max_in_flight=self.concurrency,
        )


# -- retrieval ---------------------------------------------------------------


class Retriever(Protocol):
    def retrieve(self, subquery: SubQuery, k: int) -> list[Candidate]: ...


_TOKEN = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


class CorpusRetriever:
    """Token-overlap retrieval over an in-memory corpus.

    Candidates are ordered by overlap with the sub-query, then by a stable
    hash so sub-queries with no overlap still get a deterministic top-k.
    """

    def __init__(self, corpus: Sequence[Candidate]):
        self.corpus = list(corpus)
        self._tokens = [_tokens(f"{c.title} {c.content}") for c in self.corpus]

    def retrieve(self, subquery: SubQuery, k: int) -> list[Candidate]:
        import hashlib

        q = _tokens(subquery.text)

        def key(i: int):
            tie = hashlib.sha256(f"{subquery.text}\x1f{self.corpus[i].id}".encode()).hexdigest()
            return (-len(q & self._tokens[i]), tie)

        ranked = sorted(range(len(self.corpus)), key=key)
        return [self.corpus[i] for i in ranked[:k]]


@dataclass
class Backends:
    planner: Backend
    evaluator: Backend
    reranker: Backend
    retriever: Retriever

    @classmethod
    def stub(cls, corpus: Sequence[Candidate], seed: int = 0) -> Backends:
        b = StubBackend(seed)
        return cls(b, b, b, CorpusRetriever(corpus))


# -- run ---------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineResult:
    ranking: Ranking
    provenance: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {"ranking": list(self.ranking.ids), "provenance": self.provenance},
            sort_keys=True,
            ensure_ascii=False,
        )


def _stage(name: str, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_pipeline(
    query: Query, config: PipelineConfig, backends: Backends, gateway: Gateway | None = None
) -> PipelineResult:
    gateway = gateway or config.gateway()
    the_plan = _stage("plan", lambda: plan(query, backends.planner, gateway))

    retrievals = _stage(
        "retrieve",
        lambda: [(s, backends.retriever.retrieve(s, config.retrieval_k)) for s in the_plan.subqueries],
    )
    cset = _stage("merge", lambda: merge_candidates(retrievals, config.retrieval_k, query))

    covers: dict[str, Any] = {}
    graded = []
    for cand in cset.candidates:
        assessment = _stage("evaluate", lambda c=cand: evaluate_cover(c, query, backends.evaluator, gateway))
        covers[cand.id] = {
            "relevance": assessment.relevance.value if assessment.relevance else None,
            "quality": assessment.quality.value if assessment.quality else None,
            "issues": list(assessment.issues),
            "backend_ids": list(assessment.backend_ids),
        }
        graded.append(
            replace(cand, relevance_grade=assessment.relevance, quality_grade=assessment.quality)
        )
    cset = CandidateSet(query, tuple(graded))

    outcome = _stage("rerank", lambda: rerank(cset, query, the_plan, backends.reranker, gateway))
    provenance = {
        "query": query.to_dict(),
        "seed": config.seed,
        "plan": the_plan.to_dict(),
        "retrievals": [{"subquery": s.text, "ids": [c.id for c in r]} for s, r in retrievals],
        "candidate_order": list(cset.ids),
        "candidate_dimensions": {
            c.id: sorted(d.value for d in c.source_subquery_dimensions) for c in cset.candidates
        },
        "covers": covers,
        "rerank": {
            "backend_id": outcome.backend_id,
            "digest": outcome.digest,
            "raw_text": outcome.raw_text,
            "format_class": outcome.format_class.value,
            "fallback": outcome.fallback,
        },
        "ranking": list(outcome.ranking.ids),
    }
    return PipelineResult(outcome.ranking, provenance)


def ranking_from_provenance(provenance: Mapping[str, Any]) -> Ranking:
    """Re-derive the served ranking offline from a provenance record."""
    order = provenance["candidate_order"]
    parsed = parse_rerank(provenance["rerank"]["raw_text"], order)
    if parsed.format_class is RerankFormat.VALID_ANSWER:
        return Ranking(parsed.ids)
    return Ranking(tuple(order))


def run_batch(
    queries: Sequence[Query], config: PipelineConfig, backends: Backends
) -> list[PipelineResult]:
    gateway = config.gateway()
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        return list(pool.map(lambda q: run_pipeline(q, config, backends, gateway), queries))


# -- datasets ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRecord:
    query_id: str
    candidate_set: CandidateSet
    label: Ranking
    query_type: QueryType | None = None
    prediction: Ranking | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "query_id": self.query_id,
            "query_type": self.query_type.value if self.query_type else None,
            "candidate_set": self.candidate_set.to_dict(),
            "label": list(self.label.ids),
        }
        if self.prediction is not None:
            out["prediction"] = list(self.prediction.ids)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DatasetRecord:
        try:
            qtype = data.get("query_type")
            pred = data.get("prediction")
            return cls(
                query_id=str(data["query_id"]),
                candidate_set=CandidateSet.from_dict(data["candidate_set"]),
                label=Ranking(tuple(str(i) for i in data["label"])),
                query_type=QueryType(qtype) if qtype else None,
                prediction=Ranking(tuple(str(i) for i in pred)) if pred is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad dataset record: {exc}") from exc


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def dumps_jsonl(records: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    return [DatasetRecord.from_dict(r) for r in read_jsonl(path)]


def dataset_violations(record: DatasetRecord) -> list[str]:
    problems = validate_candidate_set(record.candidate_set)
    if not is_permutation(record.label, record.candidate_set):
        problems.append("label is not a permutation of the candidate set")
    if record.prediction is not None and not is_permutation(record.prediction, record.candidate_set):
        problems.append("prediction is not a permutation of the candidate set")
    return problems


def bundled_eval_path() -> Path:
    from importlib import resources

    return Path(str(resources.files("richrerank.data").joinpath("eval_50.jsonl")))


# -- evaluation --------------------------------------------------------------


def query_metrics(pred: Ranking, label: Ranking, rbo_p: float = DEFAULT_RBO_P) -> dict[str, float]:
    n = len(label)
    k4, k10 = clamp_k(4, n), clamp_k(10, n)
    return {
        "N@4": ndcg_at_k(pred, label, k4),
        "N@10": ndcg_at_k(pred, label, k10),
        "R@4": recall_at_k(pred, label, k4),
        "R@10": recall_at_k(pred, label, k10),
        "RBO": rbo(pred, label, rbo_p),
    }


def _means(rows: Sequence[Mapping[str, Any]]) -> dict[str, float]:
    return {m: math.fsum(r[m] for r in rows) / len(rows) for m in METRIC_COLUMNS}


@dataclass
class EvalReport:
    per_query: list[dict[str, Any]]
    by_type: dict[str, dict[str, float]]
    overall: dict[str, float]
    errors: list[dict[str, str]]
    rbo_p: float

    def records(self) -> list[dict[str, Any]]:
        out = [{"kind": "query", **r} for r in self.per_query]
        for qtype, means in self.by_type.items():
            out.append({"kind": "type_mean", "query_type": qtype, **means})
        out.append({"kind": "overall_mean", **self.overall})
        out.extend({"kind": "error", **e} for e in self.errors)
        return out

    def table(self) -> str:
        header = f"{'group':<12}{'count':>7}" + "".join(f"{c:>9}" for c in METRIC_COLUMNS)
        lines = [header, "-" * len(header)]
        groups = [(t, self.by_type[t]) for t in self.by_type] + [("Overall", self.overall)]
        for name, means in groups:
            lines.append(
                f"{name:<12}{int(means['count']):>7}"
                + "".join(f"{100 * means[c]:>9.2f}" for c in METRIC_COLUMNS)
            )
        if self.errors:
            lines.append(f"excluded queries: {len(self.errors)}")
        return "\n".join(lines)


PredictionSource = Callable[[DatasetRecord], Ranking]


def stored_predictions(record: DatasetRecord) -> Ranking:
    if record.prediction is None:
        raise DataError(f"{record.query_id}: no stored prediction")
    return record.prediction


def pipeline_predictions(config: PipelineConfig, backends: Backends) -> PredictionSource:
    """Predict by re-ranking each record's candidate set through the re-ranker backend."""
    gateway = config.gateway()

    def predict(record: DatasetRecord) -> Ranking:
        cset = record.candidate_set
        return rerank(cset, cset.query, None, backends.reranker, gateway).ranking

    return predict


def evaluate_dataset(
    dataset: Sequence[DatasetRecord],
    predict: PredictionSource = stored_predictions,
    config: PipelineConfig = PipelineConfig(),
) -> EvalReport:
    """Score every query on N@4/N@10/R@4/R@10/RBO and aggregate overall and per type.

    Queries whose prediction cannot be scored are listed in ``errors`` and
    left out of the means.
    """
    if not dataset:
        raise DataError("no queries")
    rows: list[dict[str, Any]] = []
    errors: list[dict[str, str]] = []
    for record in dataset:
        try:
            pred = predict(record)
            metrics = query_metrics(pred, record.label, config.rbo_p)
        except (MetricError, DataError) as exc:
            errors.append({"query_id": record.query_id, "error": str(exc)})
            continue
        rows.append(
            {
                "query_id": record.query_id,
                "query_type": record.query_type.value if record.query_type else None,
                **metrics,
            }
        )
    if not rows:
        raise DataError("no scorable queries")
    by_type: dict[str, dict[str, float]] = {}
    for qtype in QueryType:
        subset = [r for r in rows if r["query_type"] == qtype.value]
        if subset:
            by_type[qtype.value] = {**_means(subset), "count": len(subset)}
    overall = {**_means(rows), "count": len(rows)}
    return EvalReport(rows, by_type, overall, errors, config.rbo_p)


# -- consistency filter and teacher synthesis -----------------------------------


@dataclass(frozen=True)
class ConsistencyResult:
    retained: list[int]
    scores: list[float]


def group_consistency(group: Sequence[Ranking], p: float = DEFAULT_RBO_P, normalized: bool = False) -> float:
    """Mean truncated RBO over all unordered pairs (optionally divided by 1 - p**n)."""
    if len(group) < 2:
        raise DataError("consistency needs at least 2 rankings per group")
    ids = set(group[0].ids)
    if any(set(r.ids) != ids or len(r.ids) != len(group[0].ids) for r in group):
        raise DataError("rankings in a group must share one id set")
    pairs = list(itertools.combinations(group, 2))
    score = math.fsum(rbo(a, b, p) for a, b in pairs) / len(pairs)
    if normalized:
        score /= 1.0 - p ** len(group[0].ids)
    return score


def consistency_filter(
    answer_groups: Sequence[Sequence[Ranking]],
    threshold: float,
    p: float = DEFAULT_RBO_P,
    normalized: bool = False,
) -> ConsistencyResult:
    scores = [group_consistency(g, p, normalized) for g in answer_groups]
    return ConsistencyResult([i for i, s in enumerate(scores) if s >= threshold], scores)


@dataclass
class SynthesisResult:
    records: list[DatasetRecord]
    scores: dict[int, float]
    dropped: list[dict[str, Any]]


def synthesize_teacher_dataset(
    sets: Sequence[CandidateSet],
    teacher: Backend,
    permutations: int,
    threshold: float,
    p: float = DEFAULT_RBO_P,
    normalized: bool = False,
    seed: int = 0,
    gateway: Gateway | None = None,
) -> SynthesisResult:
    """Ask the teacher to rank each set ``permutations`` times, the first in the
    given order and the rest shuffled, and keep sets whose answers agree.

    The label of a retained set is the answer to the unshuffled request.
    """
    if permutations < 2:
        raise DataError("need at least 2 permutations per set")
    gateway = gateway or Gateway()
    records: list[DatasetRecord] = []
    scores: dict[int, float] = {}
    dropped: list[dict[str, Any]] = []
    for idx, cset in enumerate(sets):
        rng = np.random.default_rng([seed, idx])
        orders = [list(cset.ids)]
        for _ in range(permutations - 1):
            orders.append([cset.ids[i] for i in rng.permutation(len(cset))])
        answers: list[Ranking] = []
        reason = None
        for order in orders:
            shuffled = cset.reordered(order)
            try:
                response = gateway.call(rerank_request(shuffled, cset.query), teacher)
            except BackendError as exc:
                reason = f"backend error: {exc}"
                break
            parsed = parse_rerank(response.raw_text, cset)
            if parsed.format_class is not RerankFormat.VALID_ANSWER:
                reason = f"unusable teacher answer: {parsed.format_class.value}"
                break
            answers.append(Ranking(parsed.ids))
        if reason is not None:
            logger.info("dropping set %d: %s", idx, reason)
            dropped.append({"index": idx, "reason": reason})
            continue
        score = group_consistency(answers, p, normalized)
        scores[idx] = score
        if score >= threshold:
            records.append(DatasetRecord(f"s{idx:05d}", cset, answers[0]))
        else:
            dropped.append({"index": idx, "reason": f"consistency {score:.6f} < {threshold}"})
    return SynthesisResult(records, scores, dropped)
