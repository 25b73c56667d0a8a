from __future__ import annotations

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import graded_candidate, make_cset
from oracles import oracle_ndcg, oracle_rbo, oracle_recall
from richrerank.backends import (
    EchoRerankBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayMissError,
    ReplayStore,
    StubBackend,
)
from richrerank.core import CandidateSet, Query, QueryType, Ranking, SubQuery, is_permutation
from richrerank.pipeline import (
    Backends,
    ConfigError,
    CorpusRetriever,
    DataError,
    DatasetRecord,
    PipelineConfig,
    StageError,
    bundled_eval_path,
    consistency_filter,
    dumps_jsonl,
    evaluate_dataset,
    group_consistency,
    load_dataset,
    pipeline_predictions,
    ranking_from_provenance,
    run_batch,
    run_pipeline,
    synthesize_teacher_dataset,
    write_jsonl,
)
from richrerank.synthetic import demo_corpus, eval_dataset


def stub_backends(seed=0, malformed=0.0, corpus=None):
    stub = StubBackend(seed, malformed)
    return Backends(stub, stub, stub, CorpusRetriever(corpus or demo_corpus()))


# -- config -----------------------------------------------------------------------


def test_config_defaults_and_validation(tmp_path):
    c = PipelineConfig()
    assert (c.retrieval_k, c.rbo_p, c.consistency_threshold, c.consistency_normalized) == (10, 0.9, 0.9, True)
    for bad in (dict(retrieval_k=0), dict(rbo_p=1.0), dict(consistency_threshold=0), dict(consistency_samples=1),
                dict(concurrency=0), dict(timeout_s=0)):
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"gammas": [0, 0, 0, 0, 0]})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"rbo_p": 0.8, "gammas": {"ndcg10": 1, "recall10": 0, "rbo": 0, "ndcg4": 0, "recall4": 0}}))
    loaded = PipelineConfig.load(path)
    assert loaded.rbo_p == 0.8 and loaded.gammas.ndcg10 == 1
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


# -- run ----------------------------------------------------------------------------


def test_run_is_deterministic():
    q = Query("A vs B", ("A battery",))
    runs = [run_pipeline(q, PipelineConfig(), stub_backends()).to_json() for _ in range(3)]
    assert len(set(runs)) == 1


def test_small_plan_shape():
    corpus = [graded_candidate(f"d{i}") for i in range(3)]
    result = run_pipeline(Query("weather today"), PipelineConfig(), stub_backends(corpus=corpus))
    assert len(result.ranking) == 3
    assert result.provenance["plan"]["query_type"] == "Simple"


def test_provenance_contents_and_rederivation():
    result = run_pipeline(Query("Beijing travel guide"), PipelineConfig(), stub_backends(malformed=0.0))
    prov = result.provenance
    assert set(prov) >= {"plan", "retrievals", "candidate_order", "covers", "rerank", "ranking"}
    assert is_permutation(result.ranking, prov["candidate_order"])
    assert ranking_from_provenance(prov) == result.ranking
    uncovered = [cid for cid, c in prov["covers"].items() if c["issues"] == ["no cover"]]
    assert uncovered and all(prov["covers"][c]["relevance"] is None for c in uncovered)


def test_replay_reproduces_recorded_session(tmp_path):
    store_path = tmp_path / "store.jsonl"
    stub = RecordingBackend(StubBackend(2, 0.3), ReplayStore(store_path))
    live = Backends(stub, stub, stub, CorpusRetriever(demo_corpus()))
    queries = [Query("A vs B"), Query("weather today"), Query("Kyoto")]
    recorded = run_batch(queries, PipelineConfig(), live)
    replay = ReplayBackend(ReplayStore(store_path))
    offline = Backends(replay, replay, replay, CorpusRetriever(demo_corpus()))
    for _ in range(3):
        again = run_batch(queries, PipelineConfig(), offline)
        assert [r.ranking for r in again] == [r.ranking for r in recorded]
    with pytest.raises(StageError) as info:
        run_pipeline(Query("never recorded"), PipelineConfig(), offline)
    assert info.value.stage == "plan" and isinstance(info.value.cause, ReplayMissError)


def test_stage_labels_on_failure():
    class NoRetrieval:
        def retrieve(self, subquery, k):
            return []

    stub = StubBackend()
    with pytest.raises(StageError) as info:
        run_pipeline(Query("weather today"), PipelineConfig(), Backends(stub, stub, stub, NoRetrieval()))
    assert info.value.stage == "merge"


def test_fallback_outputs_are_permutations():
    results = run_batch([Query(f"topic {i}") for i in range(100)], PipelineConfig(), stub_backends(malformed=0.5))
    assert all(is_permutation(r.ranking, r.provenance["candidate_order"]) for r in results)
    assert any(r.provenance["rerank"]["fallback"] for r in results)


def test_batch_matches_sequential():
    qs = [Query(f"q {i}") for i in range(12)]
    b = stub_backends()
    batch = run_batch(qs, PipelineConfig(concurrency=6), b)
    seq = [run_pipeline(q, PipelineConfig(), b) for q in qs]
    assert [r.to_json() for r in batch] == [r.to_json() for r in seq]


# -- datasets and evaluation -------------------------------------------------------


def test_bundled_eval_matches_generator():
    assert bundled_eval_path().read_text(encoding="utf-8") == dumps_jsonl(eval_dataset())


def test_dataset_io_round_trip(tmp_path):
    records = load_dataset(bundled_eval_path())
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [r.to_dict() for r in records])
    assert load_dataset(path) == records
    path.write_text("{bad\n")
    with pytest.raises(DataError):
        load_dataset(path)


def _record(qid, label, pred=None, qtype=QueryType.SIMPLE):
    return DatasetRecord(qid, make_cset(label), Ranking(label), qtype, Ranking(pred) if pred else None)


def test_eval_identity_predictions():
    data = [_record("a", "abcdef", "abcdef"), _record("b", "abc", "abc", QueryType.COMPLEX)]
    report = evaluate_dataset(data)
    for m in ("N@4", "N@10", "R@4", "R@10"):
        assert report.overall[m] == 1.0
    assert report.overall["RBO"] == pytest.approx(((1 - 0.9**6) + (1 - 0.9**3)) / 2, abs=1e-15)


def test_eval_reversed_matches_oracle():
    labels = ["abcd", "abcdefghijkl", "ab"]
    data = [_record(str(i), l, l[::-1]) for i, l in enumerate(labels)]
    report = evaluate_dataset(data)
    for row, label in zip(report.per_query, labels):
        pred, n = label[::-1], len(label)
        assert row["N@4"] == pytest.approx(float(oracle_ndcg(pred, label, min(4, n))), abs=1e-12)
        assert row["N@10"] == pytest.approx(float(oracle_ndcg(pred, label, min(10, n))), abs=1e-12)
        assert row["R@10"] == pytest.approx(float(oracle_recall(pred, label, min(10, n))), abs=1e-12)
        assert row["RBO"] == pytest.approx(float(oracle_rbo(pred, label, 0.9)), abs=1e-12)


def test_eval_errors_excluded_and_counted():
    data = [_record("ok", "abc", "bac"), _record("bad", "abc", "abd")]
    report = evaluate_dataset(data)
    assert report.overall["count"] == 1 and len(report.errors) == 1
    assert report.errors[0]["query_id"] == "bad"
    with pytest.raises(DataError, match="no queries"):
        evaluate_dataset([])


def test_eval_report_table_and_records():
    report = evaluate_dataset(load_dataset(bundled_eval_path()))
    table = report.table()
    assert all(h in table.splitlines()[0] for h in ("N@4", "N@10", "R@4", "R@10", "RBO"))
    assert [line.split()[0] for line in table.splitlines()[2:]] == ["Complex", "BroadNeeds", "Simple", "Overall"]
    kinds = [r["kind"] for r in report.records()]
    assert kinds.count("query") == 50 and kinds.count("type_mean") == 3


def test_eval_with_pipeline_predictions():
    data = load_dataset(bundled_eval_path())[:6]
    report = evaluate_dataset(data, pipeline_predictions(PipelineConfig(), stub_backends()))
    assert report.overall["count"] == 6
    assert all(0 <= r[m] <= 1 for r in report.per_query for m in ("N@4", "RBO"))


# -- consistency and synthesis -----------------------------------------------------


def test_consistency_examples():
    same = [Ranking("abc")] * 3
    assert group_consistency(same) == pytest.approx(0.271, abs=1e-12)
    identity = 1 - 0.9**3
    assert consistency_filter([same], identity).retained == [0]
    assert consistency_filter([same], identity + 1e-9).retained == []
    assert group_consistency(same, normalized=True) == pytest.approx(1.0, abs=1e-12)
    pair = [Ranking("abcd"), Ranking("dcba")]
    assert group_consistency(pair) == pytest.approx(float(oracle_rbo("abcd", "dcba", 0.9)), abs=1e-12)
    with pytest.raises(DataError):
        group_consistency([Ranking("abc"), Ranking("abd")])
    with pytest.raises(DataError):
        group_consistency([Ranking("abc")])


@given(st.lists(st.lists(st.permutations("abcde"), min_size=2, max_size=4), min_size=1, max_size=6))
def test_consistency_threshold_monotone(groups):
    groups = [[Ranking(tuple(r)) for r in g] for g in groups]
    previous = None
    for t in np.linspace(0.01, 1.0, 25):
        kept = set(consistency_filter(groups, float(t)).retained)
        if previous is not None:
            assert kept <= previous
        previous = kept


def _sets(n_sets=5, n=6):
    rng = np.random.default_rng(0)
    out = []
    for s in range(n_sets):
        cands = tuple(graded_candidate(f"s{s}c{i}", int(rng.integers(1, 5)), int(rng.integers(1, 5)), float(rng.uniform(0, 0.3)))
                      for i in range(n))
        out.append(CandidateSet(Query(f"set {s}"), cands))
    return out


def test_synthesis_with_order_invariant_teacher():
    sets = _sets()
    res = synthesize_teacher_dataset(sets, StubBackend(), 4, 0.9, normalized=True, seed=1)
    assert len(res.records) == len(sets) and all(s == pytest.approx(1.0) for s in res.scores.values())
    for rec, cset in zip(res.records, sets):
        assert rec.label.ids == tuple(sorted(cset.ids, key=lambda i: (
            -cset.by_id()[i].relevance_grade.value, -cset.by_id()[i].quality_grade.value,
            -cset.by_id()[i].side.click_through_rate, i)))


def test_synthesis_rejects_echo_teacher():
    sets = _sets()
    res = synthesize_teacher_dataset(sets, EchoRerankBackend(), 4, 0.9, normalized=True, seed=1)
    assert res.records == [] and len(res.dropped) == len(sets)
    assert all(s < 0.9 for s in res.scores.values())


def test_synthesis_identity_threshold_and_determinism():
    sets = _sets(3, 5)
    edge = 1 - 0.9**5
    assert len(synthesize_teacher_dataset(sets, StubBackend(), 2, edge).records) == 3
    assert synthesize_teacher_dataset(sets, StubBackend(), 2, edge + 1e-9).records == []
    a = synthesize_teacher_dataset(sets, EchoRerankBackend(), 3, 0.1, seed=7)
    b = synthesize_teacher_dataset(sets, EchoRerankBackend(), 3, 0.1, seed=7)
    assert a.scores == b.scores and a.records == b.records


def test_synthesis_drops_sets_with_unusable_answers():
    res = synthesize_teacher_dataset(_sets(20), StubBackend(0, 0.3), 3, 0.5, normalized=True)
    assert res.dropped and all("unusable" in d["reason"] for d in res.dropped)
    assert len(res.records) + len(res.dropped) == 20
    with pytest.raises(DataError):
        synthesize_teacher_dataset(_sets(1), StubBackend(), 1, 0.5)
