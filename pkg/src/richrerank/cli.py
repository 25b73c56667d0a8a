"""Command-line entry point.

Exit codes: 0 success, 1 data error, 2 backend error, 3 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, TextIO

from .backends import (
    BackendError,
    EchoRerankBackend,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayStore,
    StubBackend,
)
from .core import Candidate, CandidateSet, Query, Ranking, is_permutation
from .grpo import GrpoConfig, GrpoError, estimate_mean_reward, train_toy_policy
from .metrics import MetricError
from .parsing import parse_grading, parse_rerank
from .pipeline import (
    Backends,
    ConfigError,
    CorpusRetriever,
    DataError,
    DatasetRecord,
    PipelineConfig,
    StageError,
    bundled_eval_path,
    consistency_filter,
    dataset_violations,
    evaluate_dataset,
    load_dataset,
    pipeline_predictions,
    query_metrics,
    read_jsonl,
    run_batch,
    stored_predictions,
    synthesize_teacher_dataset,
)
from .planner import NoCandidatesError, PlanValidationError
from .rewards import RewardError, TaskKind, score_grading_response, score_rerank_response
from .synthetic import demo_corpus, learnable_dataset

EXIT_OK, EXIT_DATA, EXIT_BACKEND, EXIT_CONFIG = 0, 1, 2, 3

logger = logging.getLogger("richrerank")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- helpers -----------------------------------------------------------------


@contextmanager
def _output(path: str | None) -> Iterator[TextIO]:
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


def _emit(records: Iterable[Mapping[str, Any]], out: TextIO) -> None:
    for rec in records:
        out.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def _records(path: str) -> list[dict[str, Any]]:
    try:
        return list(read_jsonl(path))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.load(args.config)
    if args.seed is not None:
        config = PipelineConfig.from_dict({**_config_dict(config), "seed": args.seed})
    return config


def _config_dict(config: PipelineConfig) -> dict[str, Any]:
    return {
        "retrieval_k": config.retrieval_k,
        "gammas": list(config.gammas.as_tuple()),
        "rbo_p": config.rbo_p,
        "consistency_threshold": config.consistency_threshold,
        "consistency_normalized": config.consistency_normalized,
        "consistency_samples": config.consistency_samples,
        "endpoints": dict(config.endpoints),
        "timeout_s": config.timeout_s,
        "retries": config.retries,
        "backoff_s": config.backoff_s,
        "concurrency": config.concurrency,
        "seed": config.seed,
    }


def _model_backend(args: argparse.Namespace, config: PipelineConfig):
    if args.backend == "stub":
        backend = StubBackend(config.seed, args.malformed_rate)
    elif args.backend == "echo":
        backend = EchoRerankBackend()
    elif args.backend == "replay":
        if not args.replay_store:
            raise ConfigError("--backend replay needs --replay-store")
        if not Path(args.replay_store).exists():
            raise ConfigError(f"replay store {args.replay_store} does not exist")
        return ReplayBackend(ReplayStore(args.replay_store))
    else:
        if not config.endpoints:
            raise ConfigError("--backend live needs endpoints in the config file")
        backend = HttpBackend(config.endpoints)
    if args.record:
        if not args.replay_store:
            raise ConfigError("--record needs --replay-store")
        backend = RecordingBackend(backend, ReplayStore(args.replay_store))
    return backend


def _corpus(path: str | None) -> list[Candidate]:
    if path is None:
        return demo_corpus()
    try:
        return [Candidate.from_dict(r) for r in _records(path)]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad corpus record: {exc}") from exc


def _backends(args: argparse.Namespace, config: PipelineConfig) -> Backends:
    model = _model_backend(args, config)
    return Backends(model, model, model, CorpusRetriever(_corpus(getattr(args, "corpus", None))))


def _dataset(path: str | None) -> list[DatasetRecord]:
    return load_dataset(path or bundled_eval_path())


# -- subcommands --------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args)
    backends = _backends(args, config)
    if args.queries:
        queries = [Query.from_dict(r) for r in _records(args.queries)]
    elif args.query:
        queries = [Query(args.query, tuple(args.session or ()))]
    else:
        raise DataError("give --query or --queries")
    results = run_batch(queries, config, backends)
    with _output(args.output) as out:
        _emit(({"ranking": list(r.ranking.ids), "provenance": r.provenance} for r in results), out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    dataset = _dataset(args.dataset)
    if args.predictions == "stored":
        predict = stored_predictions
    else:
        predict = pipeline_predictions(config, _backends(args, config))
    report = evaluate_dataset(dataset, predict, config)
    with _output(args.output) as out:
        _emit(report.records(), out)
    print(report.table(), file=sys.stderr if args.output in (None, "-") else sys.stdout)
    return EXIT_OK


def cmd_reward(args: argparse.Namespace) -> int:
    config = _config(args)
    out_records = []
    for i, rec in enumerate(_records(args.input)):
        try:
            kind = TaskKind(rec["kind"])
            text = rec["response"]
            if kind is TaskKind.RERANK:
                breakdown = score_rerank_response(text, rec["label"], config.gammas, config.rbo_p)
            else:
                breakdown = score_grading_response(text, int(rec["truth"]), kind)
        except (KeyError, TypeError, ValueError, RewardError) as exc:
            raise DataError(f"record {i}: {exc}") from exc
        out_records.append({"index": i, **breakdown.to_dict()})
    with _output(args.output) as out:
        _emit(out_records, out)
    return EXIT_OK


def cmd_parse(args: argparse.Namespace) -> int:
    out_records = []
    for i, rec in enumerate(_records(args.input)):
        try:
            text = rec["response"]
            if "ids" in rec:
                parsed = parse_rerank(text, [str(x) for x in rec["ids"]]).to_dict()
                parsed["task"] = "rerank"
            else:
                parsed = parse_grading(text).to_dict()
                parsed["task"] = "grading"
        except (KeyError, TypeError) as exc:
            raise DataError(f"record {i}: {exc}") from exc
        out_records.append({"index": i, **parsed})
    with _output(args.output) as out:
        _emit(out_records, out)
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    config = _config(args)
    rows = []
    for i, rec in enumerate(_records(args.input)):
        try:
            pred = Ranking(tuple(str(x) for x in rec["prediction"]))
            label = Ranking(tuple(str(x) for x in rec["label"]))
            metrics = query_metrics(pred, label, config.rbo_p)
        except (KeyError, TypeError, MetricError) as exc:
            raise DataError(f"record {i}: {exc}") from exc
        rows.append({"kind": "query", "query_id": rec.get("query_id", str(i)), **metrics})
    if not rows:
        raise DataError("no queries")
    import math

    mean = {m: math.fsum(r[m] for r in rows) / len(rows) for m in ("N@4", "N@10", "R@4", "R@10", "RBO")}
    with _output(args.output) as out:
        _emit([*rows, {"kind": "mean", "count": len(rows), **mean}], out)
    return EXIT_OK


def cmd_grpo_demo(args: argparse.Namespace) -> int:
    config = _config(args)
    try:
        gcfg = GrpoConfig(
            iterations=args.iterations,
            group_size=args.group_size,
            learning_rate=args.learning_rate,
            seed=config.seed,
        )
    except GrpoError as exc:
        raise ConfigError(str(exc)) from exc
    dataset = learnable_dataset()
    result = train_toy_policy(dataset, gcfg, config.gammas, config.rbo_p)
    initial = estimate_mean_reward(
        train_toy_policy(dataset, GrpoConfig(iterations=0, seed=config.seed)).policy,
        dataset, 64, config.seed, config.gammas, config.rbo_p,
    )
    final = estimate_mean_reward(result.policy, dataset, 64, config.seed, config.gammas, config.rbo_p)
    for stats in result.trace:
        if stats.iteration % args.print_every == 0 or stats.iteration == len(result.trace) - 1:
            print(f"iter {stats.iteration:4d}  task reward {stats.mean_task_reward:.4f}", file=sys.stderr)
    print(f"initial {initial:.4f} -> final {final:.4f}", file=sys.stderr)
    with _output(args.output) as out:
        _emit([s.to_dict() for s in result.trace], out)
        _emit(
            [{"summary": True, "initial_estimate": initial, "final_estimate": final,
              "theta": [float(x) for x in result.policy.theta]}],
            out,
        )
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config(args)
    teacher = _model_backend(args, config)
    sets = []
    for i, rec in enumerate(_records(args.input)):
        try:
            sets.append(CandidateSet.from_dict(rec.get("candidate_set", rec)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"record {i}: {exc}") from exc
    m = args.permutations or config.consistency_samples
    result = synthesize_teacher_dataset(
        sets, teacher, m, config.consistency_threshold, config.rbo_p,
        config.consistency_normalized, config.seed, config.gateway(),
    )
    with _output(args.output) as out:
        _emit((r.to_dict() for r in result.records), out)
    print(
        f"retained {len(result.records)} of {len(sets)} sets "
        f"(threshold {config.consistency_threshold}, "
        f"{'normalized' if config.consistency_normalized else 'truncated'} RBO, m={m})",
        file=sys.stderr,
    )
    for d in result.dropped:
        print(f"dropped set {d['index']}: {d['reason']}", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    bad = 0
    n = 0
    with _output(args.output) as out:
        for i, raw in enumerate(_records(args.input)):
            n += 1
            try:
                problems = dataset_violations(DatasetRecord.from_dict(raw))
            except DataError as exc:
                problems = [str(exc)]
            if problems:
                bad += 1
                _emit([{"index": i, "query_id": raw.get("query_id"), "violations": problems}], out)
    print(f"{n - bad} of {n} records valid", file=sys.stderr)
    return EXIT_DATA if bad else EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file mirroring PipelineConfig fields")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument(
        "--backend", choices=["live", "stub", "replay", "echo"], default="stub",
        help="model backend mode (default: stub)",
    )
    common.add_argument("--output", "-o", help="output file (default: stdout)")
    common.add_argument("--replay-store", help="JSONL replay store path")
    common.add_argument("--record", action="store_true", help="record backend responses into --replay-store")
    common.add_argument("--malformed-rate", type=float, default=0.0,
                        help="stub only: fraction of malformed re-rank answers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="richrerank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run queries through the pipeline")
    p.add_argument("--query", help="query text")
    p.add_argument("--session", nargs="*", help="prior queries in the session")
    p.add_argument("--queries", help="JSONL of {text, session} records")
    p.add_argument("--corpus", help="JSONL of candidate records (default: bundled demo corpus)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="metric report over a labeled dataset")
    p.add_argument("--dataset", help="JSONL dataset (default: bundled 50-query set)")
    p.add_argument("--predictions", choices=["stored", "pipeline"], default="stored")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reward", parents=[common], help="score responses against ground truth")
    p.add_argument("input", help="JSONL of {kind, response, truth|label}")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("parse", parents=[common], help="classify raw model responses")
    p.add_argument("input", help="JSONL of {response[, ids]}")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("metrics", parents=[common], help="ranking metrics for prediction/label pairs")
    p.add_argument("input", help="JSONL of {prediction, label[, query_id]}")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("grpo-demo", parents=[common], help="train the toy ranking policy")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--print-every", type=int, default=20)
    p.set_defaults(func=cmd_grpo_demo)

    p = sub.add_parser("synth", parents=[common], help="teacher-dataset synthesis with consistency filter")
    p.add_argument("input", help="JSONL of candidate sets (or dataset records)")
    p.add_argument("--permutations", "-m", type=int, help="requests per set (default: config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", parents=[common], help="lint a dataset file")
    p.add_argument("input", help="JSONL dataset")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except StageError as exc:
        if isinstance(exc.cause, BackendError):
            print(f"backend error in {exc}", file=sys.stderr)
            return EXIT_BACKEND
        print(f"data error in {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, MetricError, PlanValidationError, NoCandidatesError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
