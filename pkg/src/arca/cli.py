"""Command line interface.

Subcommands: gen-corpus, build, query, eval, log-cluster, serve.
Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 provider problems.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus, evaluate, pipeline
from .config import apply_overrides, load_config, make_embedder, make_extractor
from .errors import ArcaError, DataError
from .kb import KnowledgeBase
from .pipeline import IncidentQuery
from .telemetry import read_telemetry_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arca",
        description=(
            "Retrieval-augmented incident triage: find the closest prior "
            "bug ticket and adapt its mitigation."
        ),
    )
    parser.add_argument("--config", help="TOML or JSON config file")
    parser.add_argument(
        "--seed",
        type=int,
        help="master seed; overrides corpus.seed, eval.seed, and ann.seed",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic fault corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--configs", type=int, help="configurations per fault category")
    p.add_argument("--duration", type=int, help="simulated seconds per run")

    p = sub.add_parser("build", help="build a knowledge base from a corpus directory")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="knowledge base directory")
    p.add_argument("--clusters", type=int, help="cluster count (default: sqrt of N)")

    p = sub.add_parser("query", help="answer one incident against a knowledge base")
    p.add_argument("--kb", required=True, help="knowledge base directory")
    p.add_argument("--log", required=True, help="file with the incident's raw log")
    p.add_argument("--description", default="", help="incident description text")
    p.add_argument("--telemetry", help="CSV file: timestamp,counter,value")
    p.add_argument("--json", action="store_true", help="print the full JSON answer")

    p = sub.add_parser("eval", help="run the evaluation suite on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--queries", type=int, help="held-out query count")
    p.add_argument(
        "--build-n", type=int, help="knowledge base size (default: the rest)"
    )
    p.add_argument(
        "--modalities",
        action="store_true",
        help="also report telemetry-only / log-only / combined accuracy",
    )
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.add_argument("--json-out", help="also write the JSON report to this file")

    p = sub.add_parser(
        "log-cluster",
        help="leave-one-out k-NN detection of one fault category from log digests",
    )
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--neighbors", type=int, default=1, help="k for the vote")
    p.add_argument(
        "--positive",
        help="label treated as the anomaly class (default: the least frequent)",
    )

    p = sub.add_parser("serve", help="serve the HTTP API over a knowledge base")
    p.add_argument("--kb", required=True, help="knowledge base directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8020)

    return parser


def _config_for(args: argparse.Namespace):
    cfg = load_config(args.config)
    overrides: dict[str, object] = {}
    if args.seed is not None:
        overrides["corpus.seed"] = args.seed
        overrides["eval.seed"] = args.seed
        overrides["ann.seed"] = args.seed
    if getattr(args, "configs", None) is not None:
        overrides["corpus.configs_per_category"] = args.configs
    if getattr(args, "duration", None) is not None:
        overrides["corpus.duration_s"] = args.duration
    if getattr(args, "clusters", None) is not None:
        overrides["ann.n_clusters"] = args.clusters
    if getattr(args, "queries", None) is not None:
        overrides["eval.n_queries"] = args.queries
    return apply_overrides(cfg, overrides)


def _cmd_gen_corpus(args) -> int:
    cfg = _config_for(args)
    tickets = corpus.generate_corpus(
        configs_per_category=cfg.corpus.configs_per_category,
        seed=cfg.corpus.seed,
        duration_s=cfg.corpus.duration_s,
    )
    corpus.save_corpus(tickets, args.out)
    print(f"wrote {len(tickets)} tickets to {args.out}")
    return 0


def _build_kb(cfg, tickets) -> KnowledgeBase:
    return pipeline.build_knowledge_base(
        tickets,
        extractor=make_extractor(cfg),
        embedder=make_embedder(cfg),
        grid_step=cfg.telemetry.grid_step,
        n_clusters=cfg.ann.n_clusters or None,
        seed=cfg.ann.seed,
    )


def _cmd_build(args) -> int:
    cfg = _config_for(args)
    tickets = corpus.load_corpus(args.corpus)
    kb = _build_kb(cfg, tickets)
    kb.save(args.out)
    print(
        f"knowledge base: {len(kb)} tickets, {len(kb.telemetry)} with telemetry, "
        f"{kb.index.n_clusters} clusters, dimension {kb.embedding_dimension} "
        f"-> {args.out}"
    )
    return 0


def _cmd_query(args) -> int:
    cfg = _config_for(args)
    kb = KnowledgeBase.load(args.kb)
    log_path = Path(args.log)
    if not log_path.exists():
        raise DataError(f"log file {log_path} does not exist")
    telemetry = None
    if args.telemetry:
        tpath = Path(args.telemetry)
        if not tpath.exists():
            raise DataError(f"telemetry file {tpath} does not exist")
        telemetry = tuple(read_telemetry_csv(tpath.read_text(encoding="utf-8")))
    query = IncidentQuery(
        description=args.description,
        raw_log=log_path.read_text(encoding="utf-8"),
        telemetry_series=telemetry,
    )
    answer = pipeline.answer_incident(kb, query, cfg)
    if args.json:
        from .service import answer_to_dict

        print(json.dumps(answer_to_dict(answer), indent=2))
    else:
        v = answer.verdict
        print(f"closest bug: {v.chosen}")
        print(f"judge: {v.provider_tag}" + (f" ({v.note})" if v.note else ""))
        print(f"plan: {answer.plan.plan_text}")
        print(
            f"cost: {answer.cost.tokens_in} tokens in, "
            f"{answer.cost.tokens_out} out, {answer.cost.remote_calls} remote "
            f"calls, ${answer.cost.estimated_cost:.4f}"
        )
    return 0


def _cmd_eval(args) -> int:
    cfg = _config_for(args)
    tickets = corpus.load_corpus(args.corpus)
    test_n = cfg.eval.n_queries
    build_n = args.build_n if args.build_n is not None else len(tickets) - test_n
    base, queries = evaluate.split_corpus(tickets, build_n, test_n, seed=cfg.eval.seed)
    kb = _build_kb(cfg, base)
    report = evaluate.run_eval(kb, queries, cfg)
    payload = report.to_dict()
    payload["kb_tickets"] = len(base)
    if args.modalities:
        modality = evaluate.eval_modalities(kb, queries, cfg.pipeline.k, cfg)
        payload["modalities"] = modality.to_dict()
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(report.table())
        if args.modalities:
            print()
            print(f"{'mode':>16}  {'accuracy':>8}  {'time_s':>8}")
            for row in modality.rows:
                print(f"{row.mode:>16}  {row.accuracy:>8.3f}  {row.mean_time:>8.3f}")
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8"
        )
    return 0


def _cmd_log_cluster(args) -> int:
    cfg = _config_for(args)
    tickets = corpus.load_corpus(args.corpus)
    labeled = [(t.raw_log, t.labels.get("fault_category", "unknown")) for t in tickets]
    report = evaluate.eval_log_clustering(
        labeled,
        k_neighbors=args.neighbors,
        positive_label=args.positive,
        extractor=make_extractor(cfg),
        embedder=make_embedder(cfg),
    )
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_serve(args) -> int:
    cfg = _config_for(args)
    from .service import serve

    serve(KnowledgeBase.load(args.kb), host=args.host, port=args.port, config=cfg)
    return 0


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "build": _cmd_build,
    "query": _cmd_query,
    "eval": _cmd_eval,
    "log-cluster": _cmd_log_cluster,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ArcaError as exc:
        stage = getattr(exc, "stage", None)
        where = f" (stage: {stage})" if stage else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
