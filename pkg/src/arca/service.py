"""HTTP front end.

POST /query answers a new incident against the loaded knowledge base.
POST /tickets validates and processes a ticket into a staging area; the
knowledge base itself stays immutable for the life of the process, so
concurrent queries always see one consistent index. Staged tickets join
the store on the next offline rebuild (apply_staged). GET /bugs/{id}
returns one ticket, GET /health reports store, index, and staging
state.

Bad request bodies map to 400, unknown ids to 404, provider failures
to 503, duplicate ids to 409.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

from fastapi import Body, FastAPI, HTTPException

from . import pipeline
from .config import (
    ArcaConfig,
    judge_provider,
    make_embedder,
    make_extractor,
    plan_provider,
)
from .embed import EmbeddingVector, embed
from .errors import ArcaError, DuplicateId, ProviderError
from .kb import BugDescription, KnowledgeBase
from .logproc import process_raw_log
from .pipeline import IncidentQuery
from .telemetry import TelemetryVector, align, read_telemetry_json, vectorize


@dataclass(frozen=True)
class StagedTicket:
    """A fully processed ticket waiting for the next index rebuild."""

    bug_id: str
    description: BugDescription
    log_embedding: EmbeddingVector
    telemetry_vector: TelemetryVector | None


def apply_staged(kb: KnowledgeBase, staged: list[StagedTicket]) -> KnowledgeBase:
    """Insert staged tickets into the knowledge base and rebuild its
    index; the offline half of the ingest-then-rebuild cycle."""
    for item in staged:
        kb.insert_ticket(
            item.bug_id, item.description, item.log_embedding, item.telemetry_vector
        )
    if staged:
        kb.build_index()
    return kb


def _parse_telemetry(rows):
    if rows is None:
        return None
    if not isinstance(rows, list):
        raise HTTPException(400, "telemetry must be a list of sample objects")
    try:
        series = read_telemetry_json(rows)
    except (ArcaError, ValueError, KeyError, TypeError) as exc:
        raise HTTPException(400, f"bad telemetry: {exc}") from exc
    return tuple(series) if series else None


def create_app(kb: KnowledgeBase, config: ArcaConfig | None = None) -> FastAPI:
    config = config or ArcaConfig().validate()
    app = FastAPI(title="incident triage service")
    extractor = make_extractor(config)
    embedder = make_embedder(config)
    judge = judge_provider(config)
    planner = plan_provider(config)
    staging: dict[str, StagedTicket] = {}
    staging_lock = threading.Lock()

    # The store is frozen once serving starts: build whatever is missing
    # now so request handlers never mutate shared state.
    if len(kb) and (kb.index is None or kb.index_stale):
        kb.build_index(n_clusters=config.ann.n_clusters or None, seed=config.ann.seed)
    if kb.telemetry and kb.stats is None:
        kb.compute_telemetry_stats()
    app.state.kb = kb
    app.state.staging = staging

    @app.get("/health")
    def health() -> dict:
        return {
            "status": "ok",
            "tickets": len(kb),
            "telemetry_vectors": len(kb.telemetry),
            "embedding_dimension": kb.embedding_dimension,
            "index_clusters": kb.index.n_clusters if kb.index else 0,
            "index_stale": kb.index_stale,
            "staged_tickets": len(staging),
        }

    @app.get("/bugs/{bug_id}")
    def get_bug(bug_id: str) -> dict:
        record = kb.descriptions.get(bug_id)
        staged = False
        has_telemetry = bug_id in kb.telemetry
        if record is None:
            item = staging.get(bug_id)
            if item is None:
                raise HTTPException(404, f"no ticket {bug_id!r}")
            record = item.description
            staged = True
            has_telemetry = item.telemetry_vector is not None
        return {
            "bug_id": bug_id,
            "description": record.incident_text,
            "resolution": record.resolution_text,
            "triage_note": record.triage_note,
            "digest_text": record.digest_text,
            "labels": record.labels,
            "has_telemetry": has_telemetry,
            "staged": staged,
        }

    @app.post("/tickets")
    def post_ticket(payload: dict = Body(...)) -> dict:
        for key in ("bug_id", "description", "resolution", "log"):
            if not isinstance(payload.get(key), str) or not payload[key].strip():
                raise HTTPException(400, f"field {key!r} must be a non-empty string")
        bug_id = payload["bug_id"]
        telemetry = _parse_telemetry(payload.get("telemetry"))
        try:
            digest = process_raw_log(payload["log"], extractor)
            vector = embed(digest, embedder)
            tvec = vectorize(align(list(telemetry), config.telemetry.grid_step)) if telemetry else None
        except ProviderError as exc:
            raise HTTPException(503, str(exc)) from exc
        except ArcaError as exc:
            raise HTTPException(400, str(exc)) from exc
        if vector.dimension != kb.embedding_dimension:
            raise HTTPException(
                400,
                f"embedding is {vector.dimension}-dim, store wants "
                f"{kb.embedding_dimension}",
            )
        item = StagedTicket(
            bug_id=bug_id,
            description=BugDescription(
                incident_text=payload["description"],
                resolution_text=payload["resolution"],
                digest_text=digest,
            ),
            log_embedding=vector,
            telemetry_vector=tvec,
        )
        with staging_lock:
            if bug_id in kb or bug_id in staging:
                raise HTTPException(409, f"bug id {bug_id!r} already stored")
            staging[bug_id] = item
        return {
            "staged": bug_id,
            "staged_tickets": len(staging),
            "tickets": len(kb),
        }

    @app.post("/query")
    def post_query(payload: dict = Body(...)) -> dict:
        description = payload.get("description")
        if not isinstance(description, str) or not description.strip():
            raise HTTPException(400, "field 'description' must be a non-empty string")
        log_text = payload.get("log")
        if not isinstance(log_text, str) or not log_text.strip():
            raise HTTPException(400, "field 'log' must be a non-empty string")
        telemetry = _parse_telemetry(payload.get("telemetry"))
        query = IncidentQuery(
            description=description, raw_log=log_text, telemetry_series=telemetry
        )
        try:
            answer = pipeline.answer_incident(
                kb,
                query,
                config,
                extractor=extractor,
                embedder=embedder,
                judge_provider=judge,
                plan_provider=planner,
            )
        except ProviderError as exc:
            raise HTTPException(503, str(exc)) from exc
        except ArcaError as exc:
            raise HTTPException(400, str(exc)) from exc
        return answer_to_dict(answer)

    return app


def _call_dict(call) -> dict:
    return {
        "stage": call.stage,
        "provider_tag": call.provider_tag,
        "tokens_in": call.tokens_in,
        "tokens_out": call.tokens_out,
        "elapsed": call.elapsed,
        "remote": call.remote,
        "note": call.note,
    }


def answer_to_dict(answer: pipeline.IncidentAnswer) -> dict:
    return {
        "closest_bug": answer.verdict.chosen,
        "plan": {
            "plan_text": answer.plan.plan_text,
            "source_bug": answer.plan.source_bug,
            "provider_tag": answer.plan.provider_tag,
            "provenance": [_call_dict(c) for c in answer.plan.provenance],
        },
        "verdict": {
            "chosen": answer.verdict.chosen,
            "candidate_index": answer.verdict.candidate_index,
            "candidates_considered": answer.verdict.candidates_considered,
            "rationale": answer.verdict.rationale,
            "provider_tag": answer.verdict.provider_tag,
            "fallback": answer.verdict.fallback,
            "note": answer.verdict.note,
        },
        "triage": {
            "stage": answer.triage.stage.value,
            "candidates": [
                {
                    "bug_id": c.bug_id,
                    "log_score": c.log_score,
                    "telemetry_score": c.telemetry_score,
                }
                for c in answer.triage.candidates
            ],
        },
        "first_round_size": len(answer.first_round),
        "refinement_skipped": answer.refinement_skipped,
        "query_digest": answer.query_digest,
        "prompt": {
            "token_estimate": answer.prompt.token_estimate,
            "token_budget": answer.prompt.token_budget,
            "included_candidates": answer.prompt.included_count,
        },
        "cost": {
            "tokens_in": answer.cost.tokens_in,
            "tokens_out": answer.cost.tokens_out,
            "remote_calls": answer.cost.remote_calls,
            "estimated_cost": answer.cost.estimated_cost,
            "elapsed": dict(answer.cost.elapsed),
        },
        "calls": [_call_dict(c) for c in answer.cost.calls],
    }


def serve(
    kb: KnowledgeBase,
    host: str = "127.0.0.1",
    port: int = 8020,
    config: ArcaConfig | None = None,
) -> None:
    """Run the HTTP service over an already-loaded knowledge base."""
    import uvicorn

    app = create_app(kb, config)
    uvicorn.run(app, host=host, port=port)
