#!/usr/bin/env python3
"""Drive the HTTP service in-process: query it, stage a new ticket, and
fold the staging area back into the index.

The service holds the knowledge base read-only while serving; POST
/tickets fully processes submissions (digest, embedding, telemetry
vector) into a staging area so queries stay consistent until an
explicit rebuild applies the batch.

Run:  python3 demos/03_service_and_staging.py
"""
from __future__ import annotations

import json

from fastapi.testclient import TestClient

from arca import build_knowledge_base, generate_corpus
from arca.config import ArcaConfig, make_embedder, make_extractor
from arca.service import apply_staged, create_app


def telemetry_rows(series) -> list[dict]:
    """Flatten counter series into the wire format the service accepts."""
    return [
        {"timestamp": ts, "counter": s.counter_id, "value": value}
        for s in series
        for ts, value in s.samples
    ]


def main() -> None:
    # ------------------------------------------------------------------
    # 1. Build a small knowledge base and mount the service over it.
    #    The app derives its extractor/embedder/judge from the config,
    #    so the base must be built with the same embedder identity.
    # ------------------------------------------------------------------
    config = ArcaConfig()
    config.embedding.dimension = 512
    corpus = generate_corpus(configs_per_category=4, seed=2)
    history, held_out = corpus[:-2], corpus[-2:]
    kb = build_knowledge_base(
        history,
        extractor=make_extractor(config),
        embedder=make_embedder(config),
    )
    app = create_app(kb, config)
    client = TestClient(app)

    health = client.get("/health").json()
    print("GET /health ->", json.dumps(health, indent=2), "\n")

    # ------------------------------------------------------------------
    # 2. Triage an incident over the wire.
    # ------------------------------------------------------------------
    incident = held_out[0]
    response = client.post(
        "/query",
        json={
            "description": incident.description,
            "log": incident.raw_log,
            "telemetry": telemetry_rows(incident.telemetry_series),
        },
    )
    answer = response.json()
    print(f"POST /query ({incident.bug_id} replayed) -> {response.status_code}")
    print(f"    closest bug: {answer['closest_bug']}")
    print(f"    verdict:     {answer['verdict']['provider_tag']}, "
          f"fallback={answer['verdict']['fallback']}")
    print(f"    plan:        {answer['plan']['plan_text'][:72]}...")
    print(f"    prompt:      {answer['prompt']['token_estimate']} tokens "
          f"(budget {answer['prompt']['token_budget']})\n")

    # ------------------------------------------------------------------
    # 3. Stage yesterday's resolved incident as a new ticket. It is
    #    processed eagerly (bad submissions fail now, not at rebuild)
    #    but not yet searchable.
    # ------------------------------------------------------------------
    closed = held_out[1]
    response = client.post(
        "/tickets",
        json={
            "bug_id": closed.bug_id,
            "description": closed.description,
            "resolution": closed.resolution,
            "log": closed.raw_log,
            "telemetry": telemetry_rows(closed.telemetry_series),
        },
    )
    print(f"POST /tickets ({closed.bug_id}) -> {response.status_code} "
          f"{response.json()}")
    record = client.get(f"/bugs/{closed.bug_id}").json()
    print(f"GET /bugs/{closed.bug_id} -> staged={record['staged']}")
    print(f"tickets searchable now: {client.get('/health').json()['tickets']}\n")

    # ------------------------------------------------------------------
    # 4. Apply the staging area: insert the batch and rebuild the index.
    #    In production this is the offline half of the ingest cycle.
    # ------------------------------------------------------------------
    staged = list(app.state.staging.values())
    apply_staged(app.state.kb, staged)
    app.state.staging.clear()
    health = client.get("/health").json()
    print(f"after apply_staged: tickets={health['tickets']}, "
          f"staged_tickets={health['staged_tickets']}, "
          f"index_stale={health['index_stale']}")

    # The ticket we just applied is the true pair of the incident from
    # step 2 (the other run of the same faulty config), so replaying
    # that incident should now land on it instead.
    response = client.post(
        "/query",
        json={
            "description": incident.description,
            "log": incident.raw_log,
            "telemetry": telemetry_rows(incident.telemetry_series),
        },
    )
    print(f"replaying {incident.bug_id} after rebuild -> "
          f"closest bug: {response.json()['closest_bug']}")


if __name__ == "__main__":
    main()
