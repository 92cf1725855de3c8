"""Acceptance suite: eleven runnable criteria, fully offline.

Each criterion is one test that prints a single [PASS] line with its
measured numbers (run with -s to see them alongside the pytest verdicts).
Floors and tolerances are pinned here on purpose; loosening them is a
behavior change, not a test fix.
"""
from __future__ import annotations

import dataclasses
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from arca import pipeline
from arca.ann import build_index, exact_search, search
from arca.corpus import FaultCategory, generate_corpus, paired_bug_id, save_corpus
from arca.embed import EmbeddingVector, OfflineHashingEmbedder, embed
from arca.evaluate import (
    build_modality_fixture,
    eval_log_clustering,
    eval_modalities,
    eval_system,
    eval_triage,
    split_corpus,
)
from arca.kb import BugDescription, KnowledgeBase
from arca.pipeline import (
    Candidate,
    IncidentQuery,
    TriageSet,
    assemble_judge_prompt,
    build_knowledge_base,
)
from arca.telemetry import AlignedMatrix, vectorize

import _rank_helper

# --- criterion 1 & 2 world: 10,000 embedded texts, D=256, C=100 -------------

N_TEXTS = 10_000
DIMENSION = 256
N_CLUSTERS = 100
N_QUERIES = 100

_WORDS = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo "
    "lima mike november oscar papa quebec romeo sierra tango uniform victor"
).split()

N_TOPICS = 40
_TOPIC_VOCABS = [[f"fault{t}sym{w}" for w in range(12)] for t in range(N_TOPICS)]


def _synthetic_text(topic: int, rng: np.random.Generator) -> str:
    """Six draws from the topic's symptom vocabulary plus two shared filler
    words. Texts need latent topical structure (the shape real failure
    digests have) for a cluster-probing index to be measurable; uniform
    random word-bags give every probe schedule near-identical recall."""
    vocab = _TOPIC_VOCABS[topic]
    words = [vocab[j] for j in rng.integers(0, len(vocab), size=6)]
    words += [_WORDS[j] for j in rng.integers(0, len(_WORDS), size=2)]
    return " ".join(words)


@pytest.fixture(scope="module")
def ann_world():
    rng = np.random.default_rng(0)
    embedder = OfflineHashingEmbedder(DIMENSION, seed=0)
    corpus_texts = [_synthetic_text(i % N_TOPICS, rng) for i in range(N_TEXTS)]
    query_texts = [
        _synthetic_text(int(rng.integers(N_TOPICS)), rng) for _ in range(N_QUERIES)
    ]
    vectors = {
        f"t{i:05d}": embed(text, embedder) for i, text in enumerate(corpus_texts)
    }
    index = build_index(vectors, N_CLUSTERS, seed=0)
    queries = [embed(text, embedder) for text in query_texts]
    return vectors, index, queries


def test_criterion_01_ann_full_probe_is_exact(ann_world):
    vectors, index, queries = ann_world
    for query in queries:
        for k in (10, 100, 400):
            approximate = search(index, query, k, nprobe=N_CLUSTERS)
            exact = exact_search(vectors, query, k)
            assert approximate == exact
    print(
        f"\n[PASS] criterion 1: nprobe={N_CLUSTERS} search identical to "
        f"exact_search on {N_QUERIES} queries x k in (10, 100, 400), "
        "including tie-break order"
    )


def test_criterion_02_ann_recall_floor_and_monotonicity(ann_world):
    vectors, index, queries = ann_world
    exact_ids = [
        {bug_id for bug_id, _ in exact_search(vectors, q, 100)} for q in queries
    ]
    probes = (1, 13, 25, 50, 100)  # 1 and ceil(C/8), C/4, C/2, C
    recalls = []
    for nprobe in probes:
        per_query = [
            len({i for i, _ in search(index, q, 100, nprobe)} & truth) / 100
            for q, truth in zip(queries, exact_ids)
        ]
        recalls.append(float(np.mean(per_query)))
    quarter = recalls[probes.index(25)]
    assert quarter >= 0.95
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    summary = ", ".join(f"{p}:{r:.3f}" for p, r in zip(probes, recalls))
    print(
        f"\n[PASS] criterion 2: recall@100 at nprobe=25 is {quarter:.3f} "
        f">= 0.95 and non-decreasing over nprobe ({summary})"
    )


# --- criterion 3: telemetry featurization against a hand-rolled oracle ------


def _oracle_vector(values: list[list[float]]) -> list[float]:
    """Brute-force 21-float summary written without numpy: per column the
    range-normalized mean gradient, arithmetic mean, population std."""
    out = []
    for col_index in range(7):
        column = [row[col_index] for row in values]
        n = len(column)
        mean = sum(column) / n
        std = math.sqrt(sum((x - mean) ** 2 for x in column) / n)
        spread = max(column) - min(column)
        if n == 1 or spread == 0:
            gradient = 0.0
        else:
            diffs = [column[i + 1] - column[i] for i in range(n - 1)]
            gradient = (sum(diffs) / len(diffs)) / spread
        out.extend([gradient, mean, std])
    return out


def test_criterion_03_vectorize_matches_brute_force_oracle():
    rng = np.random.default_rng(17)
    for case in range(1000):
        rows = int(rng.integers(1, 41))
        values = rng.normal(0.0, 5.0, size=(rows, 7))
        if case % 5 == 0:  # sprinkle constant columns to hit the guard
            values[:, int(rng.integers(0, 7))] = float(rng.normal())
        matrix = AlignedMatrix(
            grid=np.arange(rows, dtype=np.float64),
            values=values,
            mask=np.zeros((rows, 7), dtype=bool),
        )
        got = vectorize(matrix).components
        want = _oracle_vector(values.tolist())
        assert len(got) == 21
        assert np.allclose(got, want, atol=1e-12, rtol=0.0)
    print(
        "\n[PASS] criterion 3: vectorize matches the brute-force oracle to "
        "1e-12 on 1000 random matrices; output length always 21"
    )


# --- criteria 4 & 5 world: 800-ticket corpus, 700/100 split -----------------


@pytest.fixture(scope="module")
def corpus800():
    return generate_corpus(configs_per_category=100, seed=0)


@pytest.fixture(scope="module")
def triage_world(corpus800, extractor, embedder):
    build, test = split_corpus(corpus800, build_n=700, test_n=100, seed=0)
    kb = build_knowledge_base(build, extractor=extractor, embedder=embedder, seed=0)
    return kb, test


def test_criterion_04_triage_accuracy_floor(triage_world, extractor, embedder):
    kb, test = triage_world
    nprobe = kb.require_index().n_clusters
    kwargs = dict(extractor=extractor, embedder=embedder, nprobe=nprobe)
    accuracy = eval_triage(kb, test, K=300, retain_fraction=0.8, **kwargs)
    assert accuracy >= 0.90
    full = eval_triage(kb, test, K=len(kb), retain_fraction=1.0, **kwargs)
    assert full == 1.0
    print(
        f"\n[PASS] criterion 4: triage accuracy {accuracy:.3f} >= 0.90 at "
        f"K=300/retain=0.8; exactly {full:.1f} at K=full/retain=1.0"
    )


def test_criterion_05_system_accuracy_floor(triage_world, extractor, embedder):
    kb, test = triage_world
    nprobe = kb.require_index().n_clusters
    kwargs = dict(extractor=extractor, embedder=embedder, nprobe=nprobe)
    triage = eval_triage(kb, test, K=300, retain_fraction=0.8, **kwargs)
    system = eval_system(kb, test, K=300, retain_fraction=0.8, **kwargs)
    assert system >= 0.70
    assert system <= triage
    print(
        f"\n[PASS] criterion 5: system accuracy {system:.3f} >= 0.70 and "
        f"<= triage accuracy {triage:.3f}"
    )


def test_criterion_06_modality_ablation_direction(extractor, embedder):
    build, queries = build_modality_fixture()
    kb = build_knowledge_base(build, extractor=extractor, embedder=embedder, seed=0)
    report = eval_modalities(kb, queries, extractor=extractor, embedder=embedder)
    telemetry = report.accuracy("telemetry_only")
    log = report.accuracy("log_only")
    combined = report.accuracy("combined")
    assert combined > log
    assert telemetry < log
    assert telemetry < combined
    print(
        f"\n[PASS] criterion 6: combined {combined:.2f} > log-only {log:.2f} "
        f"> telemetry-only {telemetry:.2f} on the log-ambiguous fixture"
    )


def test_criterion_07_prompt_budget_safety():
    rng = np.random.default_rng(7)
    embedder = OfflineHashingEmbedder(DIMENSION, seed=0)
    kb = KnowledgeBase(DIMENSION)
    filler = "signal framing drops on channel <NUM> after resync "
    ids = []
    for i in range(60):
        bug_id = f"budget-{i:03d}"
        size = int(rng.integers(100, 16_001))
        kb.insert_ticket(
            bug_id,
            BugDescription(
                incident_text=f"incident {i}",
                resolution_text=f"resolution {i}",
                digest_text=(filler * (size // len(filler) + 1))[:size],
            ),
            embed(f"record {i}", embedder),
            None,
        )
        ids.append(bug_id)
    violations = 0
    for _ in range(500):
        query_size = int(rng.integers(100, 12_001))
        prepared = pipeline.PreparedQuery(
            query=IncidentQuery(description="incident", raw_log="-"),
            digest_text=(filler * (query_size // len(filler) + 1))[:query_size],
            embedding=embed("query", embedder),
            telemetry_vector=None,
        )
        count = int(rng.integers(1, len(ids) + 1))
        chosen = rng.choice(len(ids), size=count, replace=False)
        candidates = TriageSet(
            [Candidate(ids[j], log_score=1.0 - 0.001 * rank) for rank, j in enumerate(chosen)]
        )
        bundle = assemble_judge_prompt(
            prepared, candidates, kb, token_budget=30_000, chars_per_token=4
        )
        assert bundle.included_count >= 1
        if bundle.token_estimate > 30_000:
            violations += 1
    assert violations == 0
    print(
        "\n[PASS] criterion 7: 500 randomized prompt assemblies, every "
        "token estimate <= 30000, zero violations"
    )


def test_criterion_08_refinement_cardinality(small_kb, small_corpus, extractor, embedder):
    ticket = small_corpus[50]
    prepared = pipeline.prepare_query(
        IncidentQuery(
            description=ticket.description,
            raw_log=ticket.raw_log,
            telemetry_series=tuple(ticket.telemetry_series),
        ),
        extractor=extractor,
        embedder=embedder,
    )
    nprobe = small_kb.require_index().n_clusters
    rng = np.random.default_rng(11)
    for _ in range(100):
        K = int(rng.integers(1, 81))
        retain = float(rng.uniform(0.01, 1.0))
        first = pipeline.triage(small_kb, prepared, K, nprobe)
        refined = pipeline.refine_with_telemetry(
            small_kb, first, prepared.telemetry_vector, retain
        )
        assert len(refined) == math.ceil(retain * len(first))
    print(
        "\n[PASS] criterion 8: |refined| == ceil(retain x K_effective) for "
        "100 random (K, retain) pairs"
    )


def test_criterion_09_persistence_parity(
    tmp_path, small_corpus, extractor, embedder
):
    kb = build_knowledge_base(
        small_corpus[:44], extractor=extractor, embedder=embedder, seed=0
    )
    queries = small_corpus[44:64]
    assert len(queries) == 20
    before = _rank_helper.ranked_outputs(kb, queries)

    kb_dir = tmp_path / "kb"
    corpus_dir = tmp_path / "queries"
    kb.save(kb_dir)
    save_corpus(queries, corpus_dir)
    script = Path(__file__).with_name("_rank_helper.py")
    proc = subprocess.run(
        [sys.executable, str(script), str(kb_dir), str(corpus_dir)],
        capture_output=True,
        text=True,
        check=True,
    )
    after = json.loads(proc.stdout)
    assert after == json.loads(json.dumps(before))
    print(
        "\n[PASS] criterion 9: 20 queries rank bit-identically after "
        "save -> load in a fresh process"
    )


def _family_log(kind: str, run: int) -> str:
    if kind == "auth":
        body = [
            f"2024-02-01T00:0{t}:00Z ERROR auth: token expired for user u{run}{t}"
            for t in range(6)
        ]
        body.append("2024-02-01T00:06:00Z WARN auth: session cache forced refresh")
    else:
        body = [
            f"2024-02-01T00:0{t}:00Z ERROR disk: write failure on volume v{run}{t}"
            for t in range(6)
        ]
        body.append("2024-02-01T00:06:00Z WARN disk: remounting array read-only")
    body.insert(0, "2024-02-01T00:00:00Z INFO svc: service starting release 1")
    return "\n".join(body) + "\n"


def test_criterion_10_log_clustering_f1_and_identities():
    labeled = [(_family_log("auth", i), "auth_fault") for i in range(7)]
    labeled += [(_family_log("disk", i), "disk_fault") for i in range(5)]
    report = eval_log_clustering(labeled, k_neighbors=1)
    assert report.positive_label == "disk_fault"  # the least frequent label
    assert report.f1 == 1.0
    for k in (1, 3):
        for positive in ("auth_fault", "disk_fault"):
            rep = eval_log_clustering(labeled, k_neighbors=k, positive_label=positive)
            tp, fp, fn, tn = (
                rep.true_positive,
                rep.false_positive,
                rep.false_negative,
                rep.true_negative,
            )
            assert tp + fp + fn + tn == rep.n_items == len(labeled)
            assert rep.precision == (tp / (tp + fp) if tp + fp else 0.0)
            assert rep.recall == (tp / (tp + fn) if tp + fn else 0.0)
            if rep.precision + rep.recall:
                assert rep.f1 == pytest.approx(
                    2 * rep.precision * rep.recall / (rep.precision + rep.recall)
                )
            else:
                assert rep.f1 == 0.0
    print(
        "\n[PASS] criterion 10: F1 = 1.0 on the separable log fixture; "
        "precision/recall/F1 identities hold on every report"
    )


def test_criterion_11_corpus_invariants(corpus800):
    assert len(corpus800) == 800
    by_id = {t.bug_id: t for t in corpus800}
    assert len(by_id) == 800
    for ticket in corpus800:
        partner_id = paired_bug_id(ticket.bug_id)
        assert paired_bug_id(partner_id) == ticket.bug_id
        assert ticket.labels["closest_bug_id"] == partner_id
        assert by_id[partner_id].labels["closest_bug_id"] == ticket.bug_id
    leak_count = 0
    for ticket in corpus800:
        if ticket.labels["fault_category"] != FaultCategory.MEM_LEAK.value:
            continue
        leak_count += 1
        for series in ticket.telemetry_series:
            if series.counter_id != "mem_util":
                continue
            values = [v for _, v in series.samples]
            assert all(b >= a for a, b in zip(values, values[1:]))
    assert leak_count == 200
    print(
        "\n[PASS] criterion 11: 800 tickets, pairing involution holds for "
        "all, memory trend non-decreasing in all 200 leak tickets"
    )
