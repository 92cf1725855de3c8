"""Evaluation harness.

The synthetic corpus generates every configuration twice, so the other
run of the same configuration is the ground-truth closest bug. The
split keeps that twin inside the knowledge base whenever a ticket is
drawn as a query, mirroring an archive that already contains the
incident being re-reported.

Measured here: triage accuracy (the twin survives both retrieval
rounds), system accuracy (the judge picks the twin), a per-K breakdown
of both with cost and time, a three-way modality ablation, and
leave-one-out log clustering scored as anomaly detection.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import pipeline
from .corpus import BugTicket
from .errors import ConfigError, DataError, DegenerateLabels, InfeasibleSplit
from .kb import KnowledgeBase
from .logproc import RuleBasedExtractor, process_raw_log
from .pipeline import IncidentQuery
from .embed import OfflineHashingEmbedder, embed
from .telemetry import CANONICAL_COUNTERS, TelemetrySeries, telemetry_similarity


# --- corpus splitting -------------------------------------------------------


def split_corpus(
    corpus: list[BugTicket], build_n: int, test_n: int, seed: int = 0
) -> tuple[list[BugTicket], list[BugTicket]]:
    """Disjoint (build, test) sets of the requested sizes in which every
    test ticket's labeled closest bug lands in the build set.

    Construction: pick test_n distinct ticket pairs, hold out one run of
    each as a test query, force its twin into the build set, and fill
    the remaining build slots from the leftover tickets. Deterministic
    under the seed.
    """
    by_id = {t.bug_id: t for t in corpus}
    if len(by_id) != len(corpus):
        raise InfeasibleSplit("corpus holds duplicate bug ids")
    if build_n < 0 or test_n < 1:
        raise InfeasibleSplit("need build_n >= 0 and test_n >= 1")
    if build_n + test_n > len(corpus):
        raise InfeasibleSplit(
            f"cannot split {len(corpus)} tickets into {build_n} + {test_n}"
        )

    pair_groups: dict[tuple[str, str], list[str]] = {}
    for t in corpus:
        closest = (t.labels or {}).get("closest_bug_id")
        if closest is None or closest not in by_id or closest == t.bug_id:
            continue
        key = (min(t.bug_id, closest), max(t.bug_id, closest))
        pair_groups.setdefault(key, []).append(t.bug_id)

    keys = sorted(pair_groups)
    if test_n > len(keys):
        raise InfeasibleSplit(
            f"only {len(keys)} resolvable ticket pairs, cannot draw {test_n} queries"
        )
    if build_n < test_n:
        raise InfeasibleSplit(
            f"build set of {build_n} cannot hold the {test_n} twins the "
            "test queries require"
        )

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen = rng.choice(len(keys), size=test_n, replace=False)
    test_ids: set[str] = set()
    twin_ids: set[str] = set()
    for slot in chosen:
        members = sorted(pair_groups[keys[slot]])
        held = members[int(rng.integers(len(members)))]
        test_ids.add(held)
        twin_ids.add(by_id[held].labels["closest_bug_id"])

    filler_pool = sorted(set(by_id) - test_ids - twin_ids)
    fill_needed = build_n - len(twin_ids)
    if fill_needed > len(filler_pool):
        raise InfeasibleSplit(
            f"need {fill_needed} filler tickets for the build set, "
            f"only {len(filler_pool)} remain"
        )
    fillers = (
        {filler_pool[i] for i in rng.choice(len(filler_pool), size=fill_needed, replace=False)}
        if fill_needed
        else set()
    )
    build_ids = twin_ids | fillers
    build = sorted((by_id[i] for i in build_ids), key=lambda t: t.bug_id)
    test = sorted((by_id[i] for i in test_ids), key=lambda t: t.bug_id)
    return build, test


# --- shared plumbing --------------------------------------------------------


@dataclass
class QueryOutcome:
    bug_id: str
    expected: str
    retrieved: bool
    chosen: str | None = None


@dataclass
class _Setup:
    extractor: object
    embedder: object
    nprobe: int | None
    retain_fraction: float
    grid_step: float
    token_budget: int
    chars_per_token: int
    judge_provider: object
    plan_provider: object
    prices: dict


def _resolve(
    kb: KnowledgeBase,
    config,
    extractor,
    embedder,
    nprobe,
    retain_fraction,
    grid_step,
) -> _Setup:
    from . import config as config_module

    if config is None:
        config = config_module.ArcaConfig()
    if extractor is None:
        extractor = config_module.make_extractor(config)
    if embedder is None:
        embedder = config_module.make_embedder(config)
    if embedder.dimension != kb.embedding_dimension:
        raise ConfigError(
            f"embedder is {embedder.dimension}-dim but the knowledge base "
            f"stores {kb.embedding_dimension}-dim embeddings"
        )
    return _Setup(
        extractor=extractor,
        embedder=embedder,
        nprobe=(config.ann.nprobe or None) if nprobe is None else nprobe,
        retain_fraction=(
            config.pipeline.retain_fraction
            if retain_fraction is None
            else retain_fraction
        ),
        grid_step=config.telemetry.grid_step if grid_step is None else grid_step,
        token_budget=config.pipeline.token_budget,
        chars_per_token=config.pipeline.chars_per_token,
        judge_provider=config_module.judge_provider(config),
        plan_provider=config_module.plan_provider(config),
        prices=config_module.price_table(config),
    )


def _query_of(ticket: BugTicket) -> IncidentQuery:
    return IncidentQuery(
        description=ticket.description,
        raw_log=ticket.raw_log,
        telemetry_series=ticket.telemetry_series or None,
    )


def _expected(ticket: BugTicket) -> str:
    labels = ticket.labels or {}
    expected = labels.get("closest_bug_id")
    if not expected:
        raise DataError(f"ticket {ticket.bug_id!r} has no closest_bug_id label")
    return expected


# --- triage and system accuracy --------------------------------------------


def triage_outcomes(
    kb: KnowledgeBase,
    tickets: list[BugTicket],
    K: int,
    config=None,
    *,
    extractor=None,
    embedder=None,
    nprobe: int | None = None,
    retain_fraction: float | None = None,
    grid_step: float | None = None,
) -> list[QueryOutcome]:
    """Per-query record of whether the labeled closest bug survives both
    retrieval rounds."""
    if not tickets:
        raise DataError("no queries to evaluate")
    setup = _resolve(kb, config, extractor, embedder, nprobe, retain_fraction, grid_step)
    outcomes = []
    for ticket in tickets:
        expected = _expected(ticket)
        prepared = pipeline.prepare_query(
            _query_of(ticket),
            extractor=setup.extractor,
            embedder=setup.embedder,
            grid_step=setup.grid_step,
        )
        first = pipeline.triage(kb, prepared, K, setup.nprobe)
        refined = pipeline.refine_with_telemetry(
            kb, first, prepared.telemetry_vector, setup.retain_fraction
        )
        outcomes.append(
            QueryOutcome(ticket.bug_id, expected, retrieved=expected in refined)
        )
    return outcomes


def eval_triage(
    kb: KnowledgeBase,
    tickets: list[BugTicket],
    K: int = pipeline.DEFAULT_K,
    config=None,
    **kwargs,
) -> float:
    """Fraction of test queries whose labeled closest bug appears in the
    post-refinement triage set."""
    outcomes = triage_outcomes(kb, tickets, K, config, **kwargs)
    return sum(o.retrieved for o in outcomes) / len(outcomes)


@dataclass
class SystemRun:
    outcomes: list[QueryOutcome]
    mean_cost: float = 0.0
    mean_time: float = 0.0
    remote_calls: int = 0
    stage_seconds: dict[str, float] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return sum(o.chosen == o.expected for o in self.outcomes) / len(self.outcomes)

    @property
    def triage_accuracy(self) -> float:
        return sum(o.retrieved for o in self.outcomes) / len(self.outcomes)


def system_run(
    kb: KnowledgeBase,
    tickets: list[BugTicket],
    K: int,
    config=None,
    *,
    extractor=None,
    embedder=None,
    nprobe: int | None = None,
    retain_fraction: float | None = None,
    grid_step: float | None = None,
    judge_provider=None,
    plan_provider=None,
) -> SystemRun:
    """One full pass of answer_incident over the test set, with verdict
    outcomes and aggregate cost and timing."""
    if not tickets:
        raise DataError("no queries to evaluate")
    setup = _resolve(kb, config, extractor, embedder, nprobe, retain_fraction, grid_step)
    judge_provider = judge_provider or setup.judge_provider
    plan_provider = plan_provider or setup.plan_provider
    outcomes = []
    total_cost = 0.0
    total_time = 0.0
    remote = 0
    stage_seconds: dict[str, float] = {}
    for ticket in tickets:
        expected = _expected(ticket)
        answer = pipeline.answer_incident(
            kb,
            _query_of(ticket),
            extractor=setup.extractor,
            embedder=setup.embedder,
            K=K,
            nprobe=setup.nprobe,
            retain_fraction=setup.retain_fraction,
            token_budget=setup.token_budget,
            chars_per_token=setup.chars_per_token,
            judge_provider=judge_provider,
            plan_provider=plan_provider,
            prices=setup.prices,
            grid_step=setup.grid_step,
        )
        total_cost += answer.cost.estimated_cost
        total_time += sum(answer.cost.elapsed.values())
        remote += answer.cost.remote_calls
        for name, secs in answer.cost.elapsed.items():
            stage_seconds[name] = stage_seconds.get(name, 0.0) + secs
        outcomes.append(
            QueryOutcome(
                ticket.bug_id,
                expected,
                retrieved=expected in answer.triage,
                chosen=answer.verdict.chosen,
            )
        )
    return SystemRun(
        outcomes=outcomes,
        mean_cost=total_cost / len(tickets),
        mean_time=total_time / len(tickets),
        remote_calls=remote,
        stage_seconds=stage_seconds,
    )


def eval_system(
    kb: KnowledgeBase,
    tickets: list[BugTicket],
    K: int = pipeline.DEFAULT_K,
    config=None,
    repeats: int = 1,
    **kwargs,
) -> float:
    """Fraction over test x repeats of judge verdicts equal to the
    labeled closest bug. With offline providers each repeat reproduces
    the same outcomes, so one pass stands in for all of them."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    deterministic = kwargs.get("judge_provider") is None and (
        config is None or config.pipeline.judge == "offline"
    )
    passes = 1 if deterministic else repeats
    hits = 0
    total = 0
    for _ in range(passes):
        run = system_run(kb, tickets, K, config, **kwargs)
        hits += sum(o.chosen == o.expected for o in run.outcomes)
        total += len(run.outcomes)
    if deterministic and repeats > 1:
        hits *= repeats
        total *= repeats
    return hits / total


# --- aggregate report -------------------------------------------------------


@dataclass
class PerKRow:
    k: int
    triage_accuracy: float
    system_accuracy: float
    mean_cost: float
    mean_time: float


@dataclass
class EvalReport:
    """Headline accuracies at the configured K plus a per-K breakdown."""

    triage_accuracy: float
    system_accuracy: float
    per_k: list[PerKRow]
    repeats: int
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "triage_accuracy": self.triage_accuracy,
            "system_accuracy": self.system_accuracy,
            "repeats": self.repeats,
            "n_queries": self.n_queries,
            "per_k": [
                {
                    "k": row.k,
                    "triage_accuracy": row.triage_accuracy,
                    "system_accuracy": row.system_accuracy,
                    "mean_cost": row.mean_cost,
                    "mean_time": row.mean_time,
                }
                for row in self.per_k
            ],
        }

    def table(self) -> str:
        lines = [
            f"queries: {self.n_queries}   repeats: {self.repeats}",
            f"triage accuracy: {self.triage_accuracy:.3f}   "
            f"system accuracy: {self.system_accuracy:.3f}",
            "",
            f"{'K':>6}  {'triage':>8}  {'system':>8}  {'cost':>10}  {'time_s':>8}",
        ]
        for row in self.per_k:
            lines.append(
                f"{row.k:>6}  {row.triage_accuracy:>8.3f}  "
                f"{row.system_accuracy:>8.3f}  {row.mean_cost:>10.6f}  "
                f"{row.mean_time:>8.3f}"
            )
        return "\n".join(lines)


def run_eval(
    kb: KnowledgeBase,
    tickets: list[BugTicket],
    config=None,
    ks: list[int] | None = None,
    **kwargs,
) -> EvalReport:
    """System and triage accuracy at the configured K and every extra K,
    sorted ascending, with per-query mean cost and wall time."""
    from . import config as config_module

    if config is None:
        config = config_module.ArcaConfig()
    headline_k = config.pipeline.k
    if ks is None:
        ks = list(config.eval.ks)
    all_ks = sorted(set(ks) | {headline_k})
    repeats = config.eval.repeats
    rows = []
    headline = None
    for k in all_ks:
        run = system_run(kb, tickets, k, config, **kwargs)
        row = PerKRow(
            k=k,
            triage_accuracy=run.triage_accuracy,
            system_accuracy=run.accuracy,
            mean_cost=run.mean_cost,
            mean_time=run.mean_time,
        )
        rows.append(row)
        if k == headline_k:
            headline = row
    return EvalReport(
        triage_accuracy=headline.triage_accuracy,
        system_accuracy=headline.system_accuracy,
        per_k=rows,
        repeats=repeats,
        n_queries=len(tickets),
    )


# --- modality ablation ------------------------------------------------------


@dataclass
class ModalityRow:
    mode: str
    accuracy: float
    mean_cost: float
    mean_time: float


@dataclass
class ModalityReport:
    rows: list[ModalityRow]

    def accuracy(self, mode: str) -> float:
        for row in self.rows:
            if row.mode == mode:
                return row.accuracy
        raise KeyError(mode)

    def to_dict(self) -> dict:
        return {
            row.mode: {
                "accuracy": row.accuracy,
                "mean_cost": row.mean_cost,
                "mean_time": row.mean_time,
            }
            for row in self.rows
        }


def _telemetry_only_choice(kb: KnowledgeBase, query_vector) -> str | None:
    if query_vector is None or not kb.telemetry:
        return None
    stats = kb.stats if kb.stats is not None else kb.compute_telemetry_stats()
    scored = sorted(
        (-telemetry_similarity(query_vector, vec, stats), bug_id)
        for bug_id, vec in kb.telemetry.items()
    )
    return scored[0][1]


def eval_modalities(
    kb: KnowledgeBase,
    tickets: list[BugTicket],
    K: int = pipeline.DEFAULT_K,
    config=None,
    *,
    extractor=None,
    embedder=None,
    nprobe: int | None = None,
    retain_fraction: float | None = None,
    grid_step: float | None = None,
) -> ModalityReport:
    """Accuracy of each signal alone and of both combined.

    telemetry_only ranks the whole store by telemetry similarity;
    log_only judges the first-round candidates on log scores alone;
    combined runs retrieval, refinement, and the two-signal judge.
    """
    if not tickets:
        raise DataError("no queries to evaluate")
    setup = _resolve(kb, config, extractor, embedder, nprobe, retain_fraction, grid_step)
    hits = {"telemetry_only": 0, "log_only": 0, "combined": 0}
    seconds = {"telemetry_only": 0.0, "log_only": 0.0, "combined": 0.0}
    for ticket in tickets:
        expected = _expected(ticket)
        prep_start = time.perf_counter()
        prepared = pipeline.prepare_query(
            _query_of(ticket),
            extractor=setup.extractor,
            embedder=setup.embedder,
            grid_step=setup.grid_step,
        )
        prep_time = time.perf_counter() - prep_start

        start = time.perf_counter()
        choice = _telemetry_only_choice(kb, prepared.telemetry_vector)
        seconds["telemetry_only"] += time.perf_counter() - start + prep_time
        if choice == expected:
            hits["telemetry_only"] += 1

        start = time.perf_counter()
        first = pipeline.triage(kb, prepared, K, setup.nprobe)
        log_verdict = pipeline.judge_offline(first, use_telemetry=False)
        triage_time = time.perf_counter() - start
        seconds["log_only"] += triage_time + prep_time
        if log_verdict.chosen == expected:
            hits["log_only"] += 1

        start = time.perf_counter()
        refined = pipeline.refine_with_telemetry(
            kb, first, prepared.telemetry_vector, setup.retain_fraction
        )
        combined_verdict = pipeline.judge_offline(refined)
        seconds["combined"] += time.perf_counter() - start + triage_time + prep_time
        if combined_verdict.chosen == expected:
            hits["combined"] += 1
    n = len(tickets)
    return ModalityReport(
        rows=[
            ModalityRow(
                mode=mode,
                accuracy=hits[mode] / n,
                mean_cost=0.0,
                mean_time=seconds[mode] / n,
            )
            for mode in ("telemetry_only", "log_only", "combined")
        ]
    )


# --- modality fixture -------------------------------------------------------

_FIXTURE_FAULTS = (
    "payment retry exhausted for order",
    "session cache eviction storm on shard",
    "stale read served from replica",
    "quota check timed out for tenant",
    "checksum mismatch on segment",
    "token refresh loop detected for client",
    "backlog flush stalled on queue",
    "schema migration lock held past deadline for table",
    "orphaned lease renewal for volume",
    "duplicate delivery on topic",
    "cold start burst exceeded pool size on node",
    "watchdog restart after heartbeat loss on host",
)


def _fixture_log(case: int) -> str:
    """Raw log whose digest depends only on the case number: every
    variant of a case digests (and therefore embeds) identically."""
    fault = _FIXTURE_FAULTS[case]
    lines = [f"2024-03-01T00:00:00Z INFO app: worker {case} starting"]
    for t in range(24):
        lines.append(
            f"2024-03-01T00:{t // 60:02d}:{t % 60:02d}Z ERROR app: "
            f"{fault} {1000 + 7 * t}"
        )
    for t in range(8):
        lines.append(
            f"2024-03-01T01:00:{t:02d}Z INFO app: handled GET /api/v1/case "
            f"in {20 + t} ms status=200"
        )
    return "\n".join(lines) + "\n"


def _shape_series(shape: int, tweak: float = 0.0) -> list[TelemetrySeries]:
    """Deterministic counter shapes: a ramp, a step, a spike train, or a
    flat baseline, rotated across counters by shape index."""
    t = np.arange(40, dtype=np.float64)
    patterns = [
        10.0 + t * 1.5,
        np.where(t < 20, 10.0, 55.0),
        10.0 + 40.0 * (t % 8 == 0),
        np.full_like(t, 12.0),
    ]
    series = []
    for idx, name in enumerate(CANONICAL_COUNTERS):
        values = patterns[(idx + shape) % len(patterns)].copy()
        values[0] += tweak
        series.append(
            TelemetrySeries(counter_id=name, samples=tuple(zip(t, values.tolist())))
        )
    return series


def build_modality_fixture() -> tuple[list[BugTicket], list[BugTicket]]:
    """A (build, queries) corpus where the two signals disagree on
    purpose.

    Every case stores two tickets with byte-identical raw logs: the true
    twin, whose telemetry matches the query's shape, and a foil with
    flat telemetry. Log similarity alone cannot separate them, and the
    id tie-break is arranged to pick the foil for half the cases. Query
    telemetry follows shared group prototypes, so telemetry alone
    confuses the members of a group; both signals together isolate the
    true twin.
    """
    build: list[BugTicket] = []
    queries: list[BugTicket] = []
    n_shapes = 3
    for i, fault in enumerate(_FIXTURE_FAULTS):
        raw_log = _fixture_log(i)
        shape = i % n_shapes
        true_suffix, foil_suffix = ("a", "b") if i % 2 == 0 else ("b", "a")
        true_id = f"case{i:02d}-{true_suffix}"
        foil_id = f"case{i:02d}-{foil_suffix}"
        build.append(
            BugTicket(
                bug_id=true_id,
                description=f"Recurring incident: {fault}.",
                resolution=f"Mitigation for {fault}: rolled the change back.",
                raw_log=raw_log,
                telemetry_series=tuple(_shape_series(shape, tweak=0.3)),
                labels={"fault_category": f"case{i:02d}", "closest_bug_id": foil_id},
            )
        )
        build.append(
            BugTicket(
                bug_id=foil_id,
                description=f"Lookalike incident: {fault}.",
                resolution=f"Unrelated mitigation for {fault}.",
                raw_log=raw_log,
                telemetry_series=tuple(_shape_series(3, tweak=float(i))),
                labels={"fault_category": f"case{i:02d}", "closest_bug_id": true_id},
            )
        )
        queries.append(
            BugTicket(
                bug_id=f"case{i:02d}-query",
                description=f"New report: {fault}.",
                resolution="",
                raw_log=raw_log,
                telemetry_series=tuple(_shape_series(shape)),
                labels={"fault_category": f"case{i:02d}", "closest_bug_id": true_id},
            )
        )
    return build, queries


# --- log clustering ---------------------------------------------------------


@dataclass
class ClusteringReport:
    """Anomaly-detection scores for the positive label, with the
    confusion counts they were computed from."""

    f1: float
    precision: float
    recall: float
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int
    positive_label: str
    n_items: int

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "true_positive": self.true_positive,
            "false_positive": self.false_positive,
            "false_negative": self.false_negative,
            "true_negative": self.true_negative,
            "positive_label": self.positive_label,
            "n_items": self.n_items,
        }


def eval_log_clustering(
    labeled_logs: list[tuple[str, str]],
    k_neighbors: int = 1,
    positive_label: str | None = None,
    *,
    extractor=None,
    embedder=None,
) -> ClusteringReport:
    """Leave-one-out k-nearest-neighbor classification over processed-log
    embeddings, scored as detection of the positive label.

    Each raw log is digested and embedded; every item is classified by
    the majority label among its nearest neighbors (ties go to the
    nearest tied voter). Without an explicit positive label the least
    frequent one is scored, breaking frequency ties lexicographically.
    """
    if len(labeled_logs) < 2:
        raise DegenerateLabels("need at least two labeled logs")
    labels = [label for _, label in labeled_logs]
    distinct = sorted(set(labels))
    if len(distinct) < 2:
        raise DegenerateLabels("all logs share one label; detection is vacuous")
    if positive_label is None:
        positive_label = min(distinct, key=lambda lab: (labels.count(lab), lab))
    elif positive_label not in distinct:
        raise DegenerateLabels(
            f"positive label {positive_label!r} does not occur in the data"
        )
    if k_neighbors < 1:
        raise ConfigError("k_neighbors must be >= 1")
    extractor = extractor or RuleBasedExtractor()
    embedder = embedder or OfflineHashingEmbedder(3072, seed=0)

    matrix = np.stack(
        [
            np.asarray(
                embed(process_raw_log(raw, extractor), embedder).components,
                dtype=np.float64,
            )
            for raw, _ in labeled_logs
        ]
    )
    scores = matrix @ matrix.T
    np.fill_diagonal(scores, -np.inf)
    k = min(k_neighbors, len(labeled_logs) - 1)
    order_tiebreak = np.arange(len(labeled_logs))

    tp = fp = fn = tn = 0
    for row, true_label in enumerate(labels):
        neighbor_rows = np.lexsort((order_tiebreak, -scores[row]))[:k]
        votes: dict[str, int] = {}
        for nrow in neighbor_rows:
            votes[labels[nrow]] = votes.get(labels[nrow], 0) + 1
        best = max(votes.values())
        predicted = next(
            labels[nrow] for nrow in neighbor_rows if votes[labels[nrow]] == best
        )
        is_positive = true_label == positive_label
        called_positive = predicted == positive_label
        if is_positive and called_positive:
            tp += 1
        elif is_positive:
            fn += 1
        elif called_positive:
            fp += 1
        else:
            tn += 1

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClusteringReport(
        f1=f1,
        precision=precision,
        recall=recall,
        true_positive=tp,
        false_positive=fp,
        false_negative=fn,
        true_negative=tn,
        positive_label=positive_label,
        n_items=len(labeled_logs),
    )


# --- defaults ----------------------------------------------------------------


def default_extractor() -> RuleBasedExtractor:
    return RuleBasedExtractor()


def default_embedder(dimension: int = 3072, seed: int = 0) -> OfflineHashingEmbedder:
    return OfflineHashingEmbedder(dimension, seed=seed)
