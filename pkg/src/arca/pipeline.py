"""End-to-end incident answering.

The stages, in order: prepare the incoming incident (log digest, digest
embedding, telemetry feature vector), first-round retrieval over the
digest-embedding index, second-round telemetry refinement, judge-prompt
assembly under a token budget, closest-bug judging, and mitigation-plan
generation from the chosen ticket's resolution. Provider calls are
recorded, stages are timed, and exceptions carry the stage name.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import re
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from . import ann, prompts
from .embed import EmbeddingVector, embed
from .errors import (
    BudgetTooSmall,
    ConfigError,
    DataError,
    MissingResolution,
    ProviderError,
    UnparseableVerdict,
    ZeroVector,
)
from .kb import BugDescription, KnowledgeBase
from .logproc import process_raw_log
from .providers import CallRecord, ChatProvider, estimate_tokens
from .telemetry import (
    TelemetrySeries,
    TelemetryVector,
    align,
    telemetry_similarity,
    vectorize,
)

logger = logging.getLogger(__name__)

DEFAULT_K = 300
DEFAULT_RETAIN = 0.8
DEFAULT_TOKEN_BUDGET = 30000
DEFAULT_CHARS_PER_TOKEN = 4


@dataclass(frozen=True)
class IncidentQuery:
    """Raw inputs for a new incident."""

    description: str
    raw_log: str
    telemetry_series: tuple[TelemetrySeries, ...] | None = None


@dataclass
class PreparedQuery:
    """Query after feature extraction, ready for retrieval."""

    query: IncidentQuery
    digest_text: str
    embedding: EmbeddingVector
    telemetry_vector: TelemetryVector | None


@dataclass
class Candidate:
    bug_id: str
    log_score: float
    telemetry_score: float | None = None


class TriageStage(str, Enum):
    LOG_ONLY = "log_only"
    REFINED = "refined"


@dataclass
class TriageSet:
    """Ranked candidates after a retrieval stage.

    LOG_ONLY sets are ordered by descending log score; REFINED sets by
    descending telemetry score with unscored candidates below every
    scored one. Ids never repeat.
    """

    candidates: list[Candidate]
    stage: TriageStage = TriageStage.LOG_ONLY

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def bug_ids(self) -> list[str]:
        return [c.bug_id for c in self.candidates]

    def __contains__(self, bug_id: str) -> bool:
        return any(c.bug_id == bug_id for c in self.candidates)


@dataclass(frozen=True)
class PromptBundle:
    """Assembled judge prompt plus which candidates made it in."""

    text: str
    candidate_ids: tuple[str, ...]
    token_estimate: int
    token_budget: int

    @property
    def included_count(self) -> int:
        return len(self.candidate_ids)


@dataclass(frozen=True)
class JudgeVerdict:
    chosen: str
    candidate_index: int
    candidates_considered: int
    rationale: str
    provider_tag: str
    fallback: bool = False
    note: str = ""


@dataclass(frozen=True)
class MitigationPlan:
    plan_text: str
    source_bug: str
    provider_tag: str
    provenance: tuple[CallRecord, ...] = ()


@dataclass
class CostReport:
    """Tokens, money, and time over the recorded calls."""

    calls: list[CallRecord] = field(default_factory=list)
    tokens_in: int = 0
    tokens_out: int = 0
    remote_calls: int = 0
    estimated_cost: float = 0.0
    elapsed: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_calls(
        cls,
        calls: list[CallRecord],
        prices: Mapping[str, tuple[float, float]] | None = None,
        elapsed: Mapping[str, float] | None = None,
    ) -> "CostReport":
        """prices maps provider tag to (usd per input token, usd per
        output token)."""
        prices = prices or {}
        report = cls(calls=list(calls), elapsed=dict(elapsed or {}))
        for call in calls:
            report.tokens_in += call.tokens_in
            report.tokens_out += call.tokens_out
            if call.remote:
                report.remote_calls += 1
            price_in, price_out = prices.get(call.provider_tag, (0.0, 0.0))
            report.estimated_cost += (
                call.tokens_in * price_in + call.tokens_out * price_out
            )
        return report


@dataclass
class IncidentAnswer:
    """Everything answer_incident produced, with full provenance."""

    plan: MitigationPlan
    triage: TriageSet
    verdict: JudgeVerdict
    cost: CostReport
    first_round: TriageSet
    prompt: PromptBundle
    query_digest: str
    refinement_skipped: bool = False

    @property
    def stage_seconds(self) -> dict[str, float]:
        return self.cost.elapsed


@contextmanager
def _stage(name: str, timings: dict[str, float]):
    """Time a stage; tag escaping exceptions with the stage name."""
    start = time.perf_counter()
    try:
        yield
    except Exception as exc:
        exc.stage = name
        raise
    finally:
        timings[name] = timings.get(name, 0.0) + (time.perf_counter() - start)


def prepare_query(
    query: IncidentQuery,
    *,
    extractor,
    embedder,
    grid_step: float = 1.0,
    calls: list[CallRecord] | None = None,
) -> PreparedQuery:
    """Digest the log, embed the digest, vectorize telemetry if present."""
    digest_text = process_raw_log(query.raw_log, extractor, calls)
    start = time.perf_counter()
    vector = embed(digest_text, embedder)
    if calls is not None:
        calls.append(
            CallRecord(
                stage="embed",
                provider_tag=embedder.tag,
                tokens_in=estimate_tokens(digest_text),
                elapsed=time.perf_counter() - start,
                remote=bool(getattr(embedder, "remote", False)),
            )
        )
    tvec = None
    if query.telemetry_series:
        tvec = vectorize(align(list(query.telemetry_series), grid_step))
    return PreparedQuery(
        query=query, digest_text=digest_text, embedding=vector, telemetry_vector=tvec
    )


def triage(
    kb: KnowledgeBase,
    q: IncidentQuery | PreparedQuery,
    K: int = DEFAULT_K,
    nprobe: int | None = None,
    *,
    extractor=None,
    embedder=None,
    grid_step: float = 1.0,
    calls: list[CallRecord] | None = None,
) -> TriageSet:
    """First round: probe the cluster index for the K most similar log
    digests. A raw IncidentQuery is prepared in place, which needs the
    extractor and embedder; a PreparedQuery is searched directly."""
    if isinstance(q, PreparedQuery):
        prepared = q
    else:
        if extractor is None or embedder is None:
            raise ConfigError(
                "triage on a raw query needs an extractor and an embedder"
            )
        prepared = prepare_query(
            q, extractor=extractor, embedder=embedder, grid_step=grid_step, calls=calls
        )
    index = kb.require_index()
    if nprobe is None:
        nprobe = ann.default_nprobe(index.n_clusters)
    hits = ann.search(index, prepared.embedding, K, nprobe)
    return TriageSet(
        candidates=[Candidate(bug_id=i, log_score=s) for i, s in hits],
        stage=TriageStage.LOG_ONLY,
    )


def refine_with_telemetry(
    kb: KnowledgeBase,
    ts: TriageSet,
    q_telemetry: TelemetryVector | list[TelemetrySeries] | None,
    retain_fraction: float = DEFAULT_RETAIN,
    grid_step: float = 1.0,
) -> TriageSet:
    """Second round: keep the ceil(retain_fraction * n) candidates whose
    stored telemetry is most similar to the query's.

    Candidates without stored telemetry (or with degenerate vectors)
    sort below every scored candidate, preserving first-round order
    among themselves. A query without telemetry, or a knowledge base
    holding none, skips the round and returns the input unchanged.
    """
    if not 0.0 < retain_fraction <= 1.0:
        raise ConfigError(
            f"retain_fraction must be in (0, 1], got {retain_fraction}"
        )
    if q_telemetry is None or (
        not isinstance(q_telemetry, TelemetryVector) and not q_telemetry
    ):
        logger.info("refinement skipped: query carries no telemetry")
        return ts
    if not kb.telemetry:
        logger.info("refinement skipped: knowledge base holds no telemetry")
        return ts
    if isinstance(q_telemetry, TelemetryVector):
        query_vector = q_telemetry
    else:
        query_vector = vectorize(align(list(q_telemetry), grid_step))
    stats = kb.stats if kb.stats is not None else kb.compute_telemetry_stats()
    scored: list[Candidate] = []
    for cand in ts.candidates:
        stored = kb.telemetry.get(cand.bug_id)
        score: float | None = None
        if stored is not None:
            try:
                score = telemetry_similarity(query_vector, stored, stats)
            except ZeroVector:
                score = None
        scored.append(
            Candidate(
                bug_id=cand.bug_id, log_score=cand.log_score, telemetry_score=score
            )
        )
    keep = math.ceil(retain_fraction * len(scored))
    ranked = sorted(
        scored,
        key=lambda c: -(
            c.telemetry_score if c.telemetry_score is not None else -math.inf
        ),
    )
    return TriageSet(candidates=ranked[:keep], stage=TriageStage.REFINED)


def _candidate_block(number: int, bug_id: str, record: BugDescription) -> str:
    return (
        f"Candidate {number} (incident {bug_id}):\n"
        f"Description: {record.incident_text}\n"
        f"Log digest:\n{record.digest_text}"
    )


def _query_block(prepared: PreparedQuery) -> str:
    telemetry_note = (
        "present" if prepared.telemetry_vector is not None else "not recorded"
    )
    return (
        "New incident:\n"
        f"Description: {prepared.query.description}\n"
        f"Log digest:\n{prepared.digest_text}\n"
        f"Performance counters: {telemetry_note}"
    )


def assemble_judge_prompt(
    prepared: PreparedQuery,
    candidates: TriageSet | list[Candidate],
    kb: KnowledgeBase,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    chars_per_token: int = DEFAULT_CHARS_PER_TOKEN,
    instruction: str | None = None,
    exemplars: tuple[str, ...] | None = None,
) -> PromptBundle:
    """Append candidates in rank order while the token estimate stays
    within budget; stop at the first one that would overflow.

    Raises BudgetTooSmall when not even one candidate fits.
    """
    ranked = list(candidates)
    if not ranked:
        raise DataError("no candidates to judge")
    instruction = prompts.JUDGE_INSTRUCTION if instruction is None else instruction
    exemplars = prompts.JUDGE_EXEMPLARS if exemplars is None else exemplars
    frame = list(exemplars) + [instruction, _query_block(prepared)]
    included: list[str] = []
    blocks: list[str] = []
    for number, cand in enumerate(ranked, start=1):
        record = kb.descriptions.get(cand.bug_id)
        if record is None:
            raise DataError(f"candidate {cand.bug_id!r} is not in the ticket store")
        block = _candidate_block(number, cand.bug_id, record)
        text = "\n\n".join(frame + blocks + [block])
        if estimate_tokens(text, chars_per_token) > token_budget:
            break
        blocks.append(block)
        included.append(cand.bug_id)
    if not included:
        raise BudgetTooSmall(
            f"token budget {token_budget} cannot fit the judge instruction, "
            "the incident, and one candidate"
        )
    text = "\n\n".join(frame + blocks)
    return PromptBundle(
        text=text,
        candidate_ids=tuple(included),
        token_estimate=estimate_tokens(text, chars_per_token),
        token_budget=token_budget,
    )


def _score_table(candidates: list[Candidate]) -> str:
    rows = []
    for number, cand in enumerate(candidates, start=1):
        if cand.telemetry_score is None:
            rows.append(
                f"Candidate {number} (incident {cand.bug_id}): "
                f"log similarity {cand.log_score:.4f}, no telemetry."
            )
        else:
            rows.append(
                f"Candidate {number} (incident {cand.bug_id}): "
                f"log similarity {cand.log_score:.4f}, "
                f"telemetry similarity {cand.telemetry_score:.4f}."
            )
    return "\n".join(rows)


def judge_offline(
    candidates: TriageSet | list[Candidate],
    use_log: bool = True,
    use_telemetry: bool = True,
) -> JudgeVerdict:
    """Pick the candidate with the highest mean over available modality
    scores; first in rank order wins ties. The rationale walks the score
    table the decision was made from."""
    ranked = list(candidates)
    if not ranked:
        raise DataError("no candidates to judge")
    modalities = [m for m, on in (("log", use_log), ("telemetry", use_telemetry)) if on]
    if not modalities:
        raise ConfigError("at least one modality must be enabled")
    best_idx = -1
    best = -math.inf
    for idx, cand in enumerate(ranked):
        parts = []
        if use_log:
            parts.append(cand.log_score)
        if use_telemetry and cand.telemetry_score is not None:
            parts.append(cand.telemetry_score)
        if not parts:
            continue
        score = sum(parts) / len(parts)
        if score > best:
            best = score
            best_idx = idx
    if best_idx < 0:
        raise DataError("no candidate has a score in the enabled modalities")
    rationale = (
        "Scoring each candidate by its mean similarity over the "
        f"{' and '.join(modalities)} signals:\n"
        + _score_table(ranked)
        + f"\nCandidate {best_idx + 1} has the highest mean similarity, so the "
        f"closest prior incident is {ranked[best_idx].bug_id}."
    )
    return JudgeVerdict(
        chosen=ranked[best_idx].bug_id,
        candidate_index=best_idx,
        candidates_considered=len(ranked),
        rationale=rationale,
        provider_tag=f"offline-judge({'+'.join(modalities)})",
    )


_ANSWER_RE = re.compile(r"^ANSWER:\s*(\d+)\s*$")


def parse_judge_reply(reply: str, n_candidates: int) -> int:
    """Strict parse: the last non-blank line must be 'ANSWER: <n>' with n
    in [1, n_candidates]. Returns the zero-based index."""
    lines = [line.strip() for line in reply.splitlines() if line.strip()]
    if not lines:
        raise UnparseableVerdict("judge reply is empty")
    match = _ANSWER_RE.match(lines[-1])
    if not match:
        raise UnparseableVerdict(
            f"final line is not 'ANSWER: <n>': {lines[-1][:80]!r}"
        )
    number = int(match.group(1))
    if not 1 <= number <= n_candidates:
        raise UnparseableVerdict(
            f"candidate number {number} outside [1, {n_candidates}]"
        )
    return number - 1


def judge(
    candidates: TriageSet | list[Candidate],
    bundle: PromptBundle | None = None,
    provider: ChatProvider | None = None,
    calls: list[CallRecord] | None = None,
    use_log: bool = True,
    use_telemetry: bool = True,
) -> JudgeVerdict:
    """Choose the closest prior incident.

    Without a provider the offline score-based judge runs. With one, the
    assembled prompt is sent; an unparseable reply gets one retry, and a
    second failure (or provider failure) falls back to the offline judge
    with the reason recorded on the verdict.
    """
    ranked = list(candidates)
    if provider is None:
        return judge_offline(ranked, use_log, use_telemetry)
    if bundle is None:
        raise ConfigError("a prompt bundle is required for the remote judge")
    if len(bundle.candidate_ids) != len(ranked) or any(
        c.bug_id != i for c, i in zip(ranked, bundle.candidate_ids)
    ):
        raise DataError("candidates do not match the prompt bundle")

    failure = ""
    prompt_text = bundle.text
    for attempt in range(2):
        start = time.perf_counter()
        try:
            result = provider.complete(prompt_text)
        except ProviderError as exc:
            failure = f"provider failed: {exc}"
            break
        if calls is not None:
            calls.append(
                CallRecord(
                    stage="judge",
                    provider_tag=provider.tag,
                    tokens_in=result.tokens_in or estimate_tokens(prompt_text),
                    tokens_out=result.tokens_out or estimate_tokens(result.text),
                    elapsed=time.perf_counter() - start,
                    remote=bool(getattr(provider, "remote", True)),
                )
            )
        try:
            idx = parse_judge_reply(result.text, len(ranked))
        except UnparseableVerdict as exc:
            failure = f"unparseable reply: {exc}"
            prompt_text = (
                bundle.text
                + "\n\nYour previous reply did not end with the required line. "
                "End with exactly one line of the form ANSWER: <candidate number>."
            )
            continue
        return JudgeVerdict(
            chosen=ranked[idx].bug_id,
            candidate_index=idx,
            candidates_considered=len(ranked),
            rationale=result.text,
            provider_tag=provider.tag,
        )
    fallback = judge_offline(ranked, use_log, use_telemetry)
    return dataclasses.replace(
        fallback,
        fallback=True,
        note=f"remote judge {provider.tag} unusable ({failure}); offline fallback",
    )


def generate_plan(
    prepared: PreparedQuery,
    verdict: JudgeVerdict,
    kb: KnowledgeBase,
    provider: ChatProvider | None = None,
    calls: list[CallRecord] | None = None,
    prompt: str | None = None,
) -> MitigationPlan:
    """Write the mitigation plan from the chosen ticket's resolution.

    Offline output is a fixed template over the prior incident's id and
    resolution text; a provider rewrites the resolution against the new
    incident instead.
    """
    chosen = kb.descriptions.get(verdict.chosen)
    if chosen is None:
        raise DataError(f"chosen incident {verdict.chosen!r} is not in the store")
    resolution = (chosen.resolution_text or "").strip()
    if not resolution:
        raise MissingResolution(
            f"incident {verdict.chosen!r} has no resolution to plan from"
        )
    if provider is None:
        return MitigationPlan(
            plan_text=prompts.OFFLINE_PLAN_TEMPLATE.format(
                bug_id=verdict.chosen, resolution=resolution
            ),
            source_bug=verdict.chosen,
            provider_tag="offline-plan",
        )
    prompt = prompts.PLAN_PROMPT if prompt is None else prompt
    request = "\n\n".join(
        [
            prompt,
            _query_block(prepared),
            f"Closest prior incident {verdict.chosen}:\n"
            f"Description: {chosen.incident_text}\n"
            f"Log digest:\n{chosen.digest_text}\n"
            f"Mitigation that worked: {resolution}",
        ]
    )
    start = time.perf_counter()
    result = provider.complete(request)
    record = CallRecord(
        stage="plan",
        provider_tag=provider.tag,
        tokens_in=result.tokens_in or estimate_tokens(request),
        tokens_out=result.tokens_out or estimate_tokens(result.text),
        elapsed=time.perf_counter() - start,
        remote=bool(getattr(provider, "remote", True)),
    )
    if calls is not None:
        calls.append(record)
    return MitigationPlan(
        plan_text=result.text,
        source_bug=verdict.chosen,
        provider_tag=provider.tag,
        provenance=(record,),
    )


def answer_incident(
    kb: KnowledgeBase,
    query: IncidentQuery,
    config=None,
    *,
    extractor=None,
    embedder=None,
    K: int | None = None,
    nprobe: int | None = None,
    retain_fraction: float | None = None,
    token_budget: int | None = None,
    chars_per_token: int | None = None,
    judge_provider: ChatProvider | None = None,
    plan_provider: ChatProvider | None = None,
    prices: Mapping[str, tuple[float, float]] | None = None,
    grid_step: float | None = None,
    instruction: str | None = None,
    exemplars: Sequence[str] | None = None,
    plan_prompt: str | None = None,
) -> IncidentAnswer:
    """Run every stage against the knowledge base and return the answer
    with full provenance: both retrieval rounds, the assembled prompt,
    the verdict, the plan, per-stage timings, and the cost report.

    Pass a top-level configuration to derive the extractor, embedder,
    providers, and knobs from it; explicit keyword arguments win over
    the configuration, and built-in defaults cover whatever remains.
    """
    if config is not None:
        from . import config as config_module

        extractor = extractor or config_module.make_extractor(config)
        embedder = embedder or config_module.make_embedder(config)
        if judge_provider is None:
            judge_provider = config_module.judge_provider(config)
        if plan_provider is None:
            plan_provider = config_module.plan_provider(config)
        pc = config.pipeline
        K = pc.k if K is None else K
        nprobe = (config.ann.nprobe or None) if nprobe is None else nprobe
        retain_fraction = (
            pc.retain_fraction if retain_fraction is None else retain_fraction
        )
        token_budget = pc.token_budget if token_budget is None else token_budget
        chars_per_token = (
            pc.chars_per_token if chars_per_token is None else chars_per_token
        )
        prices = config_module.price_table(config) if prices is None else prices
        grid_step = config.telemetry.grid_step if grid_step is None else grid_step
        instruction = (
            config_module.judge_instruction(config) if instruction is None else instruction
        )
        exemplars = (
            config_module.judge_exemplars(config) if exemplars is None else exemplars
        )
        plan_prompt = (
            config_module.plan_prompt(config) if plan_prompt is None else plan_prompt
        )
    if extractor is None or embedder is None:
        raise ConfigError("answer_incident needs an extractor and an embedder")
    K = DEFAULT_K if K is None else K
    retain_fraction = DEFAULT_RETAIN if retain_fraction is None else retain_fraction
    token_budget = DEFAULT_TOKEN_BUDGET if token_budget is None else token_budget
    chars_per_token = (
        DEFAULT_CHARS_PER_TOKEN if chars_per_token is None else chars_per_token
    )
    grid_step = 1.0 if grid_step is None else grid_step

    calls: list[CallRecord] = []
    timings: dict[str, float] = {}

    with _stage("prepare", timings):
        prepared = prepare_query(
            query, extractor=extractor, embedder=embedder,
            grid_step=grid_step, calls=calls,
        )
    with _stage("first_round", timings):
        first = triage(kb, prepared, K, nprobe)
    with _stage("refine", timings):
        refined = refine_with_telemetry(
            kb, first, prepared.telemetry_vector, retain_fraction
        )
    with _stage("assemble", timings):
        bundle = assemble_judge_prompt(
            prepared,
            refined,
            kb,
            token_budget=token_budget,
            chars_per_token=chars_per_token,
            instruction=instruction,
            exemplars=exemplars,
        )
        judged = [
            c for c in refined.candidates if c.bug_id in set(bundle.candidate_ids)
        ]
    with _stage("judge", timings):
        verdict = judge(judged, bundle, judge_provider, calls)
    with _stage("plan", timings):
        plan = generate_plan(
            prepared, verdict, kb, plan_provider, calls, prompt=plan_prompt
        )

    cost = CostReport.from_calls(calls, prices, timings)
    plan = dataclasses.replace(plan, provenance=tuple(calls))
    return IncidentAnswer(
        plan=plan,
        triage=refined,
        verdict=verdict,
        cost=cost,
        first_round=first,
        prompt=bundle,
        query_digest=prepared.digest_text,
        refinement_skipped=refined.stage is TriageStage.LOG_ONLY,
    )


def build_knowledge_base(
    tickets,
    *,
    extractor,
    embedder,
    grid_step: float = 1.0,
    n_clusters: int | None = None,
    seed: int = 0,
    with_index: bool = True,
    calls: list[CallRecord] | None = None,
) -> KnowledgeBase:
    """Ingest an iterable of tickets (anything with bug_id, description,
    resolution, raw_log, and optional telemetry_series and labels), then
    compute normalization stats and the cluster index."""
    kb = KnowledgeBase(embedder.dimension)
    for ticket in tickets:
        kb.ingest_ticket(
            ticket.bug_id,
            description=ticket.description,
            resolution=ticket.resolution,
            raw_log=ticket.raw_log,
            telemetry_series=list(ticket.telemetry_series or ()),
            extractor=extractor,
            embedder=embedder,
            grid_step=grid_step,
            labels=getattr(ticket, "labels", None),
            calls=calls,
        )
    if kb.telemetry:
        kb.compute_telemetry_stats()
    if with_index and kb.embeddings:
        kb.build_index(n_clusters=n_clusters, seed=seed)
    return kb
