"""Multimodal retrieval-augmented incident triage.

Historical bug tickets (descriptions, logs, performance counters) are
indexed by digest embedding; new incidents retrieve the closest prior
bugs in two rounds, a judge picks the single closest one, and its
recorded resolution becomes the mitigation plan.
"""
from .ann import AnnIndex, build_index, exact_search, search
from .config import ArcaConfig, load_config
from .corpus import (
    BugTicket,
    FaultCategory,
    FaultConfig,
    SimulatedRun,
    describe_ticket,
    generate_corpus,
    load_corpus,
    paired_bug_id,
    save_corpus,
    simulate_run,
)
from .embed import EmbeddingVector, OfflineHashingEmbedder, RemoteEmbedder, cosine, embed
from .errors import ArcaError, ConfigError, DataError, ProviderError
from .evaluate import (
    ClusteringReport,
    EvalReport,
    build_modality_fixture,
    eval_log_clustering,
    eval_modalities,
    eval_system,
    eval_triage,
    run_eval,
    split_corpus,
)
from .kb import BugDescription, KnowledgeBase
from .logproc import (
    LlmFeatureExtractor,
    LogDigest,
    LogRecord,
    LogTemplate,
    RuleBasedExtractor,
    digest_to_text,
    mask_message,
    parse_log,
    process_raw_log,
    templateize,
)
from .pipeline import (
    Candidate,
    CostReport,
    IncidentAnswer,
    IncidentQuery,
    JudgeVerdict,
    MitigationPlan,
    TriageSet,
    TriageStage,
    answer_incident,
    assemble_judge_prompt,
    build_knowledge_base,
    generate_plan,
    judge,
    judge_offline,
    prepare_query,
    refine_with_telemetry,
    triage,
)
from .providers import CallRecord, ChatResult, HttpChatProvider, ScriptedChatProvider
from .telemetry import (
    CANONICAL_COUNTERS,
    NormalizationStats,
    TelemetrySeries,
    TelemetryVector,
    align,
    telemetry_similarity,
    vectorize,
)

__version__ = "0.1.0"

__all__ = [
    "AnnIndex",
    "ArcaConfig",
    "ArcaError",
    "BugDescription",
    "BugTicket",
    "CallRecord",
    "CANONICAL_COUNTERS",
    "Candidate",
    "ClusteringReport",
    "CostReport",
    "ChatResult",
    "ConfigError",
    "DataError",
    "EmbeddingVector",
    "FaultCategory",
    "FaultConfig",
    "HttpChatProvider",
    "EvalReport",
    "IncidentAnswer",
    "IncidentQuery",
    "JudgeVerdict",
    "KnowledgeBase",
    "LlmFeatureExtractor",
    "LogDigest",
    "LogRecord",
    "LogTemplate",
    "MitigationPlan",
    "NormalizationStats",
    "OfflineHashingEmbedder",
    "ProviderError",
    "RemoteEmbedder",
    "RuleBasedExtractor",
    "ScriptedChatProvider",
    "SimulatedRun",
    "TelemetrySeries",
    "TelemetryVector",
    "TriageSet",
    "TriageStage",
    "answer_incident",
    "align",
    "assemble_judge_prompt",
    "build_index",
    "build_knowledge_base",
    "build_modality_fixture",
    "cosine",
    "describe_ticket",
    "digest_to_text",
    "embed",
    "eval_log_clustering",
    "eval_modalities",
    "eval_system",
    "eval_triage",
    "exact_search",
    "generate_corpus",
    "generate_plan",
    "judge",
    "judge_offline",
    "load_config",
    "load_corpus",
    "mask_message",
    "paired_bug_id",
    "parse_log",
    "prepare_query",
    "process_raw_log",
    "refine_with_telemetry",
    "run_eval",
    "save_corpus",
    "search",
    "simulate_run",
    "split_corpus",
    "telemetry_similarity",
    "templateize",
    "triage",
    "vectorize",
]
